#ifndef MSE_RNG_HPP
#define MSE_RNG_HPP

#include <cstdint>
#include <random>
#include <stdexcept>

namespace mse {

/// Thrown when a Poisson rate exceeds the supported range (1e15).
struct RateOverflowError : std::runtime_error {
    explicit RateOverflowError(double lambda)
        : std::runtime_error("Poisson rate overflow: lambda = " + std::to_string(lambda)),
          rate(lambda) {}
    double rate;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Derive an independent stream seed from a master seed (chains, sampling chunks).
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream);

/// Seeded generator with explicit draw routines so results are identical
/// across platforms and standard-library versions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; consumes two uniforms per call.
    double normal() ;

    double normal(double mean, double sd) { return mean + sd * normal(); }

    /// Poisson draw. Inversion for lambda <= 30, transformed rejection (PTRS)
    /// up to 1e6, rounded Normal(lambda, lambda) beyond that.
    /// Throws RateOverflowError for lambda > 1e15.
    std::int64_t poisson(double lambda);

    std::uint64_t raw() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

}  // namespace mse

#endif
