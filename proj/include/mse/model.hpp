#ifndef MSE_MODEL_HPP
#define MSE_MODEL_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mse/rng.hpp"

namespace mse {

/// A non-empty subset of the K lists, i.e. the index of one count cell.
/// Patterns enumerate canonically as the integers 1..2^K-1 where bit k
/// (1-based, leftmost) flags membership of list k.
struct CapturePattern {
    int num_lists = 0;
    std::uint32_t mask = 0;

    bool contains(int list) const {  // list is 1-based
        return (mask >> (num_lists - list)) & 1u;
    }
    std::string to_string() const;
};

/// All 2^K-1 non-empty patterns in canonical order. Requires 2 <= k <= 20.
std::vector<CapturePattern> enumerate_patterns(int k);

/// 0-based position of gamma_{k,l} (1 <= k < l <= K) in the interaction vector,
/// which is ordered (1,2),(1,3),...,(K-1,K).
int pair_index(int k, int l, int num_lists);

/// theta = (alpha, beta_1..beta_K, gamma_12..gamma_{K-1,K}).
struct ModelParams {
    double alpha = 0.0;
    Eigen::VectorXd beta;
    Eigen::VectorXd gamma;

    int num_lists() const { return static_cast<int>(beta.size()); }
    int dim() const { return 1 + static_cast<int>(beta.size() + gamma.size()); }
    Eigen::VectorXd flatten() const;
    static ModelParams from_vector(const Eigen::VectorXd& v, int k);
    static ModelParams zeros(int k);
};

/// Total parameter dimension P = 1 + K + K(K-1)/2.
int param_dim(int k);

struct PriorSpec {
    double alpha_lo = 1.0;
    double alpha_hi = 10.0;
    double effect_sd = 4.0;
};

/// Inclusive censoring interval [lo, hi].
struct CensorInterval {
    std::int64_t lo = 0;
    std::int64_t hi = 0;
    friend bool operator==(const CensorInterval&, const CensorInterval&) = default;
};

/// Observed (possibly censored) counts per pattern. Censored entries are
/// coded -1 with mask = 1; -1 is the only negative sentinel.
struct Dataset {
    int k = 0;
    std::vector<std::int64_t> counts;
    std::vector<std::uint8_t> mask;
    std::optional<CensorInterval> interval;

    int cells() const { return static_cast<int>(counts.size()); }
};

double log_rate(const CapturePattern& pattern, const ModelParams& theta);

/// alpha ~ U[alpha_lo, alpha_hi]; each beta, gamma ~ N(0, effect_sd^2).
ModelParams sample_prior(const PriorSpec& spec, int k, Rng& rng);

/// Independent Poisson(exp(log_rate)) draw per cell, canonical order.
/// Throws RateOverflowError if any rate exceeds 1e15.
std::vector<std::int64_t> simulate_counts(const ModelParams& theta, Rng& rng);

/// Replace counts inside [lo, hi] by -1 and set the mask. Entries already
/// carrying the -1 sentinel stay censored, so re-censoring is a no-op.
Dataset apply_censoring(const std::vector<std::int64_t>& counts,
                        const std::optional<CensorInterval>& interval, int k);

/// Exact censored log-likelihood:
/// sum over uncensored cells of log PoissonPmf(n_x; lambda_x) plus, for each
/// censored cell, log P(lo <= N <= hi; lambda_x). Returns -inf when a cell has
/// probability zero (the documented underflow sentinel; the interval term is
/// evaluated in log space and only reaches -inf for genuinely zero mass).
double log_likelihood(const Dataset& data, const ModelParams& theta);

double log_prior(const ModelParams& theta, const PriorSpec& spec);

/// Network input convention: [log(1+n_x) or 0 if censored | mask as 0/1],
/// total length 2 * (2^K - 1).
Eigen::VectorXd network_input(const Dataset& data);

/// E(N0) = exp(alpha).
double hidden_population(const ModelParams& theta);

/// Structural checks: counts/mask length 2^K-1, counts[i] = -1 iff mask[i] = 1,
/// uncensored counts >= 0, censored cells require an interval.
void validate_dataset_shape(const Dataset& data);

// --- numeric primitives ---

/// n log(lambda) - lambda - lgamma(n+1); handles lambda = 0.
double log_poisson_pmf(std::int64_t n, double lambda);

/// log P(a <= N <= b) for N ~ Poisson(lambda), inclusive endpoints, via
/// log-sum-exp over the pmf terms (exact route for b <= 1e4; CDF difference
/// through the regularized incomplete gamma beyond that).
double log_poisson_interval(std::int64_t a, std::int64_t b, double lambda);

/// P(N <= n) via the upper regularized incomplete gamma Q(n+1, lambda).
double poisson_cdf(std::int64_t n, double lambda);

/// Rows = cells in canonical order, cols = P; log-rates = A * theta.flatten().
Eigen::MatrixXd design_matrix(int k);

/// Precomputed censored-likelihood evaluator for optimizer/sampler hot loops.
/// Agrees with log_likelihood exactly (shared code path).
class LikelihoodEvaluator {
public:
    explicit LikelihoodEvaluator(const Dataset& data);

    double operator()(const Eigen::VectorXd& theta_flat) const;

    /// Analytic score d logL / d theta: A^T r with r_x = n_x - lambda_x for
    /// uncensored cells and E[N | lo <= N <= hi] - lambda_x for censored ones.
    Eigen::VectorXd score(const Eigen::VectorXd& theta_flat) const;

    const Eigen::MatrixXd& design() const { return design_; }
    int dim() const { return static_cast<int>(design_.cols()); }
    int num_lists() const { return k_; }

private:
    int k_;
    Eigen::MatrixXd design_;
    std::vector<std::int64_t> counts_;
    std::vector<std::uint8_t> mask_;
    std::optional<CensorInterval> interval_;
};

}  // namespace mse

#endif
