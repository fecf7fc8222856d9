#include "mse/training.hpp"

#include <stdexcept>

namespace mse {

void TrainConfig::validate() const {
    if (sims_per_epoch < 1 || validation_size < 1 || max_epochs < 1 || batch_size < 1 ||
        patience < 1)
        throw std::invalid_argument("train config: M, V, T, batch and patience must be >= 1");
}

SimBatch simulate_batch(const PriorSpec& prior, int k,
                        const std::optional<CensorInterval>& interval, int n, Rng& rng,
                        std::int64_t* redraws) {
    const int p = param_dim(k);
    const int input_dim = 2 * ((1 << k) - 1);
    SimBatch batch;
    batch.theta.resize(p, n);
    batch.input.resize(input_dim, n);
    for (int col = 0; col < n; ++col) {
        for (;;) {
            const ModelParams theta = sample_prior(prior, k, rng);
            std::vector<std::int64_t> counts;
            try {
                counts = simulate_counts(theta, rng);
            } catch (const RateOverflowError&) {
                if (redraws) ++*redraws;
                continue;
            }
            const Dataset data = apply_censoring(counts, interval, k);
            batch.theta.col(col) = theta.flatten();
            batch.input.col(col) = network_input(data);
            break;
        }
    }
    return batch;
}

}  // namespace mse
