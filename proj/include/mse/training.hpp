#pragma once

// Shared training-loop plumbing: config, per-epoch log, and the on-the-fly
// prior/model simulation stream used by both estimator families.

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "mse/model.hpp"
#include "mse/nn.hpp"
#include "mse/rng.hpp"

namespace mse {

struct TrainConfig {
    int sims_per_epoch = 10000;   // fresh (theta, data) pairs per epoch
    int validation_size = 2000;   // fixed validation set, simulated once
    int max_epochs = 200;
    int batch_size = 128;
    int patience = 5;             // early-stopping window, in epochs
    std::uint64_t seed = 0;
    AdamConfig adam;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_risk = 0.0;
    double validation_risk = 0.0;
};

struct TrainingLog {
    double initial_validation_risk = 0.0;  // epoch-0 risk of the untrained net
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;  // 0 = initial weights were never beaten
    double best_validation_risk = 0.0;
    std::int64_t overflow_redraws = 0;  // rate-overflow pairs rejected and redrawn
    double seconds = 0.0;
};

/// A batch of simulated (theta, censored data) pairs, columns = examples.
struct SimBatch {
    Eigen::MatrixXd theta;  // P x n
    Eigen::MatrixXd input;  // 2*(2^K-1) x n, network_input convention
};

/// Draw n pairs from the prior/model, censoring with `interval`. Pairs whose
/// rates overflow are rejected and redrawn; redraws are added to *redraws.
SimBatch simulate_batch(const PriorSpec& prior, int k,
                        const std::optional<CensorInterval>& interval, int n, Rng& rng,
                        std::int64_t* redraws = nullptr);

/// Seed-stream ids so every consumer of a master seed stays reproducible.
namespace seed_stream {
inline constexpr std::uint64_t init = 0;          // + network index
inline constexpr std::uint64_t validation = 100;
inline constexpr std::uint64_t epoch = 1000;      // + epoch number
inline constexpr std::uint64_t shuffle = 500000;  // + epoch number
inline constexpr std::uint64_t sampling = 900000; // + chunk index
}  // namespace seed_stream

}  // namespace mse
