#pragma once

// Neural Bayes Estimators: one MLP per quantile level mapping the masked
// log-count vector straight to posterior quantiles of theta. The median net
// trains under absolute-error loss, the tail nets under pinball loss.

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mse/model.hpp"
#include "mse/nn.hpp"
#include "mse/training.hpp"

namespace mse {

struct NbeModel {
    int k = 0;
    std::optional<CensorInterval> interval;
    PriorSpec prior;
    std::vector<double> taus;  // ascending; default {0.025, 0.5, 0.975}
    DenseNetworkSpec spec;     // shared by all quantile networks
    std::vector<NetworkWeights> weights;  // one per tau
};

/// Mean over the P components of |theta_i - theta_hat_i|.
double loss_l1(const Eigen::VectorXd& theta_true, const Eigen::VectorXd& theta_hat);

/// Pinball loss (theta_hat - theta)(1{theta_hat > theta} - tau), summed over
/// components and divided by P. Requires 0 < tau < 1.
double loss_quantile(double tau, const Eigen::VectorXd& theta_true,
                     const Eigen::VectorXd& theta_hat);

/// Batched training risk and (optionally) its gradient w.r.t. the predictions;
/// tau < 0 selects absolute error (the median net). Both divide by batch * P
/// so the risk matches the per-example loss_* functions averaged over the
/// batch. This is the exact objective the trainer differentiates; exposed so
/// gradient checks exercise the real code path.
double nbe_batch_risk(double tau, const Eigen::MatrixXd& truth, const Eigen::MatrixXd& pred,
                      Eigen::MatrixXd* grad = nullptr);

struct NbeTrainResult {
    NbeModel model;
    std::vector<TrainingLog> logs;  // one per tau
};

/// Simulation-on-the-fly training: a fixed validation set is drawn once, each
/// epoch draws sims_per_epoch fresh pairs, and every quantile network consumes
/// the same stream with its own optimizer and early-stopping state (best
/// validation weights kept). Rate-overflow draws are redrawn and counted.
NbeTrainResult train_nbe(const TrainConfig& config, const PriorSpec& prior, int k,
                         const std::optional<CensorInterval>& interval,
                         const std::vector<int>& hidden = {256, 256, 256},
                         const std::vector<double>& taus = {0.025, 0.5, 0.975});

struct NbeEstimate {
    ModelParams lo, median, hi;  // per-component sorted across quantile nets
    double n0_lo = 0, n0_median = 0, n0_hi = 0;
    Eigen::MatrixXd raw;  // P x num_taus, unsorted network outputs (diagnostic)
};

/// Three forward passes and a per-component sort (quantile crossing is
/// resolved by sorting; raw outputs are retained). Pure: never touches an RNG.
/// Throws invalid_argument when the dataset's K or censor interval does not
/// match the model, naming both values.
NbeEstimate estimate(const NbeModel& model, const Dataset& data);

void save_nbe(const std::string& path, const NbeModel& model,
              const nlohmann::json& extra_metadata = nlohmann::json::object());
NbeModel load_nbe(const std::string& path, nlohmann::json* metadata = nullptr);

/// Shared guard for checkpoint/data compatibility (used by NBE and NPE).
void check_data_compatibility(int model_k, const std::optional<CensorInterval>& model_interval,
                              const Dataset& data, const std::string& who);

}  // namespace mse
