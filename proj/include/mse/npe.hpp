#pragma once

// Neural Posterior Estimator: a summary encoder feeding a conditional
// affine-coupling flow over theta, trained jointly by minibatch negative
// log-likelihood. Sampling inverts the flow on base-normal draws and rejects
// anything outside the alpha prior support.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mse/flow.hpp"
#include "mse/model.hpp"
#include "mse/training.hpp"

namespace mse {

struct SupportStarvationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NpeModel {
    int k = 0;
    std::optional<CensorInterval> interval;
    PriorSpec prior;
    DenseNetworkSpec encoder_spec;  // 2*(2^K-1) -> summary_dim, identity output
    NetworkWeights encoder_weights;
    CouplingFlow flow;  // dim = P, context = summary_dim

    Eigen::VectorXd summarize(const Dataset& data) const;  // encoder forward
};

struct NpeArch {
    std::vector<int> encoder_hidden = {256, 256, 256};
    int summary_dim = 128;
    int num_blocks = 5;
    std::vector<int> conditioner_hidden = {128, 128};
};

struct NpeTrainResult {
    NpeModel model;
    TrainingLog log;
};

/// Same simulation-on-the-fly protocol as train_nbe; encoder and all
/// conditioner networks step together under one ADAM config. The flow's fixed
/// pre-map standardizes theta by its prior location and scale, so the
/// zero-initialized flow starts at the standardized-normal baseline.
NpeTrainResult train_npe(const TrainConfig& config, const PriorSpec& prior, int k,
                         const std::optional<CensorInterval>& interval,
                         const NpeArch& arch = {});

/// Mean negative log-likelihood over a batch (columns of `theta` paired with
/// columns of `input` = network_input vectors) and, when the grad pointers are
/// non-null, its exact gradients w.r.t. encoder and conditioner weights. This
/// is the training objective; exposed so gradient checks exercise the real
/// code path.
double npe_nll(const NpeModel& model, const Eigen::MatrixXd& theta, const Eigen::MatrixXd& input,
               NetworkWeights* encoder_grads = nullptr,
               std::vector<NetworkWeights>* flow_grads = nullptr);

/// log q(theta | data) = logNormal(z; 0, I) + log|det J|, z = f(theta | s).
double log_q(const NpeModel& model, const ModelParams& theta, const Dataset& data);

/// Columns of `thetas` are flattened parameter vectors.
Eigen::VectorXd log_q_batch(const NpeModel& model, const Eigen::MatrixXd& thetas,
                            const Dataset& data);

struct PosteriorSamples {
    Eigen::MatrixXd samples;  // P x n_samples, accepted draws in draw order
    double acceptance_rate = 0.0;
    std::int64_t proposals = 0;
};

/// Deterministic given the seed (chunked proposal streams). Rejects draws with
/// alpha outside the prior support or non-finite coordinates. Throws
/// SupportStarvationError when acceptance stays below 0.1% after 1e6 proposals.
PosteriorSamples sample_posterior(const NpeModel& model, const Dataset& data, int n_samples,
                                  std::uint64_t seed);

struct PpcCellSummary {
    std::string pattern;
    bool censored = false;         // in the observed dataset
    std::int64_t observed = -1;    // -1 for censored cells
    double mean = 0.0;             // of raw replicated counts
    double lo95 = 0.0, hi95 = 0.0; // central 95% interval of raw replicates
    bool observed_inside = false;  // uncensored cells only
    double in_band_fraction = 0.0; // censored cells: replicate mass inside [a,b]
};

struct PpcResult {
    std::vector<Dataset> replicates;  // censored with the observed interval
    Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> raw_counts;  // cells x S
    std::vector<PpcCellSummary> cells;
    double acceptance_rate = 0.0;
};

/// Draw S posterior parameter vectors, replicate one count vector for each,
/// censor like the observed data, and summarize per cell.
PpcResult posterior_predictive(const NpeModel& model, const Dataset& data, int n_replicates,
                               std::uint64_t seed);

void save_npe(const std::string& path, const NpeModel& model,
              const nlohmann::json& extra_metadata = nlohmann::json::object());
NpeModel load_npe(const std::string& path, nlohmann::json* metadata = nullptr);

/// Posterior samples CSV: one row per draw, columns alpha, beta_*, gamma_*,
/// n0 = exp(alpha).
void save_samples_csv(const std::string& path, const Eigen::MatrixXd& samples, int k);

}  // namespace mse
