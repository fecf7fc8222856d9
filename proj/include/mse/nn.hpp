#ifndef MSE_NN_HPP
#define MSE_NN_HPP

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "mse/rng.hpp"

namespace mse {

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class OutputKind { identity, shifted_sigmoid };

/// Per-output activation; shifted_sigmoid maps pre-activation z to
/// lo + (hi - lo) / (1 + exp(-z)), strictly inside (lo, hi).
struct OutputActivation {
    OutputKind kind = OutputKind::identity;
    double lo = 0.0;
    double hi = 1.0;
};

struct DenseNetworkSpec {
    int input_dim = 0;
    std::vector<int> hidden_widths;  // ReLU layers
    int output_dim = 0;
    std::vector<OutputActivation> outputs;  // size 1 broadcasts to all outputs

    int num_layers() const { return static_cast<int>(hidden_widths.size()) + 1; }
    const OutputActivation& output_at(int i) const {
        return outputs.size() == 1 ? outputs[0] : outputs[static_cast<std::size_t>(i)];
    }
    void validate() const;
};

/// Per-layer weight matrices (fan_out x fan_in) and bias vectors. Doubles as
/// the gradient/moment container since shapes always match.
struct NetworkWeights {
    std::vector<Eigen::MatrixXd> w;
    std::vector<Eigen::VectorXd> b;

    static NetworkWeights zeros_like(const NetworkWeights& other);
    std::size_t param_count() const;
    double squared_norm() const;
    bool all_finite() const;
    void add_scaled(const NetworkWeights& other, double factor);
    void scale(double factor);
};

enum class InitScheme { he_uniform, zeros };

NetworkWeights init_weights(const DenseNetworkSpec& spec, InitScheme scheme, Rng& rng);

/// Activations cached during a batched forward pass, consumed by backward.
struct ForwardCache {
    std::vector<Eigen::MatrixXd> act;  // act[0] = input, act[l+1] = post-activation of layer l
    std::vector<Eigen::MatrixXd> pre;  // pre-activation per layer
};

/// Columns are examples. Throws invalid_argument on non-finite input.
Eigen::MatrixXd forward(const DenseNetworkSpec& spec, const NetworkWeights& weights,
                        const Eigen::MatrixXd& input, ForwardCache* cache = nullptr);

Eigen::VectorXd forward(const DenseNetworkSpec& spec, const NetworkWeights& weights,
                        const Eigen::VectorXd& input);

/// Reverse-mode gradients of the forward map. upstream is dLoss/dOutput
/// (output_dim x batch); optionally also yields dLoss/dInput.
NetworkWeights backward(const DenseNetworkSpec& spec, const NetworkWeights& weights,
                        const ForwardCache& cache, const Eigen::MatrixXd& upstream,
                        Eigen::MatrixXd* input_grad = nullptr);

struct AdamConfig {
    double learning_rate = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    long long t = 0;
    NetworkWeights m;
    NetworkWeights v;

    static AdamState for_weights(const NetworkWeights& weights);
};

/// Standard bias-corrected ADAM update; increments state.t.
void adam_step(AdamState& state, NetworkWeights& weights, const NetworkWeights& grads,
               const AdamConfig& config);

// --- checkpoint serialization ---
//
// File layout: magic "MSENN", uint32 LE format version, uint64 LE header
// length, JSON header (network specs, layer shapes, metadata), then float64 LE
// weight blocks in layer order (W row-major, then bias, per layer).

struct NamedNetwork {
    std::string name;
    DenseNetworkSpec spec;
    NetworkWeights weights;
};

struct Checkpoint {
    std::vector<NamedNetwork> networks;
    nlohmann::json metadata;

    const NamedNetwork& network(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const std::vector<NamedNetwork>& networks,
                     const nlohmann::json& metadata);

/// Throws FormatError on bad magic/version, truncation, shape mismatch, or
/// non-finite weights.
Checkpoint load_checkpoint(const std::string& path);

nlohmann::json spec_to_json(const DenseNetworkSpec& spec);
DenseNetworkSpec spec_from_json(const nlohmann::json& j);

}  // namespace mse

#endif
