#pragma once

// Conditional normalizing flow built from affine coupling blocks. Each block
// passes a fixed subset of coordinates through unchanged, feeds them (with the
// context vector) into a conditioner MLP, and applies the predicted log-scale
// and shift to the remaining coordinates; a fixed permutation follows each
// block so successive blocks transform different halves.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mse/nn.hpp"

namespace mse {

/// Non-finite intermediate during a flow pass; carries the offending block.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what, int block = -1)
        : std::runtime_error(block >= 0 ? what + " (coupling block " + std::to_string(block) + ")"
                                        : what),
          block_index(block) {}
    int block_index;
};

inline constexpr double kLogScaleClamp = 6.0;  // log-scales clamped to [-6, 6]

struct CouplingBlockSpec {
    std::vector<int> pass_idx;       // coordinates fed to the conditioner
    std::vector<int> transform_idx;  // coordinates scaled and shifted
    std::vector<int> perm;           // applied after the block: out[i] = in[perm[i]]
    DenseNetworkSpec conditioner;    // (|pass| + context_dim) -> 2*|transform|
};

struct CouplingFlow {
    int dim = 0;          // transformed-vector dimension P
    int context_dim = 0;  // conditioning summary dimension
    std::vector<CouplingBlockSpec> blocks;
    std::vector<NetworkWeights> weights;  // conditioner weights per block

    // Fixed affine pre-map u = (x - loc) / scale applied before the first
    // block (and undone by the inverse). Defaults to the identity.
    Eigen::VectorXd loc;
    Eigen::VectorXd scale;

    void validate() const;
};

/// Default construction: `blocks` coupling blocks, pass = first floor(P/2)
/// coordinates, reversal permutations alternating the transformed half (an
/// even reversal count overall, so their composition is the identity),
/// conditioner = hidden ReLU layers with zero-initialized final layer so the
/// whole flow starts as the identity map.
CouplingFlow make_flow(int dim, int context_dim, int blocks,
                       const std::vector<int>& conditioner_hidden, Rng& rng);

struct FlowCache {
    struct Block {
        Eigen::MatrixXd input;          // block input, dim x n
        ForwardCache conditioner;
        Eigen::MatrixXd raw_log_scale;  // pre-clamp, |transform| x n
        Eigen::MatrixXd log_scale;      // clamped
        Eigen::MatrixXd shift;
    };
    std::vector<Block> blocks;
};

/// x -> (z, log|det J|), batched over columns. Throws NumericError with the
/// block index on a non-finite intermediate.
void flow_forward(const CouplingFlow& flow, const Eigen::MatrixXd& x,
                  const Eigen::MatrixXd& context, Eigen::MatrixXd& z, Eigen::VectorXd& log_det,
                  FlowCache* cache = nullptr);

/// Exact inverse of flow_forward.
Eigen::MatrixXd flow_inverse(const CouplingFlow& flow, const Eigen::MatrixXd& z,
                             const Eigen::MatrixXd& context);

struct FlowGrads {
    std::vector<NetworkWeights> conditioner;  // per block
    Eigen::MatrixXd context;                  // context_dim x n
};

/// Reverse-mode gradients of a scalar loss given dLoss/dz (dim x n) and
/// dLoss/d(log_det) (one entry per column).
FlowGrads flow_backward(const CouplingFlow& flow, const FlowCache& cache,
                        const Eigen::MatrixXd& grad_z, const Eigen::VectorXd& grad_log_det);

nlohmann::json flow_structure_to_json(const CouplingFlow& flow);

/// Rebuild a flow from its structure JSON plus per-block conditioner networks
/// (weights checked against the stored specs).
CouplingFlow flow_from_structure(const nlohmann::json& j,
                                 const std::vector<NetworkWeights>& block_weights);

}  // namespace mse
