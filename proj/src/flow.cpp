#include "mse/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mse {

using nlohmann::json;

namespace {

bool is_permutation_of_range(const std::vector<int>& perm, int n) {
    if (static_cast<int>(perm.size()) != n) return false;
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    for (int p : perm) {
        if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)]) return false;
        seen[static_cast<std::size_t>(p)] = true;
    }
    return true;
}

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
    return out;
}

}  // namespace

void CouplingFlow::validate() const {
    if (dim < 2) throw std::invalid_argument("flow: dim must be >= 2");
    if (context_dim < 1) throw std::invalid_argument("flow: context_dim must be >= 1");
    if (blocks.size() != weights.size())
        throw std::invalid_argument("flow: block/weight count mismatch");
    if (loc.size() != dim || scale.size() != dim)
        throw std::invalid_argument("flow: loc/scale must have length dim");
    if ((scale.array() <= 0.0).any()) throw std::invalid_argument("flow: scale must be positive");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto& blk = blocks[b];
        const int n_pass = static_cast<int>(blk.pass_idx.size());
        const int n_tr = static_cast<int>(blk.transform_idx.size());
        if (n_pass + n_tr != dim)
            throw std::invalid_argument("flow: block split does not cover all coordinates");
        std::vector<int> all = blk.pass_idx;
        all.insert(all.end(), blk.transform_idx.begin(), blk.transform_idx.end());
        std::sort(all.begin(), all.end());
        for (int i = 0; i < dim; ++i)
            if (all[static_cast<std::size_t>(i)] != i)
                throw std::invalid_argument("flow: block split is not a partition of coordinates");
        if (!is_permutation_of_range(blk.perm, dim))
            throw std::invalid_argument("flow: invalid permutation");
        blk.conditioner.validate();
        if (blk.conditioner.input_dim != n_pass + context_dim)
            throw std::invalid_argument("flow: conditioner input dim mismatch");
        if (blk.conditioner.output_dim != 2 * n_tr)
            throw std::invalid_argument("flow: conditioner output dim mismatch");
    }
}

CouplingFlow make_flow(int dim, int context_dim, int blocks,
                       const std::vector<int>& conditioner_hidden, Rng& rng) {
    if (blocks < 1) throw std::invalid_argument("flow: need at least one block");
    CouplingFlow flow;
    flow.dim = dim;
    flow.context_dim = context_dim;
    flow.loc = Eigen::VectorXd::Zero(dim);
    flow.scale = Eigen::VectorXd::Ones(dim);

    const int n_pass = dim / 2;
    std::vector<int> pass(static_cast<std::size_t>(n_pass));
    std::iota(pass.begin(), pass.end(), 0);
    std::vector<int> transform(static_cast<std::size_t>(dim - n_pass));
    std::iota(transform.begin(), transform.end(), n_pass);

    std::vector<int> reversal(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i) reversal[static_cast<std::size_t>(i)] = dim - 1 - i;
    std::vector<int> identity(static_cast<std::size_t>(dim));
    std::iota(identity.begin(), identity.end(), 0);

    for (int b = 0; b < blocks; ++b) {
        CouplingBlockSpec blk;
        blk.pass_idx = pass;
        blk.transform_idx = transform;
        // Reversals alternate which half is transformed; an even total count
        // keeps the zero-initialized flow an exact identity map.
        blk.perm = (b + 1 < blocks || blocks % 2 == 0) ? reversal : identity;
        blk.conditioner.input_dim = n_pass + context_dim;
        blk.conditioner.hidden_widths = conditioner_hidden;
        blk.conditioner.output_dim = 2 * (dim - n_pass);
        blk.conditioner.outputs = {OutputActivation{}};

        NetworkWeights w = init_weights(blk.conditioner, InitScheme::he_uniform, rng);
        w.w.back().setZero();  // zero final layer => block starts as the identity
        w.b.back().setZero();
        flow.blocks.push_back(std::move(blk));
        flow.weights.push_back(std::move(w));
    }
    flow.validate();
    return flow;
}

void flow_forward(const CouplingFlow& flow, const Eigen::MatrixXd& x,
                  const Eigen::MatrixXd& context, Eigen::MatrixXd& z, Eigen::VectorXd& log_det,
                  FlowCache* cache) {
    if (x.rows() != flow.dim) throw std::invalid_argument("flow_forward: input dim mismatch");
    if (context.rows() != flow.context_dim || context.cols() != x.cols())
        throw std::invalid_argument("flow_forward: context shape mismatch");

    const Eigen::Index n = x.cols();
    Eigen::MatrixXd u = (x.colwise() - flow.loc).array().colwise() / flow.scale.array();
    log_det = Eigen::VectorXd::Constant(n, -flow.scale.array().log().sum());
    if (cache) cache->blocks.clear();

    for (std::size_t b = 0; b < flow.blocks.size(); ++b) {
        const auto& blk = flow.blocks[b];
        const Eigen::Index n_tr = static_cast<Eigen::Index>(blk.transform_idx.size());

        Eigen::MatrixXd cond_in(blk.conditioner.input_dim, n);
        cond_in.topRows(static_cast<Eigen::Index>(blk.pass_idx.size())) = gather_rows(u, blk.pass_idx);
        cond_in.bottomRows(flow.context_dim) = context;

        FlowCache::Block blk_cache;
        ForwardCache* cc = cache ? &blk_cache.conditioner : nullptr;
        if (cache) blk_cache.input = u;
        const Eigen::MatrixXd cond_out = forward(blk.conditioner, flow.weights[b], cond_in, cc);

        const Eigen::MatrixXd raw_ls = cond_out.topRows(n_tr);
        const Eigen::MatrixXd ls = raw_ls.array().min(kLogScaleClamp).max(-kLogScaleClamp).matrix();
        const Eigen::MatrixXd shift = cond_out.bottomRows(n_tr);

        Eigen::MatrixXd v = u;
        for (Eigen::Index i = 0; i < n_tr; ++i)
            v.row(blk.transform_idx[static_cast<std::size_t>(i)]) =
                u.row(blk.transform_idx[static_cast<std::size_t>(i)]).array() *
                    ls.row(i).array().exp() +
                shift.row(i).array();
        log_det += ls.colwise().sum().transpose();

        Eigen::MatrixXd w(flow.dim, n);
        for (int i = 0; i < flow.dim; ++i)
            w.row(i) = v.row(blk.perm[static_cast<std::size_t>(i)]);
        u = std::move(w);
        if (!u.allFinite())
            throw NumericError("flow_forward: non-finite intermediate", static_cast<int>(b));

        if (cache) {
            blk_cache.raw_log_scale = raw_ls;
            blk_cache.log_scale = ls;
            blk_cache.shift = shift;
            cache->blocks.push_back(std::move(blk_cache));
        }
    }
    z = std::move(u);
}

Eigen::MatrixXd flow_inverse(const CouplingFlow& flow, const Eigen::MatrixXd& z,
                             const Eigen::MatrixXd& context) {
    if (z.rows() != flow.dim) throw std::invalid_argument("flow_inverse: input dim mismatch");
    if (context.rows() != flow.context_dim || context.cols() != z.cols())
        throw std::invalid_argument("flow_inverse: context shape mismatch");

    const Eigen::Index n = z.cols();
    Eigen::MatrixXd u = z;
    for (std::size_t bi = flow.blocks.size(); bi-- > 0;) {
        const auto& blk = flow.blocks[bi];
        const Eigen::Index n_tr = static_cast<Eigen::Index>(blk.transform_idx.size());

        Eigen::MatrixXd v(flow.dim, n);  // undo the permutation: v[perm[i]] = u[i]
        for (int i = 0; i < flow.dim; ++i)
            v.row(blk.perm[static_cast<std::size_t>(i)]) = u.row(i);

        Eigen::MatrixXd cond_in(blk.conditioner.input_dim, n);
        cond_in.topRows(static_cast<Eigen::Index>(blk.pass_idx.size())) = gather_rows(v, blk.pass_idx);
        cond_in.bottomRows(flow.context_dim) = context;
        const Eigen::MatrixXd cond_out = forward(blk.conditioner, flow.weights[bi], cond_in);

        const Eigen::MatrixXd ls =
            cond_out.topRows(n_tr).array().min(kLogScaleClamp).max(-kLogScaleClamp).matrix();
        const Eigen::MatrixXd shift = cond_out.bottomRows(n_tr);

        for (Eigen::Index i = 0; i < n_tr; ++i)
            v.row(blk.transform_idx[static_cast<std::size_t>(i)]) =
                (v.row(blk.transform_idx[static_cast<std::size_t>(i)]).array() - shift.row(i).array()) *
                (-ls.row(i).array()).exp();
        if (!v.allFinite())
            throw NumericError("flow_inverse: non-finite intermediate", static_cast<int>(bi));
        u = std::move(v);
    }
    return ((u.array().colwise() * flow.scale.array()).colwise() + flow.loc.array()).matrix();
}

FlowGrads flow_backward(const CouplingFlow& flow, const FlowCache& cache,
                        const Eigen::MatrixXd& grad_z, const Eigen::VectorXd& grad_log_det) {
    if (cache.blocks.size() != flow.blocks.size())
        throw std::invalid_argument("flow_backward: cache/block count mismatch");
    const Eigen::Index n = grad_z.cols();

    FlowGrads grads;
    grads.conditioner.resize(flow.blocks.size());
    grads.context = Eigen::MatrixXd::Zero(flow.context_dim, n);

    Eigen::MatrixXd grad_u = grad_z;  // dLoss/d(current block output)
    for (std::size_t bi = flow.blocks.size(); bi-- > 0;) {
        const auto& blk = flow.blocks[bi];
        const auto& bc = cache.blocks[bi];
        const Eigen::Index n_tr = static_cast<Eigen::Index>(blk.transform_idx.size());

        Eigen::MatrixXd grad_v(flow.dim, n);  // before the permutation
        for (int i = 0; i < flow.dim; ++i)
            grad_v.row(blk.perm[static_cast<std::size_t>(i)]) = grad_u.row(i);

        // v_t = u_t .* exp(ls) + shift;  log_det += sum(ls)
        Eigen::MatrixXd grad_ls(n_tr, n);
        Eigen::MatrixXd grad_shift(n_tr, n);
        Eigen::MatrixXd grad_u_next = grad_v;
        for (Eigen::Index i = 0; i < n_tr; ++i) {
            const int row = blk.transform_idx[static_cast<std::size_t>(i)];
            const auto e_ls = bc.log_scale.row(i).array().exp();
            grad_u_next.row(row) = (grad_v.row(row).array() * e_ls).matrix();
            grad_ls.row(i) = (grad_v.row(row).array() * bc.input.row(row).array() * e_ls).matrix() +
                             grad_log_det.transpose();
            grad_shift.row(i) = grad_v.row(row);
        }
        // clamp gate: zero gradient where the raw log-scale was clipped
        grad_ls = (bc.raw_log_scale.array().abs() < kLogScaleClamp)
                      .select(grad_ls.array(), 0.0)
                      .matrix();

        Eigen::MatrixXd upstream(2 * n_tr, n);
        upstream.topRows(n_tr) = grad_ls;
        upstream.bottomRows(n_tr) = grad_shift;

        Eigen::MatrixXd grad_cond_in;
        grads.conditioner[bi] =
            backward(blk.conditioner, flow.weights[bi], bc.conditioner, upstream, &grad_cond_in);

        for (std::size_t i = 0; i < blk.pass_idx.size(); ++i)
            grad_u_next.row(blk.pass_idx[i]) += grad_cond_in.row(static_cast<Eigen::Index>(i));
        grads.context += grad_cond_in.bottomRows(flow.context_dim);
        grad_u = std::move(grad_u_next);
    }
    return grads;  // gradient w.r.t. x itself is not needed by any caller
}

json flow_structure_to_json(const CouplingFlow& flow) {
    json j;
    j["dim"] = flow.dim;
    j["context_dim"] = flow.context_dim;
    j["loc"] = std::vector<double>(flow.loc.data(), flow.loc.data() + flow.loc.size());
    j["scale"] = std::vector<double>(flow.scale.data(), flow.scale.data() + flow.scale.size());
    j["blocks"] = json::array();
    for (const auto& blk : flow.blocks)
        j["blocks"].push_back({{"pass", blk.pass_idx},
                               {"transform", blk.transform_idx},
                               {"perm", blk.perm},
                               {"conditioner", spec_to_json(blk.conditioner)}});
    return j;
}

CouplingFlow flow_from_structure(const json& j, const std::vector<NetworkWeights>& block_weights) {
    CouplingFlow flow;
    flow.dim = j.at("dim").get<int>();
    flow.context_dim = j.at("context_dim").get<int>();
    const auto loc = j.at("loc").get<std::vector<double>>();
    const auto scale = j.at("scale").get<std::vector<double>>();
    flow.loc = Eigen::Map<const Eigen::VectorXd>(loc.data(), static_cast<Eigen::Index>(loc.size()));
    flow.scale =
        Eigen::Map<const Eigen::VectorXd>(scale.data(), static_cast<Eigen::Index>(scale.size()));
    for (const auto& jb : j.at("blocks")) {
        CouplingBlockSpec blk;
        blk.pass_idx = jb.at("pass").get<std::vector<int>>();
        blk.transform_idx = jb.at("transform").get<std::vector<int>>();
        blk.perm = jb.at("perm").get<std::vector<int>>();
        blk.conditioner = spec_from_json(jb.at("conditioner"));
        flow.blocks.push_back(std::move(blk));
    }
    if (block_weights.size() != flow.blocks.size())
        throw FormatError("flow: expected " + std::to_string(flow.blocks.size()) +
                          " conditioner networks, got " + std::to_string(block_weights.size()));
    flow.weights = block_weights;
    for (std::size_t b = 0; b < flow.blocks.size(); ++b) {
        const auto& spec = flow.blocks[b].conditioner;
        std::vector<Eigen::Index> dims{spec.input_dim};
        for (int h : spec.hidden_widths) dims.push_back(h);
        dims.push_back(spec.output_dim);
        const auto& w = flow.weights[b];
        if (w.w.size() + 1 != dims.size())
            throw FormatError("flow: conditioner layer count mismatch in block " + std::to_string(b));
        for (std::size_t l = 0; l + 1 < dims.size(); ++l)
            if (w.w[l].rows() != dims[l + 1] || w.w[l].cols() != dims[l])
                throw FormatError("flow: conditioner weight shape mismatch in block " +
                                  std::to_string(b));
    }
    flow.validate();
    return flow;
}

}  // namespace mse
