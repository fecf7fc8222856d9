#include "mse/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mse/io.hpp"

namespace mse {

using nlohmann::json;

void DenseNetworkSpec::validate() const {
    if (input_dim < 1 || output_dim < 1) throw std::invalid_argument("network spec: dims must be >= 1");
    for (int w : hidden_widths)
        if (w < 1) throw std::invalid_argument("network spec: hidden width must be >= 1");
    if (outputs.size() != 1 && outputs.size() != static_cast<std::size_t>(output_dim))
        throw std::invalid_argument("network spec: outputs must have size 1 or output_dim");
    for (const auto& act : outputs)
        if (act.kind == OutputKind::shifted_sigmoid && !(act.lo < act.hi))
            throw std::invalid_argument("network spec: shifted_sigmoid needs lo < hi");
}

NetworkWeights NetworkWeights::zeros_like(const NetworkWeights& other) {
    NetworkWeights z;
    z.w.reserve(other.w.size());
    z.b.reserve(other.b.size());
    for (const auto& m : other.w) z.w.push_back(Eigen::MatrixXd::Zero(m.rows(), m.cols()));
    for (const auto& v : other.b) z.b.push_back(Eigen::VectorXd::Zero(v.size()));
    return z;
}

std::size_t NetworkWeights::param_count() const {
    std::size_t n = 0;
    for (const auto& m : w) n += static_cast<std::size_t>(m.size());
    for (const auto& v : b) n += static_cast<std::size_t>(v.size());
    return n;
}

double NetworkWeights::squared_norm() const {
    double s = 0.0;
    for (const auto& m : w) s += m.squaredNorm();
    for (const auto& v : b) s += v.squaredNorm();
    return s;
}

bool NetworkWeights::all_finite() const {
    for (const auto& m : w)
        if (!m.allFinite()) return false;
    for (const auto& v : b)
        if (!v.allFinite()) return false;
    return true;
}

void NetworkWeights::add_scaled(const NetworkWeights& other, double factor) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += factor * other.w[i];
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += factor * other.b[i];
}

void NetworkWeights::scale(double factor) {
    for (auto& m : w) m *= factor;
    for (auto& v : b) v *= factor;
}

NetworkWeights init_weights(const DenseNetworkSpec& spec, InitScheme scheme, Rng& rng) {
    spec.validate();
    std::vector<int> dims;
    dims.push_back(spec.input_dim);
    for (int h : spec.hidden_widths) dims.push_back(h);
    dims.push_back(spec.output_dim);

    NetworkWeights weights;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const int fan_in = dims[l];
        const int fan_out = dims[l + 1];
        Eigen::MatrixXd w(fan_out, fan_in);
        if (scheme == InitScheme::zeros) {
            w.setZero();
        } else {
            const double bound = std::sqrt(6.0 / fan_in);
            for (int r = 0; r < fan_out; ++r)
                for (int c = 0; c < fan_in; ++c) w(r, c) = rng.uniform(-bound, bound);
        }
        weights.w.push_back(std::move(w));
        weights.b.push_back(Eigen::VectorXd::Zero(fan_out));
    }
    return weights;
}

namespace {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void apply_output_activation(const DenseNetworkSpec& spec, const Eigen::MatrixXd& pre,
                             Eigen::MatrixXd& out) {
    out.resize(pre.rows(), pre.cols());
    for (int r = 0; r < pre.rows(); ++r) {
        const auto& act = spec.output_at(r);
        if (act.kind == OutputKind::identity) {
            out.row(r) = pre.row(r);
        } else {
            // saturation can round onto an endpoint; keep outputs strictly
            // inside (lo, hi)
            const double lo = std::nextafter(act.lo, act.hi);
            const double hi = std::nextafter(act.hi, act.lo);
            for (int c = 0; c < pre.cols(); ++c)
                out(r, c) = std::clamp(act.lo + (act.hi - act.lo) * sigmoid(pre(r, c)), lo, hi);
        }
    }
}

}  // namespace

Eigen::MatrixXd forward(const DenseNetworkSpec& spec, const NetworkWeights& weights,
                        const Eigen::MatrixXd& input, ForwardCache* cache) {
    if (input.rows() != spec.input_dim) throw std::invalid_argument("forward: input dimension mismatch");
    if (!input.allFinite()) throw std::invalid_argument("forward: non-finite input");
    const int layers = spec.num_layers();
    if (static_cast<int>(weights.w.size()) != layers)
        throw std::invalid_argument("forward: weights/spec layer count mismatch");

    if (cache) {
        cache->act.assign(1, input);
        cache->pre.clear();
    }
    Eigen::MatrixXd h = input;
    for (int l = 0; l < layers; ++l) {
        Eigen::MatrixXd z = weights.w[static_cast<std::size_t>(l)] * h;
        z.colwise() += weights.b[static_cast<std::size_t>(l)];
        if (cache) cache->pre.push_back(z);
        if (l + 1 < layers) {
            h = z.cwiseMax(0.0);
        } else {
            apply_output_activation(spec, z, h);
        }
        if (cache) cache->act.push_back(h);
    }
    return h;
}

Eigen::VectorXd forward(const DenseNetworkSpec& spec, const NetworkWeights& weights,
                        const Eigen::VectorXd& input) {
    return forward(spec, weights, Eigen::MatrixXd(input), nullptr).col(0);
}

NetworkWeights backward(const DenseNetworkSpec& spec, const NetworkWeights& weights,
                        const ForwardCache& cache, const Eigen::MatrixXd& upstream,
                        Eigen::MatrixXd* input_grad) {
    const int layers = spec.num_layers();
    NetworkWeights grads = NetworkWeights::zeros_like(weights);

    // output layer: chain through the per-output activation
    Eigen::MatrixXd delta(upstream.rows(), upstream.cols());
    const Eigen::MatrixXd& pre_out = cache.pre.back();
    for (int r = 0; r < upstream.rows(); ++r) {
        const auto& act = spec.output_at(r);
        if (act.kind == OutputKind::identity) {
            delta.row(r) = upstream.row(r);
        } else {
            for (int c = 0; c < upstream.cols(); ++c) {
                const double s = sigmoid(pre_out(r, c));
                delta(r, c) = upstream(r, c) * (act.hi - act.lo) * s * (1.0 - s);
            }
        }
    }

    for (int l = layers - 1; l >= 0; --l) {
        const auto ul = static_cast<std::size_t>(l);
        grads.w[ul] = delta * cache.act[ul].transpose();
        grads.b[ul] = delta.rowwise().sum();
        if (l > 0) {
            Eigen::MatrixXd prev = weights.w[ul].transpose() * delta;
            delta = prev.array() * (cache.pre[ul - 1].array() > 0.0).cast<double>();
        } else if (input_grad) {
            *input_grad = weights.w[ul].transpose() * delta;
        }
    }
    return grads;
}

AdamState AdamState::for_weights(const NetworkWeights& weights) {
    AdamState state;
    state.m = NetworkWeights::zeros_like(weights);
    state.v = NetworkWeights::zeros_like(weights);
    return state;
}

void adam_step(AdamState& state, NetworkWeights& weights, const NetworkWeights& grads,
               const AdamConfig& config) {
    state.t += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
    auto update = [&](Eigen::Ref<Eigen::MatrixXd> w, Eigen::Ref<Eigen::MatrixXd> m,
                      Eigen::Ref<Eigen::MatrixXd> v, const Eigen::MatrixXd& g) {
        m = config.beta1 * m + (1.0 - config.beta1) * g;
        v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
        const Eigen::ArrayXXd m_hat = m.array() / bc1;
        const Eigen::ArrayXXd v_hat = v.array() / bc2;
        w -= (config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon)).matrix();
    };
    for (std::size_t i = 0; i < weights.w.size(); ++i)
        update(weights.w[i], state.m.w[i], state.v.w[i], grads.w[i]);
    for (std::size_t i = 0; i < weights.b.size(); ++i) {
        Eigen::MatrixXd g = grads.b[i];
        Eigen::MatrixXd w = weights.b[i], m = state.m.b[i], v = state.v.b[i];
        update(w, m, v, g);
        weights.b[i] = w.col(0);
        state.m.b[i] = m.col(0);
        state.v.b[i] = v.col(0);
    }
}

// --- checkpoint serialization ---

namespace {

constexpr char kMagic[5] = {'M', 'S', 'E', 'N', 'N'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw FormatError("checkpoint: truncated file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
};

}  // namespace

nlohmann::json spec_to_json(const DenseNetworkSpec& spec) {
    json outputs = json::array();
    for (const auto& act : spec.outputs) {
        if (act.kind == OutputKind::identity) {
            outputs.push_back({{"act", "identity"}});
        } else {
            outputs.push_back({{"act", "shifted_sigmoid"}, {"lo", act.lo}, {"hi", act.hi}});
        }
    }
    return {{"input_dim", spec.input_dim},
            {"hidden", spec.hidden_widths},
            {"output_dim", spec.output_dim},
            {"outputs", outputs}};
}

DenseNetworkSpec spec_from_json(const json& j) {
    DenseNetworkSpec spec;
    spec.input_dim = j.at("input_dim").get<int>();
    spec.hidden_widths = j.at("hidden").get<std::vector<int>>();
    spec.output_dim = j.at("output_dim").get<int>();
    for (const auto& o : j.at("outputs")) {
        OutputActivation act;
        const std::string kind = o.at("act").get<std::string>();
        if (kind == "identity") {
            act.kind = OutputKind::identity;
        } else if (kind == "shifted_sigmoid") {
            act.kind = OutputKind::shifted_sigmoid;
            act.lo = o.at("lo").get<double>();
            act.hi = o.at("hi").get<double>();
        } else {
            throw FormatError("checkpoint: unknown activation '" + kind + "'");
        }
        spec.outputs.push_back(act);
    }
    spec.validate();
    return spec;
}

const NamedNetwork& Checkpoint::network(const std::string& name) const {
    for (const auto& net : networks)
        if (net.name == name) return net;
    throw FormatError("checkpoint: no network named '" + name + "'");
}

void save_checkpoint(const std::string& path, const std::vector<NamedNetwork>& networks,
                     const nlohmann::json& metadata) {
    json header;
    header["metadata"] = metadata;
    header["networks"] = json::array();
    for (const auto& net : networks) {
        json layers = json::array();
        for (std::size_t l = 0; l < net.weights.w.size(); ++l)
            layers.push_back({{"rows", net.weights.w[l].rows()}, {"cols", net.weights.w[l].cols()}});
        header["networks"].push_back({{"name", net.name}, {"spec", spec_to_json(net.spec)}, {"layers", layers}});
    }
    const std::string header_str = header.dump();

    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put_u32(out, kVersion);
    put_u64(out, header_str.size());
    out.append(header_str);
    for (const auto& net : networks) {
        if (!net.weights.all_finite()) throw std::invalid_argument("save_checkpoint: non-finite weights");
        for (std::size_t l = 0; l < net.weights.w.size(); ++l) {
            const auto& w = net.weights.w[l];
            for (Eigen::Index r = 0; r < w.rows(); ++r)
                for (Eigen::Index c = 0; c < w.cols(); ++c) put_f64(out, w(r, c));
            const auto& b = net.weights.b[l];
            for (Eigen::Index i = 0; i < b.size(); ++i) put_f64(out, b(i));
        }
    }
    atomic_write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    Reader r{buf};
    r.need(sizeof(kMagic));
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw FormatError("checkpoint: bad magic");
    r.pos = sizeof(kMagic);
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint64_t header_len = r.u64();
    r.need(header_len);
    json header;
    try {
        header = json::parse(buf.substr(r.pos, header_len));
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: corrupt header: ") + e.what());
    }
    r.pos += header_len;

    Checkpoint ckpt;
    ckpt.metadata = header.value("metadata", json::object());
    for (const auto& jnet : header.at("networks")) {
        NamedNetwork net;
        net.name = jnet.at("name").get<std::string>();
        net.spec = spec_from_json(jnet.at("spec"));
        for (const auto& jl : jnet.at("layers")) {
            const auto rows = jl.at("rows").get<Eigen::Index>();
            const auto cols = jl.at("cols").get<Eigen::Index>();
            Eigen::MatrixXd w(rows, cols);
            for (Eigen::Index rr = 0; rr < rows; ++rr)
                for (Eigen::Index cc = 0; cc < cols; ++cc) w(rr, cc) = r.f64();
            Eigen::VectorXd b(rows);
            for (Eigen::Index i = 0; i < rows; ++i) b(i) = r.f64();
            net.weights.w.push_back(std::move(w));
            net.weights.b.push_back(std::move(b));
        }
        if (!net.weights.all_finite()) throw FormatError("checkpoint: non-finite weights");
        // shape consistency against the declared spec
        std::vector<Eigen::Index> dims;
        dims.push_back(net.spec.input_dim);
        for (int h : net.spec.hidden_widths) dims.push_back(h);
        dims.push_back(net.spec.output_dim);
        if (net.weights.w.size() + 1 != dims.size()) throw FormatError("checkpoint: layer count mismatch");
        for (std::size_t l = 0; l + 1 < dims.size(); ++l)
            if (net.weights.w[l].rows() != dims[l + 1] || net.weights.w[l].cols() != dims[l])
                throw FormatError("checkpoint: layer shape mismatch");
        ckpt.networks.push_back(std::move(net));
    }
    if (r.pos != buf.size()) throw FormatError("checkpoint: trailing bytes");
    return ckpt;
}

}  // namespace mse
