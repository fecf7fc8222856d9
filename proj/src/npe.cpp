#include "mse/npe.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "mse/io.hpp"
#include "mse/nbe.hpp"  // check_data_compatibility

namespace mse {

using nlohmann::json;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

DenseNetworkSpec make_encoder_spec(int k, const NpeArch& arch) {
    DenseNetworkSpec spec;
    spec.input_dim = 2 * ((1 << k) - 1);
    spec.hidden_widths = arch.encoder_hidden;
    spec.output_dim = arch.summary_dim;
    spec.outputs = {OutputActivation{}};
    spec.validate();
    return spec;
}

// Prior standardization for the flow's fixed pre-map: uniform alpha has mean
// (lo+hi)/2 and sd (hi-lo)/sqrt(12); effects are centered with sd effect_sd.
void set_prior_standardization(CouplingFlow& flow, const PriorSpec& prior) {
    flow.loc.setZero();
    flow.scale.setOnes();
    flow.loc(0) = 0.5 * (prior.alpha_lo + prior.alpha_hi);
    flow.scale(0) = (prior.alpha_hi - prior.alpha_lo) / std::sqrt(12.0);
    for (Eigen::Index i = 1; i < flow.scale.size(); ++i) flow.scale(i) = prior.effect_sd;
}

}  // namespace

double npe_nll(const NpeModel& model, const Eigen::MatrixXd& theta,
               const Eigen::MatrixXd& input, NetworkWeights* encoder_grads,
               std::vector<NetworkWeights>* flow_grads) {
    const auto n = theta.cols();
    const int p = model.flow.dim;
    const bool want_grads = encoder_grads != nullptr;

    ForwardCache enc_cache;
    const Eigen::MatrixXd s = forward(model.encoder_spec, model.encoder_weights, input,
                                      want_grads ? &enc_cache : nullptr);
    Eigen::MatrixXd z;
    Eigen::VectorXd log_det;
    FlowCache flow_cache;
    flow_forward(model.flow, theta, s, z, log_det, want_grads ? &flow_cache : nullptr);

    const double nll =
        (0.5 * z.colwise().squaredNorm().transpose().array() + 0.5 * p * kLog2Pi -
         log_det.array())
            .mean();
    if (want_grads) {
        const double inv_n = 1.0 / static_cast<double>(n);
        const FlowGrads fg = flow_backward(model.flow, flow_cache, z * inv_n,
                                           Eigen::VectorXd::Constant(n, -inv_n));
        *flow_grads = fg.conditioner;
        *encoder_grads =
            backward(model.encoder_spec, model.encoder_weights, enc_cache, fg.context);
    }
    return nll;
}

Eigen::VectorXd NpeModel::summarize(const Dataset& data) const {
    return forward(encoder_spec, encoder_weights, network_input(data));
}

NpeTrainResult train_npe(const TrainConfig& config, const PriorSpec& prior, int k,
                         const std::optional<CensorInterval>& interval, const NpeArch& arch) {
    config.validate();
    const auto t_start = std::chrono::steady_clock::now();
    const int p = param_dim(k);

    NpeTrainResult result;
    NpeModel& model = result.model;
    model.k = k;
    model.interval = interval;
    model.prior = prior;
    model.encoder_spec = make_encoder_spec(k, arch);
    {
        Rng init_rng(derive_seed(config.seed, seed_stream::init));
        model.encoder_weights = init_weights(model.encoder_spec, InitScheme::he_uniform, init_rng);
        Rng flow_rng(derive_seed(config.seed, seed_stream::init + 1));
        model.flow =
            make_flow(p, arch.summary_dim, arch.num_blocks, arch.conditioner_hidden, flow_rng);
        set_prior_standardization(model.flow, prior);
    }

    TrainingLog& log = result.log;
    Rng val_rng(derive_seed(config.seed, seed_stream::validation));
    const SimBatch val =
        simulate_batch(prior, k, interval, config.validation_size, val_rng, &log.overflow_redraws);

    AdamState enc_opt = AdamState::for_weights(model.encoder_weights);
    std::vector<AdamState> flow_opt;
    for (const auto& w : model.flow.weights) flow_opt.push_back(AdamState::for_weights(w));

    log.initial_validation_risk = npe_nll(model, val.theta, val.input, nullptr, nullptr);
    log.best_validation_risk = log.initial_validation_risk;
    log.best_epoch = 0;
    NetworkWeights best_encoder = model.encoder_weights;
    std::vector<NetworkWeights> best_flow = model.flow.weights;

    int patience = 0;
    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        Rng epoch_rng(derive_seed(config.seed, seed_stream::epoch + static_cast<std::uint64_t>(epoch)));
        const SimBatch sims = simulate_batch(prior, k, interval, config.sims_per_epoch, epoch_rng,
                                             &log.overflow_redraws);

        std::vector<int> order(static_cast<std::size_t>(config.sims_per_epoch));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(
            derive_seed(config.seed, seed_stream::shuffle + static_cast<std::uint64_t>(epoch)));
        for (std::size_t j = order.size(); j > 1; --j)
            std::swap(order[j - 1], order[shuffle_rng.raw() % j]);

        double train_risk = 0.0;
        for (int lo = 0; lo < config.sims_per_epoch; lo += config.batch_size) {
            const int bs = std::min(config.batch_size, config.sims_per_epoch - lo);
            Eigen::MatrixXd x(model.encoder_spec.input_dim, bs), y(p, bs);
            for (int j = 0; j < bs; ++j) {
                x.col(j) = sims.input.col(order[static_cast<std::size_t>(lo + j)]);
                y.col(j) = sims.theta.col(order[static_cast<std::size_t>(lo + j)]);
            }
            NetworkWeights enc_grads;
            std::vector<NetworkWeights> flow_grads;
            train_risk += bs * npe_nll(model, y, x, &enc_grads, &flow_grads);
            adam_step(enc_opt, model.encoder_weights, enc_grads, config.adam);
            for (std::size_t b = 0; b < flow_grads.size(); ++b)
                adam_step(flow_opt[b], model.flow.weights[b], flow_grads[b], config.adam);
        }

        const double val_risk = npe_nll(model, val.theta, val.input, nullptr, nullptr);
        log.epochs.push_back({epoch, train_risk / config.sims_per_epoch, val_risk});
        if (val_risk < log.best_validation_risk) {
            log.best_validation_risk = val_risk;
            log.best_epoch = epoch;
            best_encoder = model.encoder_weights;
            best_flow = model.flow.weights;
            patience = 0;
        } else if (++patience >= config.patience) {
            break;
        }
    }

    model.encoder_weights = std::move(best_encoder);
    model.flow.weights = std::move(best_flow);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return result;
}

double log_q(const NpeModel& model, const ModelParams& theta, const Dataset& data) {
    return log_q_batch(model, theta.flatten(), data)(0);
}

Eigen::VectorXd log_q_batch(const NpeModel& model, const Eigen::MatrixXd& thetas,
                            const Dataset& data) {
    check_data_compatibility(model.k, model.interval, data, "posterior estimator");
    const Eigen::VectorXd s = model.summarize(data);
    const Eigen::MatrixXd context = s.replicate(1, thetas.cols());
    Eigen::MatrixXd z;
    Eigen::VectorXd log_det;
    flow_forward(model.flow, thetas, context, z, log_det);
    return (-0.5 * z.colwise().squaredNorm().transpose().array() -
            0.5 * model.flow.dim * kLog2Pi + log_det.array())
        .matrix();
}

PosteriorSamples sample_posterior(const NpeModel& model, const Dataset& data, int n_samples,
                                  std::uint64_t seed) {
    if (n_samples < 1) throw std::invalid_argument("sample_posterior: n_samples must be >= 1");
    check_data_compatibility(model.k, model.interval, data, "posterior estimator");

    constexpr int kChunk = 4096;
    constexpr std::int64_t kBudget = 1000000;
    constexpr double kMinAcceptance = 1e-3;

    const int p = model.flow.dim;
    const Eigen::VectorXd s = model.summarize(data);

    PosteriorSamples out;
    out.samples.resize(p, n_samples);
    int accepted = 0;
    std::int64_t proposals = 0;
    for (std::uint64_t chunk = 0; accepted < n_samples; ++chunk) {
        Rng rng(derive_seed(seed, seed_stream::sampling + chunk));
        Eigen::MatrixXd z(p, kChunk);
        for (int c = 0; c < kChunk; ++c)
            for (int r = 0; r < p; ++r) z(r, c) = rng.normal();
        const Eigen::MatrixXd theta = flow_inverse(model.flow, z, s.replicate(1, kChunk));
        // count only proposals actually examined, so the reported rate is the
        // per-proposal acceptance rather than an artifact of the chunk size
        int examined = kChunk;
        for (int c = 0; c < kChunk; ++c) {
            const double alpha = theta(0, c);
            if (!(alpha >= model.prior.alpha_lo && alpha <= model.prior.alpha_hi)) continue;
            if (!theta.col(c).allFinite()) continue;
            out.samples.col(accepted++) = theta.col(c);
            if (accepted == n_samples) {
                examined = c + 1;
                break;
            }
        }
        proposals += examined;
        const double rate =
            static_cast<double>(accepted) / static_cast<double>(proposals);
        if (proposals >= kBudget && rate < kMinAcceptance)
            throw SupportStarvationError(
                "posterior sampling starved: acceptance rate " + std::to_string(rate) + " after " +
                std::to_string(proposals) + " proposals");
    }
    out.proposals = proposals;
    out.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(proposals);
    return out;
}

namespace {

double quantile_of(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double h = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(h);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

}  // namespace

PpcResult posterior_predictive(const NpeModel& model, const Dataset& data, int n_replicates,
                               std::uint64_t seed) {
    if (n_replicates < 1) throw std::invalid_argument("posterior_predictive: need S >= 1");
    const PosteriorSamples post =
        sample_posterior(model, data, n_replicates, derive_seed(seed, 1));

    const int n_cells = data.cells();
    PpcResult out;
    out.acceptance_rate = post.acceptance_rate;
    out.raw_counts.resize(n_cells, n_replicates);
    out.replicates.reserve(static_cast<std::size_t>(n_replicates));

    Rng rng(derive_seed(seed, 2));
    for (int rep = 0; rep < n_replicates; ++rep) {
        const ModelParams theta = ModelParams::from_vector(post.samples.col(rep), model.k);
        const std::vector<std::int64_t> counts = simulate_counts(theta, rng);
        for (int c = 0; c < n_cells; ++c) out.raw_counts(c, rep) = counts[static_cast<std::size_t>(c)];
        out.replicates.push_back(apply_censoring(counts, data.interval, data.k));
    }

    const auto patterns = enumerate_patterns(data.k);
    for (int c = 0; c < n_cells; ++c) {
        PpcCellSummary cell;
        cell.pattern = patterns[static_cast<std::size_t>(c)].to_string();
        cell.censored = data.mask[static_cast<std::size_t>(c)] != 0;
        cell.observed = data.counts[static_cast<std::size_t>(c)];

        std::vector<double> reps(static_cast<std::size_t>(n_replicates));
        for (int rep = 0; rep < n_replicates; ++rep)
            reps[static_cast<std::size_t>(rep)] = static_cast<double>(out.raw_counts(c, rep));
        cell.mean = std::accumulate(reps.begin(), reps.end(), 0.0) / reps.size();
        cell.lo95 = quantile_of(reps, 0.025);
        cell.hi95 = quantile_of(reps, 0.975);

        if (cell.censored) {
            std::int64_t in_band = 0;
            for (int rep = 0; rep < n_replicates; ++rep) {
                const std::int64_t n = out.raw_counts(c, rep);
                if (n >= data.interval->lo && n <= data.interval->hi) ++in_band;
            }
            cell.in_band_fraction = static_cast<double>(in_band) / n_replicates;
        } else {
            cell.observed_inside = cell.observed >= cell.lo95 && cell.observed <= cell.hi95;
        }
        out.cells.push_back(std::move(cell));
    }
    return out;
}

void save_npe(const std::string& path, const NpeModel& model, const json& extra_metadata) {
    json metadata = extra_metadata;
    metadata["type"] = "npe";
    metadata["k"] = model.k;
    if (model.interval) {
        metadata["censor_interval"] = {model.interval->lo, model.interval->hi};
    } else {
        metadata["censor_interval"] = nullptr;
    }
    metadata["prior"] = {{"alpha_lo", model.prior.alpha_lo},
                         {"alpha_hi", model.prior.alpha_hi},
                         {"effect_sd", model.prior.effect_sd}};
    metadata["flow"] = flow_structure_to_json(model.flow);

    std::vector<NamedNetwork> nets;
    nets.push_back({"encoder", model.encoder_spec, model.encoder_weights});
    for (std::size_t b = 0; b < model.flow.weights.size(); ++b)
        nets.push_back({"block" + std::to_string(b), model.flow.blocks[b].conditioner,
                        model.flow.weights[b]});
    save_checkpoint(path, nets, metadata);
}

NpeModel load_npe(const std::string& path, json* metadata) {
    const Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.metadata.value("type", "") != "npe")
        throw FormatError("checkpoint " + path + " is not an NPE bundle (type='" +
                          ckpt.metadata.value("type", "") + "')");
    NpeModel model;
    model.k = ckpt.metadata.at("k").get<int>();
    const auto& ji = ckpt.metadata.at("censor_interval");
    if (!ji.is_null()) model.interval = CensorInterval{ji[0].get<std::int64_t>(), ji[1].get<std::int64_t>()};
    const auto& jp = ckpt.metadata.at("prior");
    model.prior = {jp.at("alpha_lo").get<double>(), jp.at("alpha_hi").get<double>(),
                   jp.at("effect_sd").get<double>()};

    const auto& enc = ckpt.network("encoder");
    model.encoder_spec = enc.spec;
    model.encoder_weights = enc.weights;

    const json& jf = ckpt.metadata.at("flow");
    std::vector<NetworkWeights> block_weights;
    for (std::size_t b = 0; b < jf.at("blocks").size(); ++b)
        block_weights.push_back(ckpt.network("block" + std::to_string(b)).weights);
    model.flow = flow_from_structure(jf, block_weights);
    if (metadata) *metadata = ckpt.metadata;
    return model;
}

void save_samples_csv(const std::string& path, const Eigen::MatrixXd& samples, int k) {
    CsvWriter csv;
    csv.header = {"alpha"};
    for (int i = 1; i <= k; ++i) csv.header.push_back("beta_" + std::to_string(i));
    for (int a = 1; a <= k; ++a)
        for (int b = a + 1; b <= k; ++b)
            csv.header.push_back("gamma_" + std::to_string(a) + "_" + std::to_string(b));
    csv.header.push_back("n0");
    if (samples.rows() != param_dim(k))
        throw std::invalid_argument("save_samples_csv: sample dimension does not match k");
    for (Eigen::Index c = 0; c < samples.cols(); ++c) {
        std::vector<std::string> row;
        for (Eigen::Index r = 0; r < samples.rows(); ++r)
            row.push_back(format_double(samples(r, c)));
        row.push_back(format_double(std::exp(samples(0, c))));
        csv.add_row(std::move(row));
    }
    csv.save(path);
}

}  // namespace mse
