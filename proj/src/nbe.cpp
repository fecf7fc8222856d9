#include "mse/nbe.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace mse {

using nlohmann::json;

double loss_l1(const Eigen::VectorXd& theta_true, const Eigen::VectorXd& theta_hat) {
    if (theta_true.size() != theta_hat.size())
        throw std::invalid_argument("loss_l1: dimension mismatch");
    return (theta_hat - theta_true).cwiseAbs().mean();
}

double loss_quantile(double tau, const Eigen::VectorXd& theta_true,
                     const Eigen::VectorXd& theta_hat) {
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("loss_quantile: tau outside (0,1)");
    if (theta_true.size() != theta_hat.size())
        throw std::invalid_argument("loss_quantile: dimension mismatch");
    double s = 0.0;
    for (Eigen::Index i = 0; i < theta_true.size(); ++i) {
        const double d = theta_hat(i) - theta_true(i);
        s += d * ((d > 0.0 ? 1.0 : 0.0) - tau);
    }
    return s / static_cast<double>(theta_true.size());
}

double nbe_batch_risk(double tau, const Eigen::MatrixXd& truth, const Eigen::MatrixXd& pred,
                      Eigen::MatrixXd* grad) {
    const double scale = 1.0 / static_cast<double>(truth.size());
    const Eigen::ArrayXXd d = (pred - truth).array();
    double risk;
    if (tau < 0.0) {
        risk = d.abs().sum() * scale;
        if (grad) *grad = (d.sign() * scale).matrix();
    } else {
        const Eigen::ArrayXXd ind = (d > 0.0).cast<double>();
        risk = (d * (ind - tau)).sum() * scale;
        if (grad) *grad = ((ind - tau) * scale).matrix();
    }
    return risk;
}

namespace {

DenseNetworkSpec make_nbe_spec(int k, const std::vector<int>& hidden, const PriorSpec& prior) {
    DenseNetworkSpec spec;
    spec.input_dim = 2 * ((1 << k) - 1);
    spec.hidden_widths = hidden;
    spec.output_dim = param_dim(k);
    spec.outputs.assign(static_cast<std::size_t>(spec.output_dim), OutputActivation{});
    spec.outputs[0] = {OutputKind::shifted_sigmoid, prior.alpha_lo, prior.alpha_hi};
    spec.validate();
    return spec;
}

}  // namespace

NbeTrainResult train_nbe(const TrainConfig& config, const PriorSpec& prior, int k,
                         const std::optional<CensorInterval>& interval,
                         const std::vector<int>& hidden, const std::vector<double>& taus) {
    config.validate();
    if (taus.empty()) throw std::invalid_argument("train_nbe: need at least one tau");
    std::vector<double> sorted_taus = taus;
    std::sort(sorted_taus.begin(), sorted_taus.end());
    for (double t : sorted_taus)
        if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("train_nbe: tau outside (0,1)");

    const auto t_start = std::chrono::steady_clock::now();
    const std::size_t n_nets = sorted_taus.size();
    const DenseNetworkSpec spec = make_nbe_spec(k, hidden, prior);

    NbeTrainResult result;
    result.model.k = k;
    result.model.interval = interval;
    result.model.prior = prior;
    result.model.taus = sorted_taus;
    result.model.spec = spec;
    result.logs.assign(n_nets, TrainingLog{});

    std::vector<NetworkWeights> weights, best;
    std::vector<AdamState> opt;
    for (std::size_t i = 0; i < n_nets; ++i) {
        Rng init_rng(derive_seed(config.seed, seed_stream::init + i));
        weights.push_back(init_weights(spec, InitScheme::he_uniform, init_rng));
        best.push_back(weights.back());
        opt.push_back(AdamState::for_weights(weights.back()));
    }

    // tau = 0.5 trains under plain absolute error; the tails use pinball loss
    std::vector<double> loss_tau(n_nets);
    for (std::size_t i = 0; i < n_nets; ++i)
        loss_tau[i] = (sorted_taus[i] == 0.5) ? -1.0 : sorted_taus[i];

    std::int64_t redraws = 0;
    Rng val_rng(derive_seed(config.seed, seed_stream::validation));
    const SimBatch val =
        simulate_batch(prior, k, interval, config.validation_size, val_rng, &redraws);

    auto validation_risk = [&](std::size_t i, const NetworkWeights& w) {
        const Eigen::MatrixXd pred = forward(spec, w, val.input);
        return nbe_batch_risk(loss_tau[i], val.theta, pred, nullptr);
    };

    std::vector<int> patience(n_nets, 0);
    std::vector<bool> active(n_nets, true);
    for (std::size_t i = 0; i < n_nets; ++i) {
        result.logs[i].initial_validation_risk = validation_risk(i, weights[i]);
        result.logs[i].best_validation_risk = result.logs[i].initial_validation_risk;
        result.logs[i].best_epoch = 0;
    }

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        if (std::none_of(active.begin(), active.end(), [](bool a) { return a; })) break;

        Rng epoch_rng(derive_seed(config.seed, seed_stream::epoch + static_cast<std::uint64_t>(epoch)));
        const SimBatch sims =
            simulate_batch(prior, k, interval, config.sims_per_epoch, epoch_rng, &redraws);

        std::vector<int> order(static_cast<std::size_t>(config.sims_per_epoch));
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(
            derive_seed(config.seed, seed_stream::shuffle + static_cast<std::uint64_t>(epoch)));
        for (std::size_t j = order.size(); j > 1; --j)
            std::swap(order[j - 1], order[shuffle_rng.raw() % j]);

        std::vector<double> train_risk(n_nets, 0.0);
        for (int lo = 0; lo < config.sims_per_epoch; lo += config.batch_size) {
            const int bs = std::min(config.batch_size, config.sims_per_epoch - lo);
            Eigen::MatrixXd x(spec.input_dim, bs), y(spec.output_dim, bs);
            for (int j = 0; j < bs; ++j) {
                x.col(j) = sims.input.col(order[static_cast<std::size_t>(lo + j)]);
                y.col(j) = sims.theta.col(order[static_cast<std::size_t>(lo + j)]);
            }
            for (std::size_t i = 0; i < n_nets; ++i) {
                if (!active[i]) continue;
                ForwardCache cache;
                const Eigen::MatrixXd pred = forward(spec, weights[i], x, &cache);
                Eigen::MatrixXd upstream;
                train_risk[i] += bs * nbe_batch_risk(loss_tau[i], y, pred, &upstream);
                const NetworkWeights grads = backward(spec, weights[i], cache, upstream);
                adam_step(opt[i], weights[i], grads, config.adam);
            }
        }

        for (std::size_t i = 0; i < n_nets; ++i) {
            if (!active[i]) continue;
            const double val_risk = validation_risk(i, weights[i]);
            result.logs[i].epochs.push_back(
                {epoch, train_risk[i] / config.sims_per_epoch, val_risk});
            if (val_risk < result.logs[i].best_validation_risk) {
                result.logs[i].best_validation_risk = val_risk;
                result.logs[i].best_epoch = epoch;
                best[i] = weights[i];
                patience[i] = 0;
            } else if (++patience[i] >= config.patience) {
                active[i] = false;
            }
        }
    }

    result.model.weights = std::move(best);
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    for (auto& log : result.logs) {
        log.overflow_redraws = redraws;  // simulation stream is shared by all nets
        log.seconds = seconds;
    }
    return result;
}

void check_data_compatibility(int model_k, const std::optional<CensorInterval>& model_interval,
                              const Dataset& data, const std::string& who) {
    auto show = [](const std::optional<CensorInterval>& iv) {
        return iv ? "[" + std::to_string(iv->lo) + "," + std::to_string(iv->hi) + "]"
                  : std::string("none");
    };
    if (data.k != model_k)
        throw std::invalid_argument(who + " built for k=" + std::to_string(model_k) +
                                    " but dataset has k=" + std::to_string(data.k));
    if (data.interval != model_interval)
        throw std::invalid_argument(who + " built for censor interval " + show(model_interval) +
                                    " but dataset has " + show(data.interval));
}

NbeEstimate estimate(const NbeModel& model, const Dataset& data) {
    check_data_compatibility(model.k, model.interval, data, "estimator");
    const Eigen::VectorXd input = network_input(data);
    const int p = model.spec.output_dim;
    const auto n_nets = static_cast<Eigen::Index>(model.weights.size());

    NbeEstimate est;
    est.raw.resize(p, n_nets);
    for (Eigen::Index i = 0; i < n_nets; ++i)
        est.raw.col(i) = forward(model.spec, model.weights[static_cast<std::size_t>(i)], input);

    Eigen::MatrixXd sorted = est.raw;
    for (int r = 0; r < p; ++r) {
        std::vector<double> row(static_cast<std::size_t>(n_nets));
        for (Eigen::Index c = 0; c < n_nets; ++c) row[static_cast<std::size_t>(c)] = sorted(r, c);
        std::sort(row.begin(), row.end());
        for (Eigen::Index c = 0; c < n_nets; ++c) sorted(r, c) = row[static_cast<std::size_t>(c)];
    }
    est.lo = ModelParams::from_vector(sorted.col(0), model.k);
    est.median = ModelParams::from_vector(sorted.col(n_nets / 2), model.k);
    est.hi = ModelParams::from_vector(sorted.col(n_nets - 1), model.k);
    est.n0_lo = hidden_population(est.lo);
    est.n0_median = hidden_population(est.median);
    est.n0_hi = hidden_population(est.hi);
    return est;
}

void save_nbe(const std::string& path, const NbeModel& model, const json& extra_metadata) {
    json metadata = extra_metadata;
    metadata["type"] = "nbe";
    metadata["k"] = model.k;
    if (model.interval) {
        metadata["censor_interval"] = {model.interval->lo, model.interval->hi};
    } else {
        metadata["censor_interval"] = nullptr;
    }
    metadata["prior"] = {{"alpha_lo", model.prior.alpha_lo},
                         {"alpha_hi", model.prior.alpha_hi},
                         {"effect_sd", model.prior.effect_sd}};
    metadata["taus"] = model.taus;

    std::vector<NamedNetwork> nets;
    for (std::size_t i = 0; i < model.weights.size(); ++i)
        nets.push_back({"tau" + std::to_string(i), model.spec, model.weights[i]});
    save_checkpoint(path, nets, metadata);
}

NbeModel load_nbe(const std::string& path, json* metadata) {
    const Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.metadata.value("type", "") != "nbe")
        throw FormatError("checkpoint " + path + " is not an NBE bundle (type='" +
                          ckpt.metadata.value("type", "") + "')");
    NbeModel model;
    model.k = ckpt.metadata.at("k").get<int>();
    const auto& ji = ckpt.metadata.at("censor_interval");
    if (!ji.is_null()) model.interval = CensorInterval{ji[0].get<std::int64_t>(), ji[1].get<std::int64_t>()};
    const auto& jp = ckpt.metadata.at("prior");
    model.prior = {jp.at("alpha_lo").get<double>(), jp.at("alpha_hi").get<double>(),
                   jp.at("effect_sd").get<double>()};
    model.taus = ckpt.metadata.at("taus").get<std::vector<double>>();
    for (std::size_t i = 0; i < model.taus.size(); ++i) {
        const auto& net = ckpt.network("tau" + std::to_string(i));
        if (i == 0) model.spec = net.spec;
        model.weights.push_back(net.weights);
    }
    if (metadata) *metadata = ckpt.metadata;
    return model;
}

}  // namespace mse
