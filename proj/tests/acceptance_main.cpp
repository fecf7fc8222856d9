// Acceptance gate: one PASS/FAIL line per criterion, with the measured
// quantities and the pinned tolerance printed inline. Failures do not stop
// the remaining criteria; the exit status is the number of failures.
//
// Heavy shared state: criterion 5 trains the K=3 estimators used again by
// criteria 7 (NBE latency) and 9 (posterior predictive checks).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mse/classical.hpp"
#include "mse/eval.hpp"
#include "mse/flow.hpp"
#include "mse/model.hpp"
#include "mse/nbe.hpp"
#include "mse/nn.hpp"
#include "mse/npe.hpp"
#include "mse/rng.hpp"
#include "mse/training.hpp"

using namespace mse;

namespace {

double now_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string fmt(double v) {
    std::ostringstream out;
    out.precision(4);
    out << v;
    return out.str();
}

void report(int id, const std::string& label, bool pass, const std::string& detail) {
    std::printf("CRITERION %d (%s): %s  [%s]\n", id, label.c_str(), pass ? "PASS" : "FAIL",
                detail.c_str());
    std::fflush(stdout);
}

void progress(const std::string& msg) {
    std::fprintf(stderr, "... %s\n", msg.c_str());
    std::fflush(stderr);
}

// ---------------------------------------------------------------------------
// 1. Censored likelihood against a long-double brute-force oracle.

bool criterion1(std::string& detail) {
    constexpr double kTol = 1e-10;
    constexpr double kBudgetSeconds = 10.0;
    const double t0 = now_seconds();

    Rng rng(914001);
    double worst = 0.0;
    for (int c = 0; c < 1000; ++c) {
        const int k = 2 + static_cast<int>(rng.raw() % 3);
        ModelParams theta = ModelParams::zeros(k);
        theta.alpha = rng.uniform(0.0, 3.5);
        for (Eigen::Index i = 0; i < theta.beta.size(); ++i)
            theta.beta(i) = rng.uniform(-0.4, 0.4);
        for (Eigen::Index i = 0; i < theta.gamma.size(); ++i)
            theta.gamma(i) = rng.uniform(-0.4, 0.4);

        const std::vector<std::int64_t> counts = simulate_counts(theta, rng);
        const auto a = static_cast<std::int64_t>(rng.raw() % 21);
        const auto b = a + static_cast<std::int64_t>(rng.raw() % static_cast<std::uint64_t>(51 - a));
        const Dataset data = apply_censoring(counts, CensorInterval{a, b}, k);

        const double impl = log_likelihood(data, theta);

        const auto patterns = enumerate_patterns(k);
        long double oracle = 0.0L;
        for (std::size_t i = 0; i < patterns.size(); ++i) {
            long double lr = static_cast<long double>(theta.alpha);
            for (int list = 1; list <= k; ++list)
                if (patterns[i].contains(list)) lr += static_cast<long double>(theta.beta(list - 1));
            for (int l1 = 1; l1 <= k; ++l1)
                for (int l2 = l1 + 1; l2 <= k; ++l2)
                    if (patterns[i].contains(l1) && patterns[i].contains(l2))
                        lr += static_cast<long double>(theta.gamma(pair_index(l1, l2, k)));
            const long double lam = expl(lr);
            const auto term = [&](std::int64_t n) {
                return static_cast<long double>(n) * logl(lam) - lam -
                       lgammal(static_cast<long double>(n) + 1.0L);
            };
            if (data.mask[i]) {
                long double peak = term(a);
                for (std::int64_t n = a + 1; n <= b; ++n) peak = std::max(peak, term(n));
                long double sum = 0.0L;
                for (std::int64_t n = a; n <= b; ++n) sum += expl(term(n) - peak);
                oracle += peak + logl(sum);
            } else {
                oracle += term(counts[i]);
            }
        }
        worst = std::max(worst, std::abs(impl - static_cast<double>(oracle)));
    }

    const double elapsed = now_seconds() - t0;
    detail = "max |logL - oracle| " + fmt(worst) + " (tol 1e-10), " + fmt(elapsed) +
             "s (limit 10s)";
    return worst <= kTol && elapsed < kBudgetSeconds;
}

// ---------------------------------------------------------------------------
// 2. Training-loss gradients against central finite differences.

// Margin guards: finite-difference steps must not cross a ReLU or pinball
// kink, and the flow's log-scale clamp must be inactive.
bool relu_margin_ok(const ForwardCache& cache, int hidden_layers, double margin) {
    for (int l = 0; l < hidden_layers; ++l)
        if (cache.pre[static_cast<std::size_t>(l)].array().abs().minCoeff() < margin) return false;
    return true;
}

double nbe_grad_case(Rng& rng, int which) {
    const int k = 2 + static_cast<int>(rng.raw() % 2);
    const int n = 2 + static_cast<int>(rng.raw() % 3);
    const int p = param_dim(k);
    const double tau = std::vector<double>{-1.0, 0.025, 0.5, 0.975}[static_cast<std::size_t>(which % 4)];

    DenseNetworkSpec spec;
    spec.input_dim = 2 * ((1 << k) - 1);
    spec.hidden_widths = (which % 2 == 0) ? std::vector<int>{8} : std::vector<int>{6, 5};
    spec.output_dim = p;
    spec.outputs.assign(static_cast<std::size_t>(p), OutputActivation{});
    spec.outputs[0] = {OutputKind::shifted_sigmoid, 1.0, 10.0};
    spec.validate();
    NetworkWeights weights = init_weights(spec, InitScheme::he_uniform, rng);

    Eigen::MatrixXd x, y, pred;
    ForwardCache cache;
    for (int attempt = 0;; ++attempt) {
        if (attempt > 100) throw std::runtime_error("no kink-free NBE configuration found");
        x = Eigen::MatrixXd::NullaryExpr(spec.input_dim, n, [&] { return rng.uniform(-1.0, 3.0); });
        y = Eigen::MatrixXd::NullaryExpr(p, n, [&] { return rng.normal(0.0, 2.0); });
        y.row(0) = Eigen::RowVectorXd::NullaryExpr(n, [&] { return rng.uniform(2.0, 9.0); });
        cache = ForwardCache{};
        pred = forward(spec, weights, x, &cache);
        if (!relu_margin_ok(cache, static_cast<int>(spec.hidden_widths.size()), 1e-3)) continue;
        if ((pred - y).array().abs().minCoeff() < 1e-3) continue;  // loss kink
        break;
    }

    Eigen::MatrixXd upstream;
    nbe_batch_risk(tau, y, pred, &upstream);
    const NetworkWeights grads = backward(spec, weights, cache, upstream);

    const double h = 1e-6;
    double max_rel = 0.0;
    const auto risk_at = [&](const NetworkWeights& w) {
        return nbe_batch_risk(tau, y, forward(spec, w, x), nullptr);
    };
    NetworkWeights probe = weights;
    for (std::size_t l = 0; l < weights.w.size(); ++l) {
        for (Eigen::Index i = 0; i < weights.w[l].size(); ++i) {
            probe.w[l](i) = weights.w[l](i) + h;
            const double up = risk_at(probe);
            probe.w[l](i) = weights.w[l](i) - h;
            const double dn = risk_at(probe);
            probe.w[l](i) = weights.w[l](i);
            const double fd = (up - dn) / (2 * h);
            max_rel = std::max(max_rel,
                               std::abs(grads.w[l](i) - fd) / std::max(1.0, std::abs(fd)));
        }
        for (Eigen::Index i = 0; i < weights.b[l].size(); ++i) {
            probe.b[l](i) = weights.b[l](i) + h;
            const double up = risk_at(probe);
            probe.b[l](i) = weights.b[l](i) - h;
            const double dn = risk_at(probe);
            probe.b[l](i) = weights.b[l](i);
            const double fd = (up - dn) / (2 * h);
            max_rel = std::max(max_rel,
                               std::abs(grads.b[l](i) - fd) / std::max(1.0, std::abs(fd)));
        }
    }
    return max_rel;
}

double npe_grad_case(Rng& rng, int which) {
    const int k = 2 + (which % 2);
    const int p = param_dim(k);
    const int n = 2 + static_cast<int>(rng.raw() % 2);
    const int summary_dim = 3 + static_cast<int>(rng.raw() % 3);
    const int blocks = 2 + static_cast<int>(rng.raw() % 2);

    NpeModel model;
    Eigen::MatrixXd theta, input;
    // Redraw weights along with the data on each attempt: kinks and raw
    // log-scales near the clamp are mostly weight-induced, so resampling
    // inputs alone cannot escape an unlucky draw.
    for (int attempt = 0;; ++attempt) {
        if (attempt > 100) throw std::runtime_error("no kink-free NPE configuration found");
        model = NpeModel{};
        model.k = k;
        model.encoder_spec.input_dim = 2 * ((1 << k) - 1);
        model.encoder_spec.hidden_widths =
            (which % 2 == 0) ? std::vector<int>{8} : std::vector<int>{10, 6};
        model.encoder_spec.output_dim = summary_dim;
        model.encoder_spec.outputs = {OutputActivation{}};
        model.encoder_spec.validate();
        model.encoder_weights = init_weights(model.encoder_spec, InitScheme::he_uniform, rng);
        model.flow = make_flow(p, summary_dim, blocks,
                               (which % 3 == 0) ? std::vector<int>{6, 4} : std::vector<int>{8}, rng);
        for (auto& bw : model.flow.weights) {  // move off the exact-identity start
            bw.w.back() += 0.15 * Eigen::MatrixXd::NullaryExpr(bw.w.back().rows(),
                                                               bw.w.back().cols(),
                                                               [&] { return rng.normal(); });
            bw.b.back() += 0.15 * Eigen::VectorXd::NullaryExpr(bw.b.back().size(),
                                                               [&] { return rng.normal(); });
        }
        // Keep the standardized coordinates O(1): row 0 carries the abundance
        // scale, so its pre-map must absorb it or the conditioners saturate.
        model.flow.loc = Eigen::VectorXd::NullaryExpr(p, [&] { return rng.normal(); });
        model.flow.scale = Eigen::VectorXd::NullaryExpr(p, [&] { return rng.uniform(0.5, 2.0); });
        model.flow.loc(0) = 5.5;
        model.flow.scale(0) = rng.uniform(2.0, 3.0);

        theta = Eigen::MatrixXd::NullaryExpr(p, n, [&] { return rng.normal(0.0, 2.0); });
        theta.row(0) = Eigen::RowVectorXd::NullaryExpr(n, [&] { return rng.uniform(2.0, 9.0); });
        input = Eigen::MatrixXd::NullaryExpr(model.encoder_spec.input_dim, n,
                                             [&] { return rng.uniform(0.0, 4.0); });

        ForwardCache ec;
        const Eigen::MatrixXd summary = forward(model.encoder_spec, model.encoder_weights, input, &ec);
        if (!relu_margin_ok(ec, static_cast<int>(model.encoder_spec.hidden_widths.size()), 1e-3))
            continue;
        Eigen::MatrixXd z;
        Eigen::VectorXd log_det;
        FlowCache fc;
        flow_forward(model.flow, theta, summary, z, log_det, &fc);
        bool ok = true;
        for (const auto& blk : fc.blocks) {
            const int hidden = static_cast<int>(blk.conditioner.pre.size()) - 1;
            if (!relu_margin_ok(blk.conditioner, hidden, 1e-3)) ok = false;
            if (blk.raw_log_scale.array().abs().maxCoeff() > kLogScaleClamp - 0.5) ok = false;
        }
        if (ok) break;
    }

    NetworkWeights encoder_grads;
    std::vector<NetworkWeights> flow_grads;
    npe_nll(model, theta, input, &encoder_grads, &flow_grads);

    const double h = 1e-5;
    double max_rel = 0.0;
    const auto compare = [&](double analytic, double* slot) {
        const double base = *slot;
        *slot = base + h;
        const double up = npe_nll(model, theta, input);
        *slot = base - h;
        const double dn = npe_nll(model, theta, input);
        *slot = base;
        const double fd = (up - dn) / (2 * h);
        max_rel = std::max(max_rel, std::abs(analytic - fd) / std::max(1.0, std::abs(fd)));
    };
    for (std::size_t l = 0; l < model.encoder_weights.w.size(); ++l) {
        for (Eigen::Index i = 0; i < model.encoder_weights.w[l].size(); ++i)
            compare(encoder_grads.w[l](i), &model.encoder_weights.w[l](i));
        for (Eigen::Index i = 0; i < model.encoder_weights.b[l].size(); ++i)
            compare(encoder_grads.b[l](i), &model.encoder_weights.b[l](i));
    }
    for (std::size_t blk = 0; blk < model.flow.weights.size(); ++blk) {
        for (std::size_t l = 0; l < model.flow.weights[blk].w.size(); ++l) {
            for (Eigen::Index i = 0; i < model.flow.weights[blk].w[l].size(); ++i)
                compare(flow_grads[blk].w[l](i), &model.flow.weights[blk].w[l](i));
            for (Eigen::Index i = 0; i < model.flow.weights[blk].b[l].size(); ++i)
                compare(flow_grads[blk].b[l](i), &model.flow.weights[blk].b[l](i));
        }
    }
    return max_rel;
}

bool criterion2(std::string& detail) {
    constexpr double kTol = 1e-4;
    constexpr double kBudgetSeconds = 120.0;
    const double t0 = now_seconds();

    Rng rng(914002);
    double worst_nbe = 0.0, worst_npe = 0.0;
    for (int c = 0; c < 50; ++c) worst_nbe = std::max(worst_nbe, nbe_grad_case(rng, c));
    for (int c = 0; c < 50; ++c) worst_npe = std::max(worst_npe, npe_grad_case(rng, c));

    const double elapsed = now_seconds() - t0;
    detail = "max rel err: nbe " + fmt(worst_nbe) + ", npe " + fmt(worst_npe) +
             " (tol 1e-4), " + fmt(elapsed) + "s (limit 120s)";
    return worst_nbe < kTol && worst_npe < kTol && elapsed < kBudgetSeconds;
}

// ---------------------------------------------------------------------------
// 3. Flow round-trip exactness and analytic log-determinants.

CouplingFlow random_flow(Rng& rng, int dim, int context_dim, int blocks,
                         const std::vector<int>& hidden) {
    CouplingFlow flow = make_flow(dim, context_dim, blocks, hidden, rng);
    for (auto& bw : flow.weights) {
        bw.w.back() += 0.3 * Eigen::MatrixXd::NullaryExpr(bw.w.back().rows(), bw.w.back().cols(),
                                                          [&] { return rng.normal(); });
        bw.b.back() += 0.2 * Eigen::VectorXd::NullaryExpr(bw.b.back().size(),
                                                          [&] { return rng.normal(); });
    }
    flow.loc = Eigen::VectorXd::NullaryExpr(dim, [&] { return rng.normal(); });
    flow.scale = Eigen::VectorXd::NullaryExpr(dim, [&] { return rng.uniform(0.5, 2.0); });
    return flow;
}

// Round-trip float error grows like exp of the summed log-scales along a
// path; bounding |log-scale| <= 2 keeps legitimate rounding far below the
// 1e-8 exactness assertion without touching the inverse algorithm itself.
void tame_log_scales(CouplingFlow& flow, const Eigen::MatrixXd& x, const Eigen::MatrixXd& ctx) {
    for (;;) {
        Eigen::MatrixXd z;
        Eigen::VectorXd ld;
        FlowCache cache;
        flow_forward(flow, x, ctx, z, ld, &cache);
        double worst = 0.0;
        for (const auto& blk : cache.blocks)
            worst = std::max(worst, blk.raw_log_scale.array().abs().maxCoeff());
        if (worst <= 2.0) return;
        for (auto& bw : flow.weights) {
            bw.w.back() *= 0.7;
            bw.b.back() *= 0.7;
        }
    }
}

bool criterion3(std::string& detail) {
    constexpr double kRoundTripTol = 1e-8;
    constexpr double kLogDetTol = 1e-5;

    Rng rng(914003);
    double worst_rt = 0.0;
    for (int c = 0; c < 1000; ++c) {
        const int dim = 2 + static_cast<int>(rng.raw() % 7);
        const int ctx = 1 + static_cast<int>(rng.raw() % 5);
        const int blocks = 1 + static_cast<int>(rng.raw() % 5);
        CouplingFlow flow = random_flow(rng, dim, ctx, blocks,
                                        (c % 2 == 0) ? std::vector<int>{8}
                                                     : std::vector<int>{6, 4});
        const Eigen::MatrixXd x =
            Eigen::MatrixXd::NullaryExpr(dim, 3, [&] { return rng.normal(0.0, 2.0); });
        const Eigen::MatrixXd ctxm =
            Eigen::MatrixXd::NullaryExpr(ctx, 3, [&] { return rng.normal(); });
        tame_log_scales(flow, x, ctxm);
        Eigen::MatrixXd z;
        Eigen::VectorXd log_det;
        flow_forward(flow, x, ctxm, z, log_det);
        const Eigen::MatrixXd back = flow_inverse(flow, z, ctxm);
        worst_rt = std::max(worst_rt, (back - x).array().abs().maxCoeff());
    }

    double worst_ld = 0.0;
    const double h = 1e-6;
    for (int dim = 2; dim <= 6; ++dim) {
        for (int rep = 0; rep < 8; ++rep) {
            CouplingFlow flow;
            Eigen::VectorXd x, ld;
            Eigen::MatrixXd ctxm, z;
            for (int attempt = 0;; ++attempt) {
                if (attempt > 100) throw std::runtime_error("no kink-free flow case found");
                flow = random_flow(rng, dim, 2, 1 + static_cast<int>(rng.raw() % 4), {8});
                x = Eigen::VectorXd::NullaryExpr(dim, [&] { return rng.normal(0.0, 2.0); });
                ctxm = Eigen::MatrixXd::NullaryExpr(2, 1, [&] { return rng.normal(); });
                FlowCache cache;
                flow_forward(flow, x, ctxm, z, ld, &cache);
                bool ok = true;
                for (const auto& blk : cache.blocks) {
                    const int hidden = static_cast<int>(blk.conditioner.pre.size()) - 1;
                    if (!relu_margin_ok(blk.conditioner, hidden, 1e-3)) ok = false;
                    if (blk.raw_log_scale.array().abs().maxCoeff() > kLogScaleClamp - 0.5)
                        ok = false;
                }
                if (ok) break;
            }
            Eigen::MatrixXd jac(dim, dim);
            for (int j = 0; j < dim; ++j) {
                Eigen::VectorXd xp = x, xm = x;
                xp(j) += h;
                xm(j) -= h;
                Eigen::MatrixXd zp, zm;
                Eigen::VectorXd dummy;
                flow_forward(flow, xp, ctxm, zp, dummy);
                flow_forward(flow, xm, ctxm, zm, dummy);
                jac.col(j) = (zp - zm) / (2 * h);
            }
            const double num = std::log(std::abs(jac.determinant()));
            worst_ld = std::max(worst_ld, std::abs(num - ld(0)) / std::max(1.0, std::abs(ld(0))));
        }
    }

    detail = "max round-trip " + fmt(worst_rt) + " (tol 1e-8); max log-det rel err " +
             fmt(worst_ld) + " (tol 1e-5)";
    return worst_rt < kRoundTripTol && worst_ld < kLogDetTol;
}

// ---------------------------------------------------------------------------
// 4. Saturated MLE interpolates fully observed K=3 counts.

bool criterion4(std::string& detail) {
    constexpr double kTol = 1e-6;
    constexpr double kBudgetSeconds = 30.0;
    const double t0 = now_seconds();

    Rng rng(914004);
    std::vector<std::vector<std::int64_t>> count_sets = {{5, 3, 8, 2, 7, 4, 6}};
    std::vector<std::int64_t> random_counts(7);
    for (auto& c : random_counts) c = 1 + static_cast<std::int64_t>(rng.raw() % 60);
    count_sets.push_back(random_counts);

    const Eigen::MatrixXd design = design_matrix(3);
    double worst = 0.0;
    for (const auto& counts : count_sets) {
        const Dataset data = apply_censoring(counts, std::nullopt, 3);
        const MleResult fit = fit_mle(data);
        const Eigen::VectorXd rates = (design * fit.theta.flatten()).array().exp();
        for (int i = 0; i < 7; ++i)
            worst = std::max(worst, std::abs(rates(i) - static_cast<double>(counts[i])) /
                                        static_cast<double>(counts[i]));
    }

    const double elapsed = now_seconds() - t0;
    detail = "max rate rel err " + fmt(worst) + " (tol 1e-6), " + fmt(elapsed) +
             "s (limit 30s)";
    return worst <= kTol && elapsed < kBudgetSeconds;
}

// ---------------------------------------------------------------------------
// 5. Scaled-down simulation study: coverage, calibration, error.

struct StudyState {
    std::optional<NbeModel> nbe;
    std::optional<NpeModel> npe;
    std::optional<TestSet> tests;
};

bool criterion5(StudyState& state, std::string& detail) {
    constexpr int kSets = 500;
    constexpr int kSamplesPerSet = 2000;
    constexpr double kEcpLo = 0.90, kEcpHi = 0.99;
    constexpr double kCalibrationTol = 0.06;
    constexpr double kApeLimit = 100.0;
    constexpr double kBudgetSeconds = 2700.0;
    const double t0 = now_seconds();

    const PriorSpec prior;
    const CensorInterval cens{0, 10};

    TrainConfig cfg;
    cfg.sims_per_epoch = 5000;
    cfg.validation_size = 1000;
    cfg.max_epochs = 40;  // criterion allows up to 50
    cfg.batch_size = 32;
    cfg.patience = 8;
    cfg.adam.learning_rate = 1e-3;
    cfg.seed = 915005;

    progress("criterion 5: training the three quantile estimators (K=3, censored [0,10])");
    const NbeTrainResult nbe = train_nbe(cfg, prior, 3, cens, {128, 128});

    progress("criterion 5: training the posterior estimator");
    TrainConfig ncfg = cfg;
    ncfg.seed = 915006;
    NpeArch arch;
    arch.encoder_hidden = {128, 128};
    arch.summary_dim = 64;
    arch.num_blocks = 5;
    arch.conditioner_hidden = {64, 64};
    const NpeTrainResult npe = train_npe(ncfg, prior, 3, cens, arch);

    progress("criterion 5: evaluating on 500 test sets");
    const TestSet tests = make_test_set(prior, 3, cens, kSets, 915007);

    const std::vector<double> levels = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95};
    std::vector<int> npe_hits(levels.size(), 0);
    int nbe_hits95 = 0;
    std::vector<double> nbe_apes_sub, npe_apes_sub;
    const double n0_lo = 300.0, n0_hi = 10000.0;

    for (int i = 0; i < kSets; ++i) {
        const Dataset& data = tests.datasets[static_cast<std::size_t>(i)];
        const double alpha_true = tests.thetas[static_cast<std::size_t>(i)].alpha;
        const bool in_subset =
            std::exp(alpha_true) >= n0_lo && std::exp(alpha_true) <= n0_hi;

        const NbeEstimate est = estimate(nbe.model, data);
        if (est.lo.alpha <= alpha_true && alpha_true <= est.hi.alpha) ++nbe_hits95;
        if (in_subset) nbe_apes_sub.push_back(ape(alpha_true, est.median.alpha));

        const PosteriorSamples post = sample_posterior(
            npe.model, data, kSamplesPerSet, derive_seed(915007, 10000 + static_cast<std::uint64_t>(i)));
        std::vector<double> alpha(static_cast<std::size_t>(post.samples.cols()));
        for (Eigen::Index c = 0; c < post.samples.cols(); ++c)
            alpha[static_cast<std::size_t>(c)] = post.samples(0, c);
        for (std::size_t l = 0; l < levels.size(); ++l) {
            const double lo = sample_quantile(alpha, (1.0 - levels[l]) / 2.0);
            const double hi = sample_quantile(alpha, (1.0 + levels[l]) / 2.0);
            if (lo <= alpha_true && alpha_true <= hi) ++npe_hits[l];
        }
        if (in_subset) npe_apes_sub.push_back(ape(alpha_true, sample_quantile(alpha, 0.5)));
        if ((i + 1) % 100 == 0) progress("criterion 5: " + std::to_string(i + 1) + "/500 sets");
    }

    const double npe_ecp95 = static_cast<double>(npe_hits.back()) / kSets;
    const double nbe_ecp95 = static_cast<double>(nbe_hits95) / kSets;
    double worst_cal = 0.0;
    bool monotone = true;
    for (std::size_t l = 0; l < levels.size(); ++l) {
        worst_cal = std::max(worst_cal,
                             std::abs(static_cast<double>(npe_hits[l]) / kSets - levels[l]));
        if (l > 0 && npe_hits[l] < npe_hits[l - 1]) monotone = false;
    }
    const double nbe_med_ape = sample_quantile(nbe_apes_sub, 0.5);
    const double npe_med_ape = sample_quantile(npe_apes_sub, 0.5);
    const double elapsed = now_seconds() - t0;

    const bool pass = npe_ecp95 >= kEcpLo && npe_ecp95 <= kEcpHi && nbe_ecp95 >= kEcpLo &&
                      nbe_ecp95 <= kEcpHi && worst_cal <= kCalibrationTol && monotone &&
                      nbe_med_ape < kApeLimit && npe_med_ape < kApeLimit &&
                      elapsed < kBudgetSeconds;
    detail = "ecp95 npe " + fmt(npe_ecp95) + ", nbe " + fmt(nbe_ecp95) +
             " (need [0.90,0.99]); calibration max dev " + fmt(worst_cal) +
             " (tol 0.06), monotone " + std::string(monotone ? "yes" : "no") +
             "; median APE npe " + fmt(npe_med_ape) + "%, nbe " + fmt(nbe_med_ape) +
             "% (limit 100%, N0 in [300,10000], n=" + std::to_string(nbe_apes_sub.size()) +
             "); " + fmt(elapsed) + "s (limit 2700s)";

    state.nbe = nbe.model;
    state.npe = npe.model;
    state.tests = tests;
    return pass;
}

// ---------------------------------------------------------------------------
// 6. MCMC convergence rate and credible-interval coverage.

bool criterion6(std::string& detail) {
    constexpr int kRuns = 50;
    constexpr double kRhatLimit = 1.05;
    constexpr double kMinConvergedFraction = 0.80;
    constexpr double kMinCoverage = 0.85;

    // Data-generating effects use unit scale rather than the 4-sd prior: the
    // mixing time of the component-blocked kernel grows with the largest cell
    // count (e^{alpha + sums of effects}), and 4-sd effect draws routinely put
    // cells past 1e8 where no feasible chain length mixes. Unit-scale effects
    // keep cells in the hundreds-to-tens-of-thousands range the sampler is
    // meant for, while alpha spans [4,7] as required.
    const PriorSpec prior;
    std::vector<Dataset> datasets;
    std::vector<double> truths;
    for (std::uint64_t trial = 0; datasets.size() < kRuns; ++trial) {
        Rng rng(derive_seed(914006, trial));
        ModelParams theta;
        theta.alpha = 4.0 + 3.0 * rng.uniform();
        theta.beta = Eigen::VectorXd::NullaryExpr(3, [&](Eigen::Index) { return rng.normal(); });
        theta.gamma = Eigen::VectorXd::NullaryExpr(3, [&](Eigen::Index) { return rng.normal(); });
        try {
            const std::vector<std::int64_t> counts = simulate_counts(theta, rng);
            datasets.push_back(apply_censoring(counts, std::nullopt, 3));
            truths.push_back(theta.alpha);
        } catch (const RateOverflowError&) {
            continue;
        }
    }

    int converged = 0, covered = 0;
    for (int i = 0; i < kRuns; ++i) {
        McmcConfig config;
        // Long chains: component-blocked proposals random-walk along the
        // alpha/effect ridges, so the integrated autocorrelation time runs to
        // tens of thousands of sweeps on saturated K=3 posteriors.
        config.n_iterations = 200000;
        config.n_burnin = 40000;
        config.seed = derive_seed(914006, 100000 + static_cast<std::uint64_t>(i));
        const McmcResult result = run_mcmc(datasets[static_cast<std::size_t>(i)], prior, config);
        if (result.rhat.maxCoeff() > kRhatLimit) continue;
        ++converged;
        std::vector<double> alpha;
        for (const auto& chain : result.chains)
            for (Eigen::Index it = 0; it < chain.rows(); ++it) alpha.push_back(chain(it, 0));
        const double lo = sample_quantile(alpha, 0.025);
        const double hi = sample_quantile(alpha, 0.975);
        if (lo <= truths[static_cast<std::size_t>(i)] && truths[static_cast<std::size_t>(i)] <= hi)
            ++covered;
        if ((i + 1) % 10 == 0) progress("criterion 6: " + std::to_string(i + 1) + "/50 runs");
    }

    const double conv_frac = static_cast<double>(converged) / kRuns;
    const double coverage = converged > 0 ? static_cast<double>(covered) / converged : 0.0;
    detail = "converged " + std::to_string(converged) + "/50 (need >= 80%); coverage " +
             std::to_string(covered) + "/" + std::to_string(converged) + " = " + fmt(coverage) +
             " (need >= 0.85)";
    return conv_frac >= kMinConvergedFraction && coverage >= kMinCoverage;
}

// ---------------------------------------------------------------------------
// 7. Amortization: sub-millisecond estimates, 100x posterior speedup.

bool criterion7(const StudyState& state, std::string& detail) {
    constexpr double kNbeLatencyLimit = 1e-3;
    constexpr double kMinSpeedup = 100.0;

    if (!state.nbe || !state.tests) {
        detail = "study models unavailable (criterion 5 failed to produce them)";
        return false;
    }

    const int n_calls = 200;
    double sink = 0.0;
    const double t0 = now_seconds();
    for (int i = 0; i < n_calls; ++i) {
        const NbeEstimate est =
            estimate(*state.nbe, state.tests->datasets[static_cast<std::size_t>(i)]);
        sink += est.n0_median;
    }
    const double mean_estimate_seconds = (now_seconds() - t0) / n_calls;
    if (!std::isfinite(sink)) {
        detail = "non-finite estimates";
        return false;
    }

    // The MCMC-vs-NPE comparison uses K=10, where a default 4-chain run does
    // real work; a briefly trained posterior estimator suffices because
    // sampling cost does not depend on how long the flow was trained.
    progress("criterion 7: training a small K=10 posterior estimator");
    const PriorSpec prior;
    TrainConfig cfg;
    cfg.sims_per_epoch = 2000;
    cfg.validation_size = 400;
    cfg.max_epochs = 3;
    cfg.batch_size = 64;
    cfg.patience = 3;
    cfg.adam.learning_rate = 1e-3;
    cfg.seed = 914007;
    NpeArch arch;
    arch.encoder_hidden = {64};
    arch.summary_dim = 32;
    arch.num_blocks = 2;
    arch.conditioner_hidden = {32};
    const NpeTrainResult npe10 = train_npe(cfg, prior, 10, std::nullopt, arch);

    Dataset data;
    for (std::uint64_t trial = 0;; ++trial) {
        Rng rng(derive_seed(914007, 500 + trial));
        const ModelParams theta = sample_prior(prior, 10, rng);
        try {
            data = apply_censoring(simulate_counts(theta, rng), std::nullopt, 10);
            break;
        } catch (const RateOverflowError&) {
            continue;
        }
    }

    const double t1 = now_seconds();
    const PosteriorSamples post = sample_posterior(npe10.model, data, 10000, 914008);
    std::vector<double> column(static_cast<std::size_t>(post.samples.cols()));
    double summary_sink = 0.0;
    for (Eigen::Index r = 0; r < post.samples.rows(); ++r) {
        for (Eigen::Index c = 0; c < post.samples.cols(); ++c)
            column[static_cast<std::size_t>(c)] = post.samples(r, c);
        summary_sink += sample_quantile(column, 0.5) + sample_quantile(column, 0.025) +
                        sample_quantile(column, 0.975);
    }
    for (Eigen::Index c = 0; c < post.samples.cols(); ++c)
        column[static_cast<std::size_t>(c)] = std::exp(post.samples(0, c));
    summary_sink += sample_quantile(column, 0.5) + sample_quantile(column, 0.025) +
                    sample_quantile(column, 0.975);
    const double npe_seconds = now_seconds() - t1;

    progress("criterion 7: running the default 4-chain MCMC baseline (K=10)");
    McmcConfig mcfg;
    mcfg.seed = 914009;
    const double t2 = now_seconds();
    const McmcResult mcmc = run_mcmc(data, prior, mcfg);
    const double mcmc_seconds = now_seconds() - t2;

    const double speedup = mcmc_seconds / npe_seconds;
    detail = "mean estimate() " + fmt(mean_estimate_seconds * 1e3) + "ms (limit 1ms); K=10: npe " +
             fmt(npe_seconds) + "s vs mcmc " + fmt(mcmc_seconds) + "s = " + fmt(speedup) +
             "x (need >= 100x)";
    return mean_estimate_seconds < kNbeLatencyLimit && speedup >= kMinSpeedup &&
           std::isfinite(summary_sink) && mcmc.chains.size() == 4;
}

// ---------------------------------------------------------------------------
// 8. Median APE stays within a factor of two across censoring thresholds.

bool criterion8(std::string& detail) {
    constexpr double kMaxRatio = 2.0;
    const PriorSpec prior;
    const std::vector<std::int64_t> thresholds = {0, 4, 16};

    TrainConfig cfg;
    cfg.sims_per_epoch = 3000;
    cfg.validation_size = 600;
    cfg.max_epochs = 25;
    cfg.batch_size = 32;
    cfg.patience = 6;
    cfg.adam.learning_rate = 1e-3;
    cfg.seed = 914010;

    std::vector<double> med_apes;
    for (const std::int64_t t : thresholds) {
        progress("criterion 8: threshold " + std::to_string(t));
        const CensorInterval cens{0, t};
        const NbeTrainResult trained = train_nbe(cfg, prior, 3, cens, {64, 64}, {0.5});
        // Same seed across thresholds: identical parameter/count draws, only
        // the censoring mask differs.
        const TestSet tests = make_test_set(prior, 3, cens, 300, 914011);
        std::vector<double> apes;
        for (int i = 0; i < 300; ++i) {
            const NbeEstimate est =
                estimate(trained.model, tests.datasets[static_cast<std::size_t>(i)]);
            apes.push_back(ape(tests.thetas[static_cast<std::size_t>(i)].alpha, est.median.alpha));
        }
        med_apes.push_back(sample_quantile(apes, 0.5));
    }

    const double lo = *std::min_element(med_apes.begin(), med_apes.end());
    const double hi = *std::max_element(med_apes.begin(), med_apes.end());
    const double ratio = hi / lo;
    detail = "median APE at t=0: " + fmt(med_apes[0]) + "%, t=4: " + fmt(med_apes[1]) +
             "%, t=16: " + fmt(med_apes[2]) + "%; ratio " + fmt(ratio) + " (limit 2)";
    return ratio < kMaxRatio;
}

// ---------------------------------------------------------------------------
// 9. Posterior predictive checks on well-specified data.

bool criterion9(const StudyState& state, std::string& detail) {
    constexpr int kDatasets = 20;
    constexpr int kReplicates = 1000;
    constexpr double kMinInsideFraction = 0.90;

    if (!state.npe) {
        detail = "study models unavailable (criterion 5 failed to produce them)";
        return false;
    }

    const PriorSpec prior;
    const CensorInterval cens{0, 10};
    const TestSet tests = make_test_set(prior, 3, cens, kDatasets, 914012);

    int uncensored_total = 0, uncensored_inside = 0;
    int censored_total = 0, censored_reported = 0;
    for (int i = 0; i < kDatasets; ++i) {
        const PpcResult ppc =
            posterior_predictive(*state.npe, tests.datasets[static_cast<std::size_t>(i)],
                                 kReplicates, derive_seed(914012, 300 + static_cast<std::uint64_t>(i)));
        for (const auto& cell : ppc.cells) {
            if (cell.censored) {
                ++censored_total;
                if (std::isfinite(cell.in_band_fraction) && cell.in_band_fraction >= 0.0 &&
                    cell.in_band_fraction <= 1.0)
                    ++censored_reported;
            } else {
                ++uncensored_total;
                if (cell.observed_inside) ++uncensored_inside;
            }
        }
    }

    const double inside_frac =
        uncensored_total > 0 ? static_cast<double>(uncensored_inside) / uncensored_total : 0.0;
    detail = "uncensored inside 95%: " + std::to_string(uncensored_inside) + "/" +
             std::to_string(uncensored_total) + " = " + fmt(inside_frac) +
             " (need >= 0.90); censored cells with in-band mass: " +
             std::to_string(censored_reported) + "/" + std::to_string(censored_total);
    return uncensored_total > 0 && inside_frac >= kMinInsideFraction && censored_total > 0 &&
           censored_reported == censored_total;
}

}  // namespace

int main() {
    int failures = 0;
    StudyState study;

    const auto run = [&](int id, const std::string& label, auto&& fn) {
        std::string detail;
        bool pass = false;
        try {
            pass = fn(detail);
        } catch (const std::exception& e) {
            detail = std::string("threw: ") + e.what();
        }
        report(id, label, pass, detail);
        if (!pass) ++failures;
    };

    run(1, "censored-likelihood oracle", [&](std::string& d) { return criterion1(d); });
    run(2, "gradient correctness", [&](std::string& d) { return criterion2(d); });
    run(3, "flow exactness", [&](std::string& d) { return criterion3(d); });
    run(4, "saturated MLE", [&](std::string& d) { return criterion4(d); });
    run(5, "simulation study coverage and error",
        [&](std::string& d) { return criterion5(study, d); });
    run(6, "MCMC convergence and coverage", [&](std::string& d) { return criterion6(d); });
    run(7, "amortization speed", [&](std::string& d) { return criterion7(study, d); });
    run(8, "censoring robustness", [&](std::string& d) { return criterion8(d); });
    run(9, "posterior predictive calibration", [&](std::string& d) { return criterion9(study, d); });

    if (failures > 0) std::printf("%d criterion(s) failed\n", failures);
    return failures;
}
