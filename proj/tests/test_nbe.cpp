#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>

#include <unistd.h>

#include "mse/nbe.hpp"

using namespace mse;

namespace {

std::string temp_file(const std::string& tag) {
    static int counter = 0;
    return "/tmp/mse_test_nbe_" + std::to_string(getpid()) + "_" + tag + "_" +
           std::to_string(counter++) + ".msenn";
}

Eigen::VectorXd vec(std::initializer_list<double> vals) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(vals.size()));
    Eigen::Index i = 0;
    for (double x : vals) v(i++) = x;
    return v;
}

// Random-weight estimator bundle, enough structure to exercise estimate().
NbeModel random_model(int k, int n_taus, std::uint64_t seed) {
    NbeModel model;
    model.k = k;
    model.prior = PriorSpec{};
    for (int i = 0; i < n_taus; ++i)
        model.taus.push_back((i + 1) / static_cast<double>(n_taus + 1));
    model.spec.input_dim = 2 * ((1 << k) - 1);
    model.spec.hidden_widths = {12};
    model.spec.output_dim = param_dim(k);
    model.spec.outputs.assign(static_cast<std::size_t>(model.spec.output_dim),
                              OutputActivation{});
    model.spec.outputs[0] = {OutputKind::shifted_sigmoid, model.prior.alpha_lo,
                             model.prior.alpha_hi};
    model.spec.validate();
    Rng rng(seed);
    for (int i = 0; i < n_taus; ++i)
        model.weights.push_back(init_weights(model.spec, InitScheme::he_uniform, rng));
    return model;
}

Dataset toy_dataset(int k, std::uint64_t seed, const std::optional<CensorInterval>& iv) {
    ModelParams theta = ModelParams::zeros(k);
    theta.alpha = 4.0;
    Rng rng(seed);
    return apply_censoring(simulate_counts(theta, rng), iv, k);
}

}  // namespace

TEST_CASE("absolute-error loss: hand values, symmetry, zero at truth") {
    CHECK(loss_l1(vec({1.0, 0.0}), vec({3.0, 0.0})) == 1.0);
    CHECK(loss_l1(vec({3.0, 0.0}), vec({1.0, 0.0})) == 1.0);
    CHECK(loss_l1(vec({2.5, -1.0, 7.0}), vec({2.5, -1.0, 7.0})) == 0.0);
    Rng rng(11);
    Eigen::VectorXd a(5), b(5);
    for (int i = 0; i < 5; ++i) {
        a(i) = rng.normal();
        b(i) = rng.normal();
    }
    CHECK(loss_l1(a, b) == loss_l1(b, a));
    CHECK_THROWS_AS(loss_l1(vec({1.0}), vec({1.0, 2.0})), std::invalid_argument);
}

TEST_CASE("pinball loss: hand values and tau validation") {
    CHECK(loss_quantile(0.5, vec({1.0}), vec({3.0})) == 1.0);
    CHECK(loss_quantile(0.975, vec({1.0}), vec({3.0})) == doctest::Approx(0.05).epsilon(1e-14));
    CHECK(loss_quantile(0.975, vec({3.0}), vec({1.0})) == doctest::Approx(1.95).epsilon(1e-14));
    CHECK(loss_quantile(0.025, vec({1.0}), vec({3.0})) == doctest::Approx(1.95).epsilon(1e-14));
    CHECK(loss_quantile(0.3, vec({2.0, 2.0}), vec({2.0, 2.0})) == 0.0);
    CHECK_THROWS_AS(loss_quantile(0.0, vec({1.0}), vec({1.0})), std::invalid_argument);
    CHECK_THROWS_AS(loss_quantile(1.0, vec({1.0}), vec({1.0})), std::invalid_argument);
    CHECK_THROWS_AS(loss_quantile(-0.5, vec({1.0}), vec({1.0})), std::invalid_argument);
    CHECK_THROWS_AS(loss_quantile(0.5, vec({1.0}), vec({1.0, 2.0})), std::invalid_argument);
}

TEST_CASE("pinball at tau = 0.5 is half the absolute-error loss") {
    Rng rng(13);
    for (int rep = 0; rep < 20; ++rep) {
        Eigen::VectorXd a(7), b(7);
        for (int i = 0; i < 7; ++i) {
            a(i) = 3.0 * rng.normal();
            b(i) = 3.0 * rng.normal();
        }
        CHECK(loss_quantile(0.5, a, b) ==
              doctest::Approx(0.5 * loss_l1(a, b)).epsilon(1e-15));
    }
}

TEST_CASE("estimate sorts quantile crossings and keeps raw outputs") {
    const NbeModel model = random_model(3, 3, 17);
    const Dataset data = toy_dataset(3, 19, std::nullopt);
    const NbeEstimate est = estimate(model, data);
    REQUIRE(est.raw.rows() == param_dim(3));
    REQUIRE(est.raw.cols() == 3);

    const Eigen::VectorXd lo = est.lo.flatten();
    const Eigen::VectorXd mid = est.median.flatten();
    const Eigen::VectorXd hi = est.hi.flatten();
    for (int i = 0; i < lo.size(); ++i) {
        CHECK(lo(i) <= mid(i));
        CHECK(mid(i) <= hi(i));
    }
    // sorted triple is a permutation of the raw row
    for (int r = 0; r < est.raw.rows(); ++r) {
        std::array<double, 3> vals = {est.raw(r, 0), est.raw(r, 1), est.raw(r, 2)};
        std::sort(vals.begin(), vals.end());
        CHECK(lo(r) == vals[0]);
        CHECK(mid(r) == vals[1]);
        CHECK(hi(r) == vals[2]);
    }
    // alpha respects the prior support by construction
    CHECK(est.lo.alpha > model.prior.alpha_lo);
    CHECK(est.hi.alpha < model.prior.alpha_hi);
    CHECK(est.n0_median == hidden_population(est.median));

    // pure function: repeated calls are bitwise identical
    const NbeEstimate again = estimate(model, data);
    CHECK(est.raw == again.raw);
    CHECK(est.n0_lo == again.n0_lo);
}

TEST_CASE("estimate rejects mismatched k and censor interval, naming both") {
    NbeModel model = random_model(2, 1, 23);
    const Dataset wrong_k = toy_dataset(3, 29, std::nullopt);
    try {
        estimate(model, wrong_k);
        FAIL("expected invalid_argument");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("k=2") != std::string::npos);
        CHECK(msg.find("k=3") != std::string::npos);
    }

    model.interval = CensorInterval{0, 10};
    const Dataset uncensored = toy_dataset(2, 31, std::nullopt);
    try {
        estimate(model, uncensored);
        FAIL("expected invalid_argument");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[0,10]") != std::string::npos);
        CHECK(msg.find("none") != std::string::npos);
    }
}

TEST_CASE("training on a near-degenerate prior recovers the point mass") {
    PriorSpec prior;
    prior.alpha_lo = 6.0;
    prior.alpha_hi = 6.0 + 1e-9;
    prior.effect_sd = 1e-9;

    TrainConfig config;
    config.sims_per_epoch = 1000;
    config.validation_size = 200;
    config.max_epochs = 30;
    config.batch_size = 32;
    config.patience = 10;
    config.seed = 7;
    config.adam.learning_rate = 5e-3;

    const NbeTrainResult result = train_nbe(config, prior, 2, std::nullopt, {16});
    REQUIRE(result.logs.size() == 3);
    for (const auto& log : result.logs) {
        CHECK(log.best_validation_risk <= log.initial_validation_risk);
        CHECK(log.best_validation_risk < log.initial_validation_risk);  // it must learn
        CHECK(log.overflow_redraws == 0);
        CHECK(std::isfinite(log.seconds));
        CHECK(!log.epochs.empty());
    }

    ModelParams truth = ModelParams::zeros(2);
    truth.alpha = 6.0;
    Rng rng(37);
    const Dataset data = apply_censoring(simulate_counts(truth, rng), std::nullopt, 2);
    const NbeEstimate est = estimate(result.model, data);
    CHECK(std::abs(est.median.alpha - 6.0) < 0.05);
    CHECK(est.median.beta.cwiseAbs().maxCoeff() < 0.05);
    CHECK(est.median.gamma.cwiseAbs().maxCoeff() < 0.05);
    CHECK(est.lo.flatten()(1) <= est.hi.flatten()(1));
    CHECK(est.n0_median == doctest::Approx(std::exp(est.median.alpha)).epsilon(1e-15));
}

TEST_CASE("training is deterministic for a fixed seed") {
    TrainConfig config;
    config.sims_per_epoch = 200;
    config.validation_size = 50;
    config.max_epochs = 2;
    config.batch_size = 32;
    config.seed = 99;

    const NbeTrainResult a = train_nbe(config, PriorSpec{}, 2, CensorInterval{0, 5}, {8});
    const NbeTrainResult b = train_nbe(config, PriorSpec{}, 2, CensorInterval{0, 5}, {8});
    REQUIRE(a.model.weights.size() == b.model.weights.size());
    for (std::size_t i = 0; i < a.model.weights.size(); ++i) {
        for (std::size_t l = 0; l < a.model.weights[i].w.size(); ++l) {
            CHECK(a.model.weights[i].w[l] == b.model.weights[i].w[l]);
            CHECK(a.model.weights[i].b[l] == b.model.weights[i].b[l]);
        }
        CHECK(a.logs[i].initial_validation_risk == b.logs[i].initial_validation_risk);
        CHECK(a.logs[i].best_validation_risk == b.logs[i].best_validation_risk);
    }
}

TEST_CASE("train_nbe validates taus") {
    TrainConfig config;
    config.sims_per_epoch = 10;
    config.validation_size = 10;
    config.max_epochs = 1;
    CHECK_THROWS_AS(train_nbe(config, PriorSpec{}, 2, std::nullopt, {4}, {}),
                    std::invalid_argument);
    CHECK_THROWS_AS(train_nbe(config, PriorSpec{}, 2, std::nullopt, {4}, {1.5}),
                    std::invalid_argument);
    CHECK_THROWS_AS(train_nbe(config, PriorSpec{}, 2, std::nullopt, {4}, {0.0, 0.5}),
                    std::invalid_argument);
}

TEST_CASE("save/load round-trips the model and metadata") {
    const NbeModel model = [] {
        NbeModel m = random_model(3, 3, 41);
        m.interval = CensorInterval{2, 8};
        return m;
    }();
    const std::string path = temp_file("roundtrip");
    save_nbe(path, model, {{"note", "unit"}});

    nlohmann::json metadata;
    const NbeModel back = load_nbe(path, &metadata);
    CHECK(metadata["type"] == "nbe");
    CHECK(metadata["k"] == 3);
    CHECK(metadata["note"] == "unit");
    CHECK(metadata["censor_interval"][0] == 2);
    CHECK(metadata["censor_interval"][1] == 8);
    CHECK(metadata["prior"]["alpha_lo"] == model.prior.alpha_lo);
    CHECK(back.k == model.k);
    CHECK(back.interval == model.interval);
    CHECK(back.taus == model.taus);
    CHECK(back.prior.effect_sd == model.prior.effect_sd);

    const Dataset data = toy_dataset(3, 43, CensorInterval{2, 8});
    const NbeEstimate e1 = estimate(model, data);
    const NbeEstimate e2 = estimate(back, data);
    CHECK(e1.raw == e2.raw);
    CHECK(e1.n0_median == e2.n0_median);
    std::remove(path.c_str());
}

TEST_CASE("load_nbe rejects checkpoints of another type") {
    const NbeModel model = random_model(2, 1, 47);
    const std::string path = temp_file("wrongtype");
    std::vector<NamedNetwork> nets{{"tau0", model.spec, model.weights[0]}};
    save_checkpoint(path, nets, {{"type", "npe"}, {"k", 2}});
    CHECK_THROWS_AS(load_nbe(path), FormatError);
    std::remove(path.c_str());
}
