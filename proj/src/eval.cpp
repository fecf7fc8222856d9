#include "mse/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "mse/nbe.hpp"

namespace mse {

TestSet make_test_set(const PriorSpec& prior, int k, const std::optional<CensorInterval>& interval,
                      int n_sets, std::uint64_t seed) {
    if (n_sets < 1) throw std::invalid_argument("make_test_set: n_sets must be >= 1");
    TestSet set;
    set.k = k;
    set.interval = interval;
    set.seed = seed;
    Rng rng(seed);
    set.thetas.reserve(static_cast<std::size_t>(n_sets));
    set.datasets.reserve(static_cast<std::size_t>(n_sets));
    for (int i = 0; i < n_sets; ++i) {
        for (;;) {
            const ModelParams theta = sample_prior(prior, k, rng);
            std::vector<std::int64_t> counts;
            try {
                counts = simulate_counts(theta, rng);
            } catch (const RateOverflowError&) {
                ++set.overflow_redraws;
                continue;
            }
            set.thetas.push_back(theta);
            set.datasets.push_back(apply_censoring(counts, interval, k));
            break;
        }
    }
    return set;
}

double ape(double alpha_true, double alpha_hat) {
    return 100.0 * std::abs(std::exp(alpha_true) - std::exp(alpha_hat)) / std::exp(alpha_true);
}

std::vector<double> coverage_curve(
    const std::vector<std::vector<std::pair<double, double>>>& intervals_per_level,
    const std::vector<double>& truths) {
    std::vector<double> ecp;
    for (const auto& level : intervals_per_level) {
        if (level.size() != truths.size())
            throw std::invalid_argument("coverage_curve: dataset count differs across levels");
        std::size_t hits = 0;
        for (std::size_t i = 0; i < truths.size(); ++i)
            if (truths[i] >= level[i].first && truths[i] <= level[i].second) ++hits;
        ecp.push_back(static_cast<double>(hits) / static_cast<double>(truths.size()));
    }
    return ecp;
}

double sample_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("sample_quantile: empty sample");
    if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("sample_quantile: q outside [0,1]");
    std::sort(values.begin(), values.end());
    const double h = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(h);
    if (lo + 1 >= values.size()) return values.back();
    return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

MetricsReport summarize(const std::vector<PerDatasetRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("summarize: no rows");
    const double nan = std::numeric_limits<double>::quiet_NaN();
    MetricsReport report;
    report.n = static_cast<int>(rows.size());

    double sum_err = 0, sum_ape = 0, sum_sq = 0, sum_sec = 0;
    std::size_t interval_rows = 0, interval_hits = 0;
    std::vector<double> apes, apes_conv, apes_fail;
    int n_flagged = 0, n_converged = 0;
    for (const auto& r : rows) {
        const double err = r.n0_hat - r.n0_true;
        sum_err += err;
        sum_sq += err * err;
        sum_ape += r.ape_value;
        sum_sec += r.seconds;
        apes.push_back(r.ape_value);
        if (std::isfinite(r.lo95) && std::isfinite(r.hi95)) {
            ++interval_rows;
            if (r.n0_true >= r.lo95 && r.n0_true <= r.hi95) ++interval_hits;
        }
        if (r.converged >= 0) {
            ++n_flagged;
            if (r.converged) {
                ++n_converged;
                apes_conv.push_back(r.ape_value);
            } else {
                apes_fail.push_back(r.ape_value);
            }
        }
    }
    report.bias = sum_err / report.n;
    report.mape_percent = sum_ape / report.n;
    report.mape_fraction = report.mape_percent / 100.0;
    report.rmse = std::sqrt(sum_sq / report.n);
    report.median_ape = sample_quantile(apes, 0.5);
    report.mean_seconds = sum_sec / report.n;
    report.ecp95 = interval_rows
                       ? static_cast<double>(interval_hits) / static_cast<double>(interval_rows)
                       : nan;
    report.converged_fraction =
        n_flagged ? static_cast<double>(n_converged) / static_cast<double>(n_flagged) : nan;
    report.median_ape_converged = apes_conv.empty() ? nan : sample_quantile(apes_conv, 0.5);
    report.median_ape_failed = apes_fail.empty() ? nan : sample_quantile(apes_fail, 0.5);
    return report;
}

std::vector<SweepPoint> sensitivity_sweep(SweepAxis axis, const std::vector<double>& values,
                                          const TrainConfig& base, const PriorSpec& prior,
                                          int base_k,
                                          const std::optional<CensorInterval>& base_interval,
                                          int n_test_sets, std::uint64_t test_seed) {
    if (values.empty()) throw std::invalid_argument("sensitivity_sweep: no axis values");
    std::vector<SweepPoint> points;
    for (double value : values) {
        SweepPoint point;
        point.value = value;
        try {
            int k = base_k;
            std::optional<CensorInterval> interval = base_interval;
            std::vector<int> hidden = {256, 256, 256};
            switch (axis) {
                case SweepAxis::lists:
                    k = static_cast<int>(value);
                    break;
                case SweepAxis::neurons:
                    hidden.assign(3, static_cast<int>(value));
                    break;
                case SweepAxis::layers:
                    hidden.assign(static_cast<std::size_t>(value), 256);
                    break;
                case SweepAxis::threshold:
                    // t = 0 means completely observed data
                    interval = value == 0.0
                                   ? std::nullopt
                                   : std::optional<CensorInterval>(
                                         CensorInterval{0, static_cast<std::int64_t>(value)});
                    break;
            }
            const NbeTrainResult trained =
                train_nbe(base, prior, k, interval, hidden, std::vector<double>{0.5});
            const TestSet tests = make_test_set(prior, k, interval, n_test_sets, test_seed);

            std::vector<PerDatasetRow> rows;
            const double nan = std::numeric_limits<double>::quiet_NaN();
            for (int i = 0; i < n_test_sets; ++i) {
                const auto est = estimate(trained.model, tests.datasets[static_cast<std::size_t>(i)]);
                PerDatasetRow row;
                row.set_id = i;
                row.method = "nbe";
                row.alpha_true = tests.thetas[static_cast<std::size_t>(i)].alpha;
                row.n0_true = std::exp(row.alpha_true);
                row.alpha_hat = est.median.alpha;
                row.n0_hat = est.n0_median;
                row.lo95 = nan;
                row.hi95 = nan;
                row.ape_value = ape(row.alpha_true, row.alpha_hat);
                rows.push_back(row);
            }
            point.report = summarize(rows);
        } catch (const std::exception& e) {
            point.error = e.what();
        }
        points.push_back(std::move(point));
    }
    return points;
}

TimingFit fit_time_vs_n(const std::vector<double>& n_values, const std::vector<double>& seconds) {
    if (n_values.size() != seconds.size() || n_values.empty())
        throw std::invalid_argument("fit_time_vs_n: need matching nonempty inputs");
    const auto n = static_cast<double>(n_values.size());
    const double mx = std::accumulate(n_values.begin(), n_values.end(), 0.0) / n;
    const double my = std::accumulate(seconds.begin(), seconds.end(), 0.0) / n;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n_values.size(); ++i) {
        sxx += (n_values[i] - mx) * (n_values[i] - mx);
        sxy += (n_values[i] - mx) * (seconds[i] - my);
    }
    TimingFit fit;
    fit.mean_seconds = my;
    fit.slope = sxx > 0 ? sxy / sxx : 0.0;
    fit.intercept = my - fit.slope * mx;
    return fit;
}

std::vector<TimingReport> timing_harness(
    const std::vector<std::pair<std::string, TimedMethod>>& methods,
    const std::vector<Dataset>& subset, const std::vector<double>& n_values, int repeats) {
    if (repeats < 1) throw std::invalid_argument("timing_harness: repeats must be >= 1");
    if (subset.empty() || n_values.empty())
        throw std::invalid_argument("timing_harness: need datasets and n values");

    std::vector<TimingReport> reports;
    for (const auto& [name, method] : methods) {
        TimingReport report;
        report.method = name;
        report.n_values = n_values;
        for (double n : n_values) {
            const auto t0 = std::chrono::steady_clock::now();
            for (int r = 0; r < repeats; ++r)
                for (const auto& data : subset) method(data, static_cast<int>(n));
            const double elapsed =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            report.mean_seconds.push_back(elapsed /
                                          (static_cast<double>(repeats) * subset.size()));
        }
        report.fit = fit_time_vs_n(report.n_values, report.mean_seconds);
        reports.push_back(std::move(report));
    }
    return reports;
}

}  // namespace mse
