#pragma once

// Simulation-study harness: shared test sets, point-estimate metrics,
// coverage/calibration curves, sensitivity sweeps, and timing fits.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mse/model.hpp"
#include "mse/training.hpp"

namespace mse {

struct TestSet {
    int k = 0;
    std::optional<CensorInterval> interval;
    std::uint64_t seed = 0;
    std::vector<ModelParams> thetas;
    std::vector<Dataset> datasets;
    std::int64_t overflow_redraws = 0;
};

/// n_sets independent (theta, data) pairs from the prior/model; rate-overflow
/// draws are rejected, redrawn and counted. Reproducible from the seed, and
/// the simulation stream does not depend on the censor interval (censoring is
/// applied after the fact), so sweeps over intervals share the same draws.
TestSet make_test_set(const PriorSpec& prior, int k, const std::optional<CensorInterval>& interval,
                      int n_sets, std::uint64_t seed);

/// 100 |e^alpha - e^alpha_hat| / e^alpha, in percent.
double ape(double alpha_true, double alpha_hat);

/// intervals_per_level[l][i] = (lo, hi) for dataset i at level l; returns the
/// fraction of truths inside per level.
std::vector<double> coverage_curve(
    const std::vector<std::vector<std::pair<double, double>>>& intervals_per_level,
    const std::vector<double>& truths);

/// Linear-interpolation sample quantile (sorts a copy).
double sample_quantile(std::vector<double> values, double q);

struct PerDatasetRow {
    int set_id = 0;
    std::string method;
    double alpha_true = 0, n0_true = 0;
    double alpha_hat = 0, n0_hat = 0;
    double lo95 = 0, hi95 = 0;  // on n0; NaN when the method has no interval
    double ape_value = 0;
    int converged = -1;  // -1 not applicable, else 0/1
    double seconds = 0;
};

struct MetricsReport {
    int n = 0;
    double bias = 0;           // mean raw error on n0
    double mape_percent = 0;   // mean APE, percent
    double mape_fraction = 0;  // same in fraction form
    double rmse = 0;
    double median_ape = 0;
    double ecp95 = 0;  // NaN when no intervals present
    double mean_seconds = 0;
    // Convergence stratification (NaN when no converged flags present).
    double converged_fraction = 0;
    double median_ape_converged = 0;
    double median_ape_failed = 0;
};

MetricsReport summarize(const std::vector<PerDatasetRow>& rows);

enum class SweepAxis { lists, neurons, layers, threshold };

struct SweepPoint {
    double value = 0;
    MetricsReport report;
    std::string error;  // nonempty when training failed; sweep continues
};

/// Trains one median-quantile estimator per axis value (everything else at the
/// base config) and evaluates it on the shared test set for that K. The
/// threshold axis maps 0 to completely observed data.
std::vector<SweepPoint> sensitivity_sweep(SweepAxis axis, const std::vector<double>& values,
                                          const TrainConfig& base, const PriorSpec& prior,
                                          int base_k,
                                          const std::optional<CensorInterval>& base_interval,
                                          int n_test_sets, std::uint64_t test_seed);

struct TimingFit {
    double mean_seconds = 0;
    double slope = 0;      // seconds per unit n
    double intercept = 0;
};

/// Least-squares line through (n, seconds) pairs.
TimingFit fit_time_vs_n(const std::vector<double>& n_values, const std::vector<double>& seconds);

struct TimingReport {
    std::string method;
    std::vector<double> n_values;
    std::vector<double> mean_seconds;  // mean over datasets and repeats, per n
    TimingFit fit;
};

/// Times method(data, n) for each n over every dataset, `repeats` times each.
using TimedMethod = std::function<void(const Dataset&, int)>;
std::vector<TimingReport> timing_harness(
    const std::vector<std::pair<std::string, TimedMethod>>& methods,
    const std::vector<Dataset>& subset, const std::vector<double>& n_values, int repeats);

}  // namespace mse
