#pragma once

// Likelihood-based baselines: adaptive random-walk Metropolis over the joint
// posterior with split-Rhat convergence gating, and a censored-likelihood MLE
// with Wald intervals from the numerical Hessian.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "mse/model.hpp"

namespace mse {

struct McmcConfig {
    int n_chains = 4;
    int n_iterations = 5000;  // per chain, including burn-in
    int n_burnin = 1000;
    double target_acceptance = 0.234;
    int adapt_window = 50;  // step-size updates every window, burn-in only
    std::uint64_t seed = 0;

    void validate() const;  // burnin < iterations, chains >= 2
};

struct McmcResult {
    std::vector<Eigen::MatrixXd> chains;     // per chain: (iters - burnin) x P
    std::vector<Eigen::VectorXd> log_posts;  // matching log posterior values
    Eigen::VectorXd rhat;                    // split-Rhat per parameter
    bool converged = false;                  // max rhat <= 1.01
    Eigen::MatrixXd acceptance;              // chains x P, post-burn-in rates
    std::vector<std::uint8_t> stuck;         // per chain: a 1000-iteration full-rejection streak
    double seconds = 0.0;
    double seconds_per_iteration = 0.0;      // wall clock / (chains * iterations)
};

using LogDensity = std::function<double(const Eigen::VectorXd&)>;

/// One random-walk Metropolis update of coordinate j; mutates theta/logp on
/// acceptance and returns whether the proposal was accepted. This is the
/// transition kernel used by run_mcmc (exposed so the detailed-balance
/// regression test exercises the exact production code path).
bool mh_update(const LogDensity& target, Eigen::VectorXd& theta, double& logp, int j, double step,
               Rng& rng);

/// Component-blocked Gaussian random walk on an arbitrary target. Step sizes
/// adapt toward target_acceptance during burn-in only (the post-burn-in kernel
/// is fixed, preserving detailed balance). All-reject streaks of 1000
/// iterations set a stuck-chain warning, not an exception.
McmcResult run_mcmc_target(const LogDensity& target, int dim, const Eigen::VectorXd& init,
                           const McmcConfig& config, bool adapt = true);

/// model-core log_likelihood + log_prior (unnormalized posterior).
double log_posterior(const Dataset& data, const ModelParams& theta, const PriorSpec& prior);

McmcResult run_mcmc(const Dataset& data, const PriorSpec& prior, const McmcConfig& config);

/// Split-Rhat: each chain is halved and the potential-scale-reduction factor
/// computed from within/between variances. Throws domain_error when every
/// half-chain has zero variance. Requires >= 2 chains of length >= 4.
double gelman_rubin(const std::vector<Eigen::VectorXd>& chains);

/// Column-wise split-Rhat over per-chain sample matrices; columns with zero
/// within-chain variance yield +inf rather than an exception.
Eigen::VectorXd gelman_rubin_all(const std::vector<Eigen::MatrixXd>& chains);

struct MleResult {
    ModelParams theta;
    double log_lik = 0.0;
    Eigen::VectorXd ci_lo, ci_hi;  // Wald 95% per parameter
    bool ci_unreliable = false;    // singular / non-PD observed information
    double grad_inf_norm = 0.0;    // score at the optimum
    int best_start = 0;
};

/// Staged-learning-rate ADAM ascent on the censored log-likelihood with the
/// analytic score; multi-start (init plus jittered restarts) keeping the best
/// point ever evaluated. Default init: alpha = log(total observed count),
/// beta = gamma = 0. Throws on a non-finite objective at every start.
MleResult fit_mle(const Dataset& data, const std::optional<ModelParams>& init = std::nullopt,
                  int n_starts = 5, std::uint64_t seed = 0);

}  // namespace mse
