#include "mse/classical.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mse {

namespace {
constexpr double kRhatThreshold = 1.01;
constexpr int kStuckStreak = 1000;
constexpr double kZ975 = 1.959963984540054;
}  // namespace

void McmcConfig::validate() const {
    if (n_chains < 2) throw std::invalid_argument("mcmc: need >= 2 chains for Rhat");
    if (n_burnin < 0 || n_burnin >= n_iterations)
        throw std::invalid_argument("mcmc: need 0 <= burnin < iterations");
    if (!(target_acceptance > 0.0 && target_acceptance < 1.0))
        throw std::invalid_argument("mcmc: target acceptance outside (0,1)");
    if (adapt_window < 1) throw std::invalid_argument("mcmc: adapt window must be >= 1");
}

bool mh_update(const LogDensity& target, Eigen::VectorXd& theta, double& logp, int j, double step,
               Rng& rng) {
    const double old = theta(j);
    theta(j) = old + step * rng.normal();
    const double logp_new = target(theta);
    if (std::log(rng.uniform() + std::numeric_limits<double>::min()) < logp_new - logp) {
        logp = logp_new;
        return true;
    }
    theta(j) = old;
    return false;
}

McmcResult run_mcmc_target(const LogDensity& target, int dim, const Eigen::VectorXd& init,
                           const McmcConfig& config, bool adapt) {
    config.validate();
    if (init.size() != dim) throw std::invalid_argument("mcmc: init dimension mismatch");
    const auto t_start = std::chrono::steady_clock::now();
    const int kept = config.n_iterations - config.n_burnin;

    McmcResult result;
    result.chains.assign(static_cast<std::size_t>(config.n_chains), Eigen::MatrixXd(kept, dim));
    result.log_posts.assign(static_cast<std::size_t>(config.n_chains), Eigen::VectorXd(kept));
    result.acceptance = Eigen::MatrixXd::Zero(config.n_chains, dim);
    result.stuck.assign(static_cast<std::size_t>(config.n_chains), 0);

    for (int chain = 0; chain < config.n_chains; ++chain) {
        Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(chain)));
        Eigen::VectorXd theta = init;
        double logp = target(theta);
        if (!std::isfinite(logp))
            throw std::invalid_argument("mcmc: log density not finite at the initial point");

        Eigen::VectorXd step = Eigen::VectorXd::Constant(dim, 0.1);
        Eigen::VectorXi window_accepts = Eigen::VectorXi::Zero(dim);
        int reject_streak = 0;

        for (int it = 0; it < config.n_iterations; ++it) {
            const bool burnin = it < config.n_burnin;
            bool any_accept = false;
            for (int j = 0; j < dim; ++j) {
                const bool accepted = mh_update(target, theta, logp, j, step(j), rng);
                any_accept |= accepted;
                if (burnin && adapt) window_accepts(j) += accepted;
                if (!burnin && accepted) result.acceptance(chain, j) += 1.0;
            }
            if (any_accept) {
                reject_streak = 0;
            } else if (++reject_streak >= kStuckStreak) {
                result.stuck[static_cast<std::size_t>(chain)] = 1;
            }

            if (burnin && adapt && (it + 1) % config.adapt_window == 0) {
                for (int j = 0; j < dim; ++j) {
                    const double rate =
                        static_cast<double>(window_accepts(j)) / config.adapt_window;
                    step(j) = std::clamp(step(j) * std::exp(2.0 * (rate - config.target_acceptance)),
                                         1e-8, 1e3);
                }
                window_accepts.setZero();
            }
            if (!burnin) {
                result.chains[static_cast<std::size_t>(chain)].row(it - config.n_burnin) =
                    theta.transpose();
                result.log_posts[static_cast<std::size_t>(chain)](it - config.n_burnin) = logp;
            }
        }
    }
    result.acceptance /= static_cast<double>(kept);
    result.rhat = gelman_rubin_all(result.chains);
    result.converged = (result.rhat.array() <= kRhatThreshold).all();
    result.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.seconds_per_iteration =
        result.seconds / (static_cast<double>(config.n_chains) * config.n_iterations);
    return result;
}

double log_posterior(const Dataset& data, const ModelParams& theta, const PriorSpec& prior) {
    const double lp = log_prior(theta, prior);
    if (!std::isfinite(lp)) return -std::numeric_limits<double>::infinity();
    return log_likelihood(data, theta) + lp;
}

McmcResult run_mcmc(const Dataset& data, const PriorSpec& prior, const McmcConfig& config) {
    const LikelihoodEvaluator lik(data);
    const int k = data.k;
    const LogDensity target = [&lik, &prior, k](const Eigen::VectorXd& v) {
        const ModelParams theta = ModelParams::from_vector(v, k);
        const double lp = log_prior(theta, prior);
        if (!std::isfinite(lp)) return -std::numeric_limits<double>::infinity();
        return lik(v) + lp;
    };

    std::int64_t total = 0;
    for (std::size_t i = 0; i < data.counts.size(); ++i)
        if (!data.mask[i]) total += data.counts[i];
    Eigen::VectorXd init = Eigen::VectorXd::Zero(param_dim(k));
    init(0) = std::clamp(std::log(static_cast<double>(total) + 1.0), prior.alpha_lo + 0.1,
                         prior.alpha_hi - 0.1);
    return run_mcmc_target(target, param_dim(k), init, config);
}

double gelman_rubin(const std::vector<Eigen::VectorXd>& chains) {
    if (chains.size() < 2) throw std::invalid_argument("gelman_rubin: need >= 2 chains");
    const Eigen::Index n = chains.front().size();
    if (n < 4) throw std::invalid_argument("gelman_rubin: chains must have length >= 4");
    for (const auto& c : chains)
        if (c.size() != n) throw std::invalid_argument("gelman_rubin: unequal chain lengths");

    const Eigen::Index half = n / 2;  // odd lengths drop the middle sample
    std::vector<Eigen::VectorXd> halves;
    for (const auto& c : chains) {
        halves.push_back(c.head(half));
        halves.push_back(c.tail(half));
    }

    const auto m = static_cast<double>(halves.size());
    const auto len = static_cast<double>(half);
    double w = 0.0;
    std::vector<double> means;
    for (const auto& h : halves) {
        const double mu = h.mean();
        means.push_back(mu);
        w += (h.array() - mu).square().sum() / (len - 1.0);
    }
    w /= m;
    if (w == 0.0)
        throw std::domain_error("gelman_rubin: zero within-chain variance, statistic undefined");

    const double grand = std::accumulate(means.begin(), means.end(), 0.0) / m;
    double var_means = 0.0;
    for (double mu : means) var_means += (mu - grand) * (mu - grand);
    var_means /= (m - 1.0);

    const double var_plus = (len - 1.0) / len * w + var_means;
    return std::sqrt(var_plus / w);
}

Eigen::VectorXd gelman_rubin_all(const std::vector<Eigen::MatrixXd>& chains) {
    const Eigen::Index dim = chains.front().cols();
    Eigen::VectorXd rhat(dim);
    for (Eigen::Index j = 0; j < dim; ++j) {
        std::vector<Eigen::VectorXd> cols;
        for (const auto& c : chains) cols.push_back(c.col(j));
        try {
            rhat(j) = gelman_rubin(cols);
        } catch (const std::domain_error&) {
            rhat(j) = std::numeric_limits<double>::infinity();
        }
    }
    return rhat;
}

namespace {

struct AdamVec {
    Eigen::VectorXd m, v;
    long long t = 0;

    explicit AdamVec(Eigen::Index dim) : m(Eigen::VectorXd::Zero(dim)), v(Eigen::VectorXd::Zero(dim)) {}

    void step(Eigen::VectorXd& x, const Eigen::VectorXd& grad, double lr) {
        ++t;
        m = 0.9 * m + 0.1 * grad;
        v = 0.999 * v + 0.001 * grad.cwiseProduct(grad);
        const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t));
        x -= (lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + 1e-8)).matrix();
    }
};

}  // namespace

MleResult fit_mle(const Dataset& data, const std::optional<ModelParams>& init, int n_starts,
                  std::uint64_t seed) {
    if (n_starts < 1) throw std::invalid_argument("fit_mle: need >= 1 start");
    const LikelihoodEvaluator lik(data);
    const int p = lik.dim();

    std::int64_t total = 0;
    for (std::size_t i = 0; i < data.counts.size(); ++i)
        if (!data.mask[i]) total += data.counts[i];
    Eigen::VectorXd default_start = Eigen::VectorXd::Zero(p);
    default_start(0) = std::log(static_cast<double>(total) + 1.0);

    // Staged learning-rate decay: ADAM behaves like sign-gradient steps of
    // size lr near an optimum, so each stage tightens the attainable band.
    static const std::pair<double, int> kStages[] = {
        {0.3, 2000},  {0.03, 1500},  {3e-3, 1200}, {3e-4, 1000},
        {3e-5, 1000}, {3e-6, 800},   {3e-7, 800},  {3e-8, 600}};

    MleResult result;
    double best_ll = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_theta;
    bool any_finite_start = false;

    for (int s = 0; s < n_starts; ++s) {
        Eigen::VectorXd theta = init ? init->flatten() : default_start;
        if (s > 0) {
            Rng rng(derive_seed(seed, 7000 + static_cast<std::uint64_t>(s)));
            for (int j = 0; j < p; ++j) theta(j) += 0.5 * rng.normal();
        }
        double ll = lik(theta);
        if (!std::isfinite(ll)) continue;
        any_finite_start = true;
        if (ll > best_ll) {
            best_ll = ll;
            best_theta = theta;
            result.best_start = s;
        }

        AdamVec opt(p);
        for (const auto& [lr, iters] : kStages) {
            for (int it = 0; it < iters; ++it) {
                const Eigen::VectorXd score = lik.score(theta);
                if (!score.allFinite()) break;
                if (score.lpNorm<Eigen::Infinity>() < 1e-12) break;
                Eigen::VectorXd candidate = theta;
                AdamVec trial = opt;
                trial.step(candidate, -score, lr);
                const double cand_ll = lik(candidate);
                if (!std::isfinite(cand_ll)) break;  // stay at the last finite point
                opt = trial;
                theta = candidate;
                ll = cand_ll;
                if (ll > best_ll) {
                    best_ll = ll;
                    best_theta = theta;
                    result.best_start = s;
                }
            }
        }
    }
    if (!any_finite_start)
        throw std::runtime_error("fit_mle: objective not finite at any start point");

    result.theta = ModelParams::from_vector(best_theta, lik.num_lists());
    result.log_lik = best_ll;
    result.grad_inf_norm = lik.score(best_theta).lpNorm<Eigen::Infinity>();

    // Observed information from central differences of the analytic score.
    Eigen::MatrixXd hessian(p, p);
    for (int i = 0; i < p; ++i) {
        const double h = 1e-5 * std::max(1.0, std::abs(best_theta(i)));
        Eigen::VectorXd hi = best_theta, lo = best_theta;
        hi(i) += h;
        lo(i) -= h;
        hessian.col(i) = (lik.score(hi) - lik.score(lo)) / (2.0 * h);
    }
    const Eigen::MatrixXd info = -0.5 * (hessian + hessian.transpose());

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(info);
    const Eigen::VectorXd evals = eig.eigenvalues();
    const double tol = 1e-8 * std::max(1.0, evals.cwiseAbs().maxCoeff());
    result.ci_unreliable = (evals.minCoeff() <= tol) || !info.allFinite();

    Eigen::VectorXd inv_evals(p);
    for (int i = 0; i < p; ++i)
        inv_evals(i) = evals(i) > tol ? 1.0 / evals(i) : std::numeric_limits<double>::infinity();
    result.ci_lo.resize(p);
    result.ci_hi.resize(p);
    for (int i = 0; i < p; ++i) {
        double var = 0.0;
        for (int j = 0; j < p; ++j) {
            const double v = eig.eigenvectors()(i, j);
            var += v * v * inv_evals(j);
        }
        const double half_width = kZ975 * std::sqrt(var);
        result.ci_lo(i) = best_theta(i) - half_width;
        result.ci_hi(i) = best_theta(i) + half_width;
    }
    return result;
}

}  // namespace mse
