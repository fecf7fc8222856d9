#include "mse/model.hpp"

#include <cmath>
#include <limits>

namespace mse {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
}  // namespace

std::string CapturePattern::to_string() const {
    std::string s(static_cast<std::size_t>(num_lists), '0');
    for (int list = 1; list <= num_lists; ++list)
        if (contains(list)) s[static_cast<std::size_t>(list - 1)] = '1';
    return s;
}

std::vector<CapturePattern> enumerate_patterns(int k) {
    if (k < 2 || k > 20) throw std::invalid_argument("enumerate_patterns: K must be in [2, 20]");
    const std::uint32_t n = (1u << k) - 1u;
    std::vector<CapturePattern> out;
    out.reserve(n);
    for (std::uint32_t m = 1; m <= n; ++m) out.push_back(CapturePattern{k, m});
    return out;
}

int pair_index(int k, int l, int num_lists) {
    if (k < 1 || l <= k || l > num_lists) throw std::invalid_argument("pair_index: need 1 <= k < l <= K");
    return (k - 1) * num_lists - (k - 1) * k / 2 + (l - k - 1);
}

int param_dim(int k) { return 1 + k + k * (k - 1) / 2; }

Eigen::VectorXd ModelParams::flatten() const {
    Eigen::VectorXd v(dim());
    v(0) = alpha;
    v.segment(1, beta.size()) = beta;
    v.segment(1 + beta.size(), gamma.size()) = gamma;
    return v;
}

ModelParams ModelParams::from_vector(const Eigen::VectorXd& v, int k) {
    if (v.size() != param_dim(k)) throw std::invalid_argument("ModelParams::from_vector: bad dimension");
    ModelParams theta;
    theta.alpha = v(0);
    theta.beta = v.segment(1, k);
    theta.gamma = v.segment(1 + k, k * (k - 1) / 2);
    return theta;
}

ModelParams ModelParams::zeros(int k) {
    ModelParams theta;
    theta.alpha = 0.0;
    theta.beta = Eigen::VectorXd::Zero(k);
    theta.gamma = Eigen::VectorXd::Zero(k * (k - 1) / 2);
    return theta;
}

double log_rate(const CapturePattern& pattern, const ModelParams& theta) {
    const int k = theta.num_lists();
    if (pattern.num_lists != k) throw std::invalid_argument("log_rate: pattern/theta dimension mismatch");
    double lr = theta.alpha;
    for (int a = 1; a <= k; ++a) {
        if (!pattern.contains(a)) continue;
        lr += theta.beta(a - 1);
        for (int b = a + 1; b <= k; ++b)
            if (pattern.contains(b)) lr += theta.gamma(pair_index(a, b, k));
    }
    return lr;
}

ModelParams sample_prior(const PriorSpec& spec, int k, Rng& rng) {
    if (!(spec.alpha_lo < spec.alpha_hi) || !(spec.effect_sd > 0.0))
        throw std::invalid_argument("sample_prior: invalid PriorSpec");
    ModelParams theta;
    theta.alpha = rng.uniform(spec.alpha_lo, spec.alpha_hi);
    theta.beta = Eigen::VectorXd(k);
    for (int i = 0; i < k; ++i) theta.beta(i) = rng.normal(0.0, spec.effect_sd);
    const int npairs = k * (k - 1) / 2;
    theta.gamma = Eigen::VectorXd(npairs);
    for (int i = 0; i < npairs; ++i) theta.gamma(i) = rng.normal(0.0, spec.effect_sd);
    return theta;
}

std::vector<std::int64_t> simulate_counts(const ModelParams& theta, Rng& rng) {
    const int k = theta.num_lists();
    const auto patterns = enumerate_patterns(k);
    std::vector<std::int64_t> counts(patterns.size());
    for (std::size_t i = 0; i < patterns.size(); ++i) {
        const double lambda = std::exp(log_rate(patterns[i], theta));
        if (!std::isfinite(lambda) || lambda > 1e15) throw RateOverflowError(lambda);
        counts[i] = rng.poisson(lambda);
    }
    return counts;
}

Dataset apply_censoring(const std::vector<std::int64_t>& counts,
                        const std::optional<CensorInterval>& interval, int k) {
    if (counts.size() != (1u << k) - 1u)
        throw std::invalid_argument("apply_censoring: counts length != 2^K - 1");
    if (interval && interval->lo > interval->hi)
        throw std::invalid_argument("apply_censoring: interval lo > hi");
    Dataset data;
    data.k = k;
    data.counts = counts;
    data.mask.assign(counts.size(), 0);
    data.interval = interval;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const std::int64_t n = counts[i];
        if (n < -1) throw std::invalid_argument("apply_censoring: negative count");
        if (n == -1) {
            // already-censored sentinel: legal only when an interval is present
            if (!interval) throw std::invalid_argument("apply_censoring: -1 count without interval");
            data.mask[i] = 1;
        } else if (interval && n >= interval->lo && n <= interval->hi) {
            data.counts[i] = -1;
            data.mask[i] = 1;
        }
    }
    return data;
}

double log_poisson_pmf(std::int64_t n, double lambda) {
    if (n < 0) return kNegInf;
    if (lambda == 0.0) return n == 0 ? 0.0 : kNegInf;
    const double nd = static_cast<double>(n);
    return nd * std::log(lambda) - lambda - std::lgamma(nd + 1.0);
}

namespace {

struct IntervalStats {
    double log_prob;
    double cond_mean;  // E[N | a <= N <= b]
};

// log-sum-exp over pmf terms; log_lambda passed separately so callers holding
// the linear predictor avoid the exp/log round trip.
IntervalStats poisson_interval_stats(std::int64_t a, std::int64_t b, double log_lambda,
                                     double lambda) {
    if (a < 0) a = 0;
    if (lambda == 0.0) {
        if (a == 0) return {0.0, 0.0};
        return {kNegInf, static_cast<double>(a)};
    }
    double max_term = kNegInf;
    for (std::int64_t j = a; j <= b; ++j) {
        const double jd = static_cast<double>(j);
        const double t = jd * log_lambda - lambda - std::lgamma(jd + 1.0);
        if (t > max_term) max_term = t;
    }
    if (max_term == kNegInf) return {kNegInf, static_cast<double>(a)};
    double s0 = 0.0, s1 = 0.0;
    for (std::int64_t j = a; j <= b; ++j) {
        const double jd = static_cast<double>(j);
        const double w = std::exp(jd * log_lambda - lambda - std::lgamma(jd + 1.0) - max_term);
        s0 += w;
        s1 += jd * w;
    }
    return {max_term + std::log(s0), s1 / s0};
}

// Regularized incomplete gamma, series (x < s+1) / continued fraction (x >= s+1).
double gamma_p_series(double s, double x) {
    double term = 1.0 / s;
    double sum = term;
    for (int n = 1; n < 10000; ++n) {
        term *= x / (s + n);
        sum += term;
        if (std::abs(term) < std::abs(sum) * 1e-16) break;
    }
    return sum * std::exp(-x + s * std::log(x) - std::lgamma(s));
}

double gamma_q_cf(double s, double x) {
    constexpr double tiny = 1e-300;
    double b = x + 1.0 - s;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 10000; ++i) {
        const double an = -i * (i - s);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-16) break;
    }
    return h * std::exp(-x + s * std::log(x) - std::lgamma(s));
}

double gamma_q(double s, double x) {
    if (x < 0.0 || s <= 0.0) throw std::invalid_argument("gamma_q: bad arguments");
    if (x == 0.0) return 1.0;
    if (x < s + 1.0) return 1.0 - gamma_p_series(s, x);
    return gamma_q_cf(s, x);
}

}  // namespace

double poisson_cdf(std::int64_t n, double lambda) {
    if (n < 0) return 0.0;
    if (lambda == 0.0) return 1.0;
    return gamma_q(static_cast<double>(n) + 1.0, lambda);
}

double log_poisson_interval(std::int64_t a, std::int64_t b, double lambda) {
    if (a > b) throw std::invalid_argument("log_poisson_interval: a > b");
    if (a < 0) a = 0;
    if (b <= 10000) {
        return poisson_interval_stats(a, b, std::log(lambda), lambda).log_prob;
    }
    // wide-interval fallback; practical censoring thresholds stay far below this
    const double hi = poisson_cdf(b, lambda);
    const double lo = a == 0 ? 0.0 : poisson_cdf(a - 1, lambda);
    const double p = hi - lo;
    return p > 0.0 ? std::log(p) : kNegInf;
}

namespace {

double cell_log_lik(std::int64_t count, bool censored, const std::optional<CensorInterval>& interval,
                    double lr) {
    const double lambda = std::exp(lr);
    if (censored) {
        if (interval->hi <= 10000) {
            return poisson_interval_stats(interval->lo, interval->hi, lr, lambda).log_prob;
        }
        return log_poisson_interval(interval->lo, interval->hi, lambda);
    }
    if (count == 0) return -lambda;  // 0*lr is NaN when lr = -inf
    return static_cast<double>(count) * lr - lambda - std::lgamma(static_cast<double>(count) + 1.0);
}

}  // namespace

void validate_dataset_shape(const Dataset& data) {
    const std::size_t cells = (1u << data.k) - 1u;
    if (data.k < 2 || data.counts.size() != cells || data.mask.size() != cells)
        throw std::invalid_argument("dataset: counts/mask length != 2^K - 1");
    for (std::size_t i = 0; i < cells; ++i) {
        const bool censored = data.mask[i] != 0;
        if (censored != (data.counts[i] == -1))
            throw std::invalid_argument("dataset: counts[i] = -1 iff mask[i] = 1 violated");
        if (!censored && data.counts[i] < 0)
            throw std::invalid_argument("dataset: negative uncensored count");
        if (censored && !data.interval)
            throw std::invalid_argument("dataset: censored cell without interval");
    }
}

LikelihoodEvaluator::LikelihoodEvaluator(const Dataset& data)
    : k_(data.k), counts_(data.counts), mask_(data.mask), interval_(data.interval) {
    validate_dataset_shape(data);
    design_ = design_matrix(data.k);
}

double LikelihoodEvaluator::operator()(const Eigen::VectorXd& theta_flat) const {
    if (theta_flat.size() != design_.cols())
        throw std::invalid_argument("LikelihoodEvaluator: theta dimension mismatch");
    const Eigen::VectorXd lr = design_ * theta_flat;
    double total = 0.0;
    for (std::size_t i = 0; i < counts_.size(); ++i)
        total += cell_log_lik(counts_[i], mask_[i] != 0, interval_, lr(static_cast<int>(i)));
    return total;
}

Eigen::VectorXd LikelihoodEvaluator::score(const Eigen::VectorXd& theta_flat) const {
    if (theta_flat.size() != design_.cols())
        throw std::invalid_argument("LikelihoodEvaluator: theta dimension mismatch");
    const Eigen::VectorXd lr = design_ * theta_flat;
    Eigen::VectorXd resid(lr.size());
    for (std::size_t i = 0; i < counts_.size(); ++i) {
        const double lambda = std::exp(lr(static_cast<int>(i)));
        if (mask_[i]) {
            const auto stats =
                poisson_interval_stats(interval_->lo, interval_->hi, lr(static_cast<int>(i)), lambda);
            resid(static_cast<int>(i)) = stats.cond_mean - lambda;
        } else {
            resid(static_cast<int>(i)) = static_cast<double>(counts_[i]) - lambda;
        }
    }
    return design_.transpose() * resid;
}

double log_likelihood(const Dataset& data, const ModelParams& theta) {
    if (theta.num_lists() != data.k)
        throw std::invalid_argument("log_likelihood: theta/data dimension mismatch");
    return LikelihoodEvaluator(data)(theta.flatten());
}

double log_prior(const ModelParams& theta, const PriorSpec& spec) {
    if (theta.alpha < spec.alpha_lo || theta.alpha > spec.alpha_hi) return kNegInf;
    double lp = -std::log(spec.alpha_hi - spec.alpha_lo);
    const double sd = spec.effect_sd;
    const double norm_const = -0.5 * kLog2Pi - std::log(sd);
    for (int i = 0; i < theta.beta.size(); ++i)
        lp += norm_const - 0.5 * theta.beta(i) * theta.beta(i) / (sd * sd);
    for (int i = 0; i < theta.gamma.size(); ++i)
        lp += norm_const - 0.5 * theta.gamma(i) * theta.gamma(i) / (sd * sd);
    return lp;
}

Eigen::VectorXd network_input(const Dataset& data) {
    validate_dataset_shape(data);
    const int cells = data.cells();
    Eigen::VectorXd x(2 * cells);
    for (int i = 0; i < cells; ++i) {
        const bool censored = data.mask[static_cast<std::size_t>(i)] != 0;
        x(i) = censored ? 0.0 : std::log1p(static_cast<double>(data.counts[static_cast<std::size_t>(i)]));
        x(cells + i) = censored ? 1.0 : 0.0;
    }
    return x;
}

double hidden_population(const ModelParams& theta) { return std::exp(theta.alpha); }

Eigen::MatrixXd design_matrix(int k) {
    const auto patterns = enumerate_patterns(k);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<int>(patterns.size()), param_dim(k));
    for (std::size_t i = 0; i < patterns.size(); ++i) {
        const auto& pat = patterns[i];
        const int row = static_cast<int>(i);
        a(row, 0) = 1.0;
        for (int p = 1; p <= k; ++p) {
            if (!pat.contains(p)) continue;
            a(row, p) = 1.0;
            for (int q = p + 1; q <= k; ++q)
                if (pat.contains(q)) a(row, 1 + k + pair_index(p, q, k)) = 1.0;
        }
    }
    return a;
}

}  // namespace mse
