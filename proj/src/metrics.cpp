#include "pathflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pathflow::metrics {

namespace {

double max_of(const Vec& v) {
    double m = -1e300;
    for (double x : v) m = std::max(m, x);
    return m;
}

double log_mean_exp(const Vec& v) {
    if (v.empty()) throw std::invalid_argument("log_mean_exp: empty");
    double m = max_of(v);
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s / static_cast<double>(v.size()));
}

cnf::IntegratorConfig metric_integrator(const cnf::IntegratorConfig& cfg) {
    cnf::IntegratorConfig out = cfg;
    out.divergence_method = DivergenceMethod::exact;
    out.n_steps = 30;
    out.direction = cnf::Direction::inverse;
    return out;
}

}  // namespace

WeightSet importance_weights(const EnergyModel& target, const Vec& log_q,
                             const SampleBatch& x, WeightOrigin origin) {
    if (log_q.size() != x.n) throw std::invalid_argument("importance_weights: shape mismatch");
    WeightSet w;
    w.origin = origin;
    w.log_w.resize(x.n);
    for (std::size_t i = 0; i < x.n; ++i)
        w.log_w[i] = -target.energy(x.row(i)) - log_q[i];
    return w;
}

double ess_q(const WeightSet& w) {
    if (w.origin != WeightOrigin::model_samples)
        throw std::invalid_argument("ess_q: weights must come from model samples");
    if (w.log_w.empty()) throw std::invalid_argument("ess_q: empty weight set");
    double m = max_of(w.log_w);
    double s1 = 0.0, s2 = 0.0;
    for (double lw : w.log_w) {
        double e = std::exp(lw - m);
        s1 += e;
        s2 += e * e;
    }
    return s1 * s1 / (static_cast<double>(w.log_w.size()) * s2);
}

double ess_p(const WeightSet& w) {
    if (w.origin != WeightOrigin::target_samples)
        throw std::invalid_argument("ess_p: weights must come from target samples");
    if (w.log_w.empty()) throw std::invalid_argument("ess_p: empty weight set");
    Vec neg(w.log_w.size());
    for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -w.log_w[i];
    return std::exp(-(log_mean_exp(w.log_w) + log_mean_exp(neg)));
}

double log_z_hat(const WeightSet& w) { return log_mean_exp(w.log_w); }

double log_z_jackknife_err(const WeightSet& w) {
    const std::size_t n = w.log_w.size();
    if (n < 2) throw std::invalid_argument("log_z_jackknife_err: need >= 2 samples");
    double m = max_of(w.log_w);
    double total = 0.0;
    Vec e(n);
    for (std::size_t i = 0; i < n; ++i) {
        e[i] = std::exp(w.log_w[i] - m);
        total += e[i];
    }
    Vec loo(n);
    double mean_loo = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        loo[i] = std::log((total - e[i]) / static_cast<double>(n - 1)) + m;
        mean_loo += loo[i];
    }
    mean_loo /= static_cast<double>(n);
    double ss = 0.0;
    for (double l : loo) ss += (l - mean_loo) * (l - mean_loo);
    return std::sqrt(ss * static_cast<double>(n - 1) / static_cast<double>(n));
}

double expectation_under_p(const WeightSet& w, const Vec& obs_values) {
    if (w.origin != WeightOrigin::model_samples)
        throw std::invalid_argument("expectation_under_p: weights must come from model samples");
    if (w.log_w.size() != obs_values.size())
        throw std::invalid_argument("expectation_under_p: shape mismatch");
    if (w.log_w.empty()) throw std::invalid_argument("expectation_under_p: degenerate weights");
    double m = max_of(w.log_w);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < w.log_w.size(); ++i) {
        double e = std::exp(w.log_w[i] - m);
        num += e * obs_values[i];
        den += e;
    }
    if (den == 0.0 || !std::isfinite(den))
        throw std::runtime_error("expectation_under_p: degenerate weights");
    return num / den;
}

double nll(const FieldParams& params, const EnergyModel& base, const SampleBatch& test_set,
           const cnf::IntegratorConfig& cfg) {
    Vec lp = cnf::log_prob(params, base, test_set, metric_integrator(cfg));
    double s = 0.0;
    for (double v : lp) s += v;
    return -s / static_cast<double>(lp.size());
}

double forward_kl(const FieldParams& params, const EnergyModel& base, const EnergyModel& target,
                  const SampleBatch& test_set, const cnf::IntegratorConfig& cfg) {
    if (!target.has_exact_log_prob())
        throw std::runtime_error("forward_kl: target must have a normalized closed-form density");
    Vec lq = cnf::log_prob(params, base, test_set, metric_integrator(cfg));
    double s = 0.0;
    for (std::size_t i = 0; i < test_set.n; ++i)
        s += target.log_prob(test_set.row(i)) - lq[i];
    return s / static_cast<double>(test_set.n);
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j{{"nll", nll},
                     {"ess_q", ess_q},
                     {"ess_p", ess_p},
                     {"log_z_hat", log_z_hat},
                     {"log_z_err", log_z_err},
                     {"traj_len_mean", traj_len_mean},
                     {"n_samples", n_samples}};
    if (fwd_kl)
        j["fwd_kl"] = *fwd_kl;
    else
        j["fwd_kl"] = nullptr;
    return j;
}

}  // namespace pathflow::metrics
