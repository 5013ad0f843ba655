#pragma once

#include <optional>

#include <json.hpp>

#include "pathflow/cnf.hpp"
#include "pathflow/targets.hpp"
#include "pathflow/vec.hpp"

namespace pathflow::metrics {

enum class WeightOrigin { model_samples, target_samples };

// Log unnormalized importance weights log(p~/q) = -U(x) - log q(x).
// All downstream arithmetic stays in log space with max-subtraction.
struct WeightSet {
    Vec log_w;
    WeightOrigin origin = WeightOrigin::model_samples;
};

WeightSet importance_weights(const EnergyModel& target, const Vec& log_q,
                             const SampleBatch& x, WeightOrigin origin);

// (sum w)^2 / (N sum w^2) on model samples.
double ess_q(const WeightSet& w);

// (mean_p[w] * mean_p[1/w])^-1 on target samples; the reciprocal-weight
// factor supplies the unknown normalization constant.
double ess_p(const WeightSet& w);

// log of the self-normalizing constant estimate, log mean exp(log_w).
double log_z_hat(const WeightSet& w);
// leave-one-out jackknife standard error of log_z_hat
double log_z_jackknife_err(const WeightSet& w);

// Self-normalized estimate sum(w * obs) / sum(w); origin must be model_samples.
double expectation_under_p(const WeightSet& w, const Vec& obs_values);

// -mean log q_theta on the test set. Always exact divergence at 30 steps so
// the metric does not inherit training-time stochasticity.
double nll(const FieldParams& params, const EnergyModel& base, const SampleBatch& test_set,
           const cnf::IntegratorConfig& cfg);

// mean[log p - log q_theta] over target test samples; target must be normalized.
double forward_kl(const FieldParams& params, const EnergyModel& base, const EnergyModel& target,
                  const SampleBatch& test_set, const cnf::IntegratorConfig& cfg);

struct MetricsReport {
    double nll = 0.0;
    double ess_q = 0.0;
    double ess_p = 0.0;
    double log_z_hat = 0.0;
    double log_z_err = 0.0;
    std::optional<double> fwd_kl;
    double traj_len_mean = 0.0;
    nlohmann::json n_samples;  // per-metric sample counts

    nlohmann::json to_json() const;
};

}  // namespace pathflow::metrics
