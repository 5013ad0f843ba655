#pragma once

#include <stdexcept>
#include <utility>

#include "pathflow/field.hpp"
#include "pathflow/targets.hpp"
#include "pathflow/vec.hpp"

namespace pathflow::cnf {

enum class Direction { forward, inverse };

// Fixed-step RK4 only. `probe_seed` roots the per-sample Rademacher streams
// used in hutchinson mode; one fresh probe per field evaluation, shared
// between the divergence value and its x-gradient within that evaluation.
struct IntegratorConfig {
    int n_steps = 15;
    Direction direction = Direction::forward;
    DivergenceMethod divergence_method = DivergenceMethod::exact;
    std::uint64_t probe_seed = 0;
};

// n_field_evals counts one per ODE component evaluated per RK4 stage:
// transport map and divergence count one each, the combined adjoint pullback
// one, the adjoint-with-divergence pullback two. Under this convention a
// forward/inverse map costs 2*4*n_steps evaluations per sample and a full
// path-gradient pass (augmented inverse + adjoint) costs 5*4*n_steps,
// i.e. 300 at 15 steps.
struct FlowResult {
    SampleBatch x_end;
    Vec log_det;      // forward: -int Tr dt; inverse: +int Tr dt (antisymmetric)
    Vec traj_length;  // polygonal length over RK4 macro-steps
    long n_field_evals = 0;
};

struct AugmentedResult {
    SampleBatch x0;
    SampleBatch grad_log_p0;  // d log p_{0,theta} / d x0 rows
    Vec log_det;              // inverse convention, +int Tr dt
    long n_field_evals = 0;
};

class IntegrationDiverged : public std::runtime_error {
public:
    IntegrationDiverged(std::size_t sample, int step)
        : std::runtime_error("integration diverged at sample " + std::to_string(sample) +
                             ", step " + std::to_string(step)),
          sample_index(sample),
          step_index(step) {}
    std::size_t sample_index;
    int step_index;
};

FlowResult forward_map(const FieldParams& params, const SampleBatch& x0,
                       const IntegratorConfig& cfg);
FlowResult inverse_map(const FieldParams& params, const SampleBatch& x1,
                       const IntegratorConfig& cfg);

// log q(x1) = log q0(T^-1(x1)) - log_det_inverse, with exact divergence.
Vec log_prob(const FieldParams& params, const EnergyModel& base, const SampleBatch& x1,
             const IntegratorConfig& cfg);

// Draws base samples, pushes them forward; log q comes from the base
// log-density and the forward log-det without re-integration.
std::pair<SampleBatch, Vec> sample(const FieldParams& params, const EnergyModel& base,
                                   std::size_t n, std::uint64_t seed,
                                   const IntegratorConfig& cfg);

// Integrates x together with g = d log p_t / d x from t=1 to 0:
//   dg/dt = -g^T dv/dx - d/dx Tr(dv/dx),  g(1) = grad_log_p1 rows.
AugmentedResult augmented_inverse(const FieldParams& params, const SampleBatch& x1,
                                  const SampleBatch& grad_log_p1, const IntegratorConfig& cfg);

// dL/dtheta for L = sum_i <c_i, T^-1(x1_i)> with the cotangent rows c
// treated as constants. Re-integrates x forward from x0 alongside the
// adjoint a (a(0) = c, da/dt = -a^T dv/dx) and accumulates
// -int a^T dv/dtheta dt. Returns the parameter gradient summed over rows.
Vec adjoint_param_grad(const FieldParams& params, const SampleBatch& x0,
                       const SampleBatch& cotangent_at_x0, const IntegratorConfig& cfg,
                       long* n_field_evals = nullptr);

// dL/dtheta summed over samples for L_i = log q_theta(x1_i), expressed
// through the trajectory from x0_i: adjoint with divergence source,
//   abar(0) = grad log q0(x0), dabar/dt = -abar^T dv/dx - grad_x Tr,
//   dL/dtheta = -int (abar^T dv/dtheta + dTr/dtheta) dt.
Vec adjoint_logprob_grad(const FieldParams& params, const SampleBatch& x0,
                         const SampleBatch& grad_log_q0_at_x0, const IntegratorConfig& cfg,
                         long* n_field_evals = nullptr);

// Per-sample polygonal trajectory length and its mean; x-transport only.
std::pair<Vec, double> trajectory_length(const FieldParams& params, const SampleBatch& x,
                                         const IntegratorConfig& cfg);

}  // namespace pathflow::cnf
