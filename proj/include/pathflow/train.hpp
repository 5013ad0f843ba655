#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pathflow/cnf.hpp"
#include "pathflow/field.hpp"
#include "pathflow/targets.hpp"

namespace pathflow::train {

enum class LossKind { cfm_standard, cfm_ot, ml, pg };
enum class Stage { fm_pretrain, pg_finetune, ml_finetune, fm_finetune };
enum class Coupling { independent, ot };
enum class Estimator { fm, ml, pg };

struct TrainConfig {
    LossKind loss = LossKind::cfm_standard;
    std::size_t batch_size = 256;
    double lr = 1e-2;
    double sigma = 1e-2;  // conditional-path std
    int epochs = 1;
    std::optional<double> grad_clip_norm;
    int accumulation_steps = 1;
    std::uint64_t seed = 0;
    cnf::IntegratorConfig integrator;
    int eval_every = 20;                        // steps (epoch mode)
    std::optional<double> wall_seconds;         // budget mode when set
    double eval_every_seconds = 5.0;            // cadence in budget mode
};

struct GradEstimate {
    Vec values;
    Estimator estimator = Estimator::fm;
    std::size_t batch_size = 0;
    double aux = 0.0;  // loss value where defined
};

// Conditional flow matching: per pair, t ~ U(0,1), x ~ N(t*x1+(1-t)*x0, sigma^2 I),
// target field x1 - x0; loss = mean_i ||v(x,t) - (x1-x0)||^2. coupling=ot first
// reorders pairs with ot_pair.
GradEstimate cfm_loss_grad(const FieldParams& params, const SampleBatch& x0,
                           const SampleBatch& x1, Coupling coupling, double sigma,
                           std::uint64_t seed);

// Loss-only CFM objective on a fixed pairing, for evaluation traces.
double cfm_mse(const FieldParams& params, const SampleBatch& x0, const SampleBatch& x1,
               double sigma, std::uint64_t seed);

// Exact squared-euclidean assignment (Jonker-Volgonant style shortest
// augmenting paths); returns pi with pairs (x0_i, x1_pi(i)).
std::vector<std::size_t> ot_pair(const SampleBatch& x0, const SampleBatch& x1);
double pairing_cost(const SampleBatch& x0, const SampleBatch& x1,
                    const std::vector<std::size_t>& pi);

// G_ML = -(1/N) sum_i d/dtheta [log q0(T^-1(x1_i)) - logdet], total derivative
// via inverse integration + continuous adjoint with divergence source.
GradEstimate ml_grad(const FieldParams& params, const EnergyModel& base,
                     const SampleBatch& x1, const cnf::IntegratorConfig& cfg);

// Path-gradient estimator: augmented inverse with the target force as initial
// condition, cotangent (1/N)(grad log p0_theta - grad log q0) at x0, then the
// plain adjoint. The score term is excluded by construction.
GradEstimate pg_grad(const FieldParams& params, const EnergyModel& base,
                     const EnergyModel& target, const SampleBatch& x1,
                     const SampleBatch* forces, const cnf::IntegratorConfig& cfg);

struct OptimizerState {
    Vec m, v;
    long step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

OptimizerState make_optimizer_state(std::size_t n_params);

// Standard Adam with bias correction; pure function of its inputs.
std::pair<OptimizerState, FieldParams> adam_step(const OptimizerState& opt,
                                                 const FieldParams& params,
                                                 const GradEstimate& grad, double lr);

// Mean of the gradients, then global-norm clip.
GradEstimate clip_and_accumulate(const std::vector<GradEstimate>& grads,
                                 std::optional<double> clip_norm);

struct TrainLogRow {
    std::string stage;
    long step = 0;
    double wall_seconds = 0.0;
    double loss = 0.0;
    double fwd_kl = std::numeric_limits<double>::quiet_NaN();
    double nll = std::numeric_limits<double>::quiet_NaN();
    double ess_q = std::numeric_limits<double>::quiet_NaN();
    double ess_p = std::numeric_limits<double>::quiet_NaN();
    double traj_len = std::numeric_limits<double>::quiet_NaN();
    double grad_norm = 0.0;
    double cfm_mse = std::numeric_limits<double>::quiet_NaN();
};

struct EvalContext {
    std::shared_ptr<EnergyModel> base;
    std::shared_ptr<EnergyModel> target;
    SampleBatch test_set;
    std::size_t ess_q_samples = 2048;
    std::size_t nll_samples = 512;      // prefix of test_set used for NLL / fwd KL
    std::size_t traj_samples = 256;
    std::uint64_t eval_seed = 1234;
};

struct TrainResult {
    FieldParams params;
    OptimizerState opt;
    std::vector<TrainLogRow> log;
    bool diverged = false;
    std::string divergence_note;
    double train_seconds = 0.0;  // excludes evaluation time
};

// hook is called after every evaluation with the row and current params.
using EvalHook = std::function<void(const TrainLogRow&, const FieldParams&)>;

TrainResult run_training(Stage stage, const TrainConfig& config, const Dataset& dataset,
                         const EvalContext& eval, FieldParams initial, OptimizerState opt,
                         const EvalHook& hook = {});

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);
std::string to_string(LossKind k);
LossKind loss_from_string(const std::string& s);

// exact for D <= 16, hutchinson above
DivergenceMethod default_divergence_for_dim(std::size_t dim);

}  // namespace pathflow::train
