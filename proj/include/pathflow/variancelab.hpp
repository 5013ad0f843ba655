#pragma once

#include <cstdint>

#include "pathflow/field.hpp"

namespace pathflow::variancelab {

// Analytic toy configuration: base and target both N(0, I_D), the field is
// the constant v = theta * 1 represented through the production MLP (all
// weights zero, output bias = theta per coordinate).
struct ToyConfig {
    std::size_t n = 16;      // batch size
    std::size_t d = 2;       // dimension
    std::size_t trials = 10000;
    double theta = 0.0;
    std::uint64_t seed = 0;
    int n_steps = 15;        // for the engine-path PG estimator
};

struct ToyStats {
    double mean = 0.0;
    double var = 0.0;
};

// G_FM per trial for the flat loss (no t/sigma jitter, per-dimension mean):
// G = 2/(ND) sum_i sum_d (theta + x0 - x1). Closed-form variance 8/(ND)
// at theta = 0.
ToyStats toy_fm_variance(const ToyConfig& cfg);

// G_ML in closed form for the constant-shift flow: G = (1/N) sum_i sum_d
// (theta - x1). Variance D/N at the optimum (Fisher information D).
ToyStats toy_ml_variance(const ToyConfig& cfg);

// G_PG through the full engine path (augmented inverse + adjoint on the
// degenerate constant field); the scalar toy gradient is the sum of the
// output-bias components. Returns max |G| over trials.
double toy_pg_max_abs(const ToyConfig& cfg);

// mean/var of the engine-path scalar G_PG (for perturbed theta).
ToyStats toy_pg_stats(const ToyConfig& cfg);

// The constant field used by the engine path.
FieldParams constant_field_params(std::size_t d, double theta);

}  // namespace pathflow::variancelab
