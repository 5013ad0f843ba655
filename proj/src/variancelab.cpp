#include "pathflow/variancelab.hpp"

#include <cmath>

#include "pathflow/cnf.hpp"
#include "pathflow/parallel.hpp"
#include "pathflow/targets.hpp"
#include "pathflow/train.hpp"

namespace pathflow::variancelab {

namespace {

ToyStats stats_of(const Vec& values) {
    ToyStats s;
    double n = static_cast<double>(values.size());
    for (double v : values) s.mean += v;
    s.mean /= n;
    for (double v : values) s.var += (v - s.mean) * (v - s.mean);
    s.var /= (n - 1.0);
    return s;
}

}  // namespace

FieldParams constant_field_params(std::size_t d, double theta) {
    FieldArch arch;
    arch.input_dim = d;
    arch.hidden_widths = {1};
    arch.activation = Activation::tanh_act;
    FieldParams p;
    p.arch = arch;
    p.values.assign(parameter_count(arch), 0.0);
    // output biases are the trailing d entries of the flat layout
    for (std::size_t k = 0; k < d; ++k)
        p.values[p.values.size() - d + k] = theta;
    return p;
}

ToyStats toy_fm_variance(const ToyConfig& cfg) {
    Vec g(cfg.trials);
    Rng root(cfg.seed ^ 0xfee1f00dfee1f00dull);
    parallel_for(cfg.trials, [&](std::size_t trial) {
        Rng rng = root.stream(trial);
        double s = 0.0;
        for (std::size_t i = 0; i < cfg.n * cfg.d; ++i)
            s += cfg.theta + rng.normal() - rng.normal();  // x0 - x1 per coordinate
        g[trial] = 2.0 * s / static_cast<double>(cfg.n * cfg.d);
    });
    return stats_of(g);
}

ToyStats toy_ml_variance(const ToyConfig& cfg) {
    Vec g(cfg.trials);
    Rng root(cfg.seed ^ 0x11a511a511a511a5ull);
    parallel_for(cfg.trials, [&](std::size_t trial) {
        Rng rng = root.stream(trial);
        double s = 0.0;
        for (std::size_t i = 0; i < cfg.n * cfg.d; ++i)
            s += cfg.theta - rng.normal();
        g[trial] = s / static_cast<double>(cfg.n);
    });
    return stats_of(g);
}

namespace {

Vec engine_pg_samples(const ToyConfig& cfg) {
    FieldParams params = constant_field_params(cfg.d, cfg.theta);
    auto base = make_standard_normal(cfg.d);
    auto target = make_standard_normal(cfg.d);
    cnf::IntegratorConfig icfg;
    icfg.n_steps = cfg.n_steps;
    icfg.divergence_method = DivergenceMethod::exact;

    Vec g(cfg.trials);
    Rng root(cfg.seed ^ 0x9c0ffee09c0ffee0ull);
    // trials are independent; the engine parallelizes per sample internally,
    // so run trials sequentially with per-trial seeds
    for (std::size_t trial = 0; trial < cfg.trials; ++trial) {
        std::uint64_t tseed = root.stream(trial).next_u64();
        SampleBatch x1 = sample_exact(*target, cfg.n, tseed);
        train::GradEstimate ge =
            train::pg_grad(params, *base, *target, x1, nullptr, icfg);
        double s = 0.0;
        for (std::size_t k = 0; k < cfg.d; ++k)
            s += ge.values[ge.values.size() - cfg.d + k];
        g[trial] = s;
    }
    return g;
}

}  // namespace

double toy_pg_max_abs(const ToyConfig& cfg) {
    Vec g = engine_pg_samples(cfg);
    double mx = 0.0;
    for (double v : g) mx = std::max(mx, std::fabs(v));
    return mx;
}

ToyStats toy_pg_stats(const ToyConfig& cfg) { return stats_of(engine_pg_samples(cfg)); }

}  // namespace pathflow::variancelab
