#include "pathflow/cnf.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>

#include "pathflow/parallel.hpp"

namespace pathflow::cnf {

namespace {

constexpr double kStageOffset[4] = {0.0, 0.5, 0.5, 1.0};
constexpr double kStageWeight[4] = {1.0, 2.0, 2.0, 1.0};

struct SampleCtx {
    FieldOracle oracle;
    const FieldParams& params;
    const IntegratorConfig& cfg;
    Rng probe_rng;
    bool hutch;
    std::size_t d;
    long evals = 0;

    SampleCtx(const FieldParams& p, const IntegratorConfig& c, std::size_t sample_idx)
        : oracle(p.arch),
          params(p),
          cfg(c),
          probe_rng(Rng(c.probe_seed ^ 0x70b3d5a7e9c1f235ull).stream(sample_idx)),
          hutch(c.divergence_method == DivergenceMethod::hutchinson),
          d(p.arch.input_dim) {}

    ProbeVector fresh_probe() { return ProbeVector::draw(d, probe_rng); }
};

// Runs body(i) over all samples, rethrowing the first (lowest-index) failure.
void for_each_sample(std::size_t n, const std::function<void(std::size_t)>& body) {
    std::vector<std::exception_ptr> errors(n);
    parallel_for(n, [&](std::size_t i) {
        try {
            body(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    });
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// Transport (optionally with the log-det ODE) for one sample, in place.
void transport_one(SampleCtx& ctx, std::size_t sample_idx, double* x, bool track_logdet,
                   double& log_det, double& length) {
    const std::size_t d = ctx.d;
    const int n_steps = ctx.cfg.n_steps;
    const bool fwd = ctx.cfg.direction == Direction::forward;
    const double s = fwd ? 1.0 : -1.0;
    const double t0 = fwd ? 0.0 : 1.0;
    const double h = 1.0 / n_steps;

    Vec xs(d), v(d), dx(d);
    Vec kx[4];
    for (auto& k : kx) k.resize(d);
    double kl[4] = {0, 0, 0, 0};

    log_det = 0.0;
    length = 0.0;
    for (int step = 0; step < n_steps; ++step) {
        double tau_k = step * h;
        for (int j = 0; j < 4; ++j) {
            if (j == 0) {
                std::copy(x, x + d, xs.begin());
            } else {
                double a = (j == 3) ? h : 0.5 * h;
                for (std::size_t i = 0; i < d; ++i) xs[i] = x[i] + a * kx[j - 1][i];
            }
            double t = t0 + s * (tau_k + kStageOffset[j] * h);
            ctx.oracle.eval(ctx.params, xs.data(), t, v.data());
            ++ctx.evals;
            for (std::size_t i = 0; i < d; ++i) kx[j][i] = s * v[i];
            if (track_logdet) {
                ProbeVector probe;
                if (ctx.hutch) probe = ctx.fresh_probe();
                double div = ctx.oracle.divergence(ctx.params, xs.data(), t,
                                                   ctx.cfg.divergence_method,
                                                   ctx.hutch ? &probe : nullptr);
                ++ctx.evals;
                kl[j] = -s * div;
            }
        }
        double ldet_inc = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            dx[i] = h / 6.0 *
                    (kx[0][i] + 2.0 * kx[1][i] + 2.0 * kx[2][i] + kx[3][i]);
            x[i] += dx[i];
        }
        if (track_logdet)
            ldet_inc = h / 6.0 * (kl[0] + 2.0 * kl[1] + 2.0 * kl[2] + kl[3]);
        log_det += ldet_inc;
        length += norm2(dx.data(), d);
        if (!all_finite(x, d) || !std::isfinite(log_det))
            throw IntegrationDiverged(sample_idx, step);
    }
}

FlowResult run_map(const FieldParams& params, const SampleBatch& batch,
                   const IntegratorConfig& cfg, bool track_logdet) {
    if (batch.dim != params.arch.input_dim)
        throw std::invalid_argument("flow: batch dimension does not match field");
    if (cfg.n_steps < 1) throw std::invalid_argument("flow: n_steps must be >= 1");
    FlowResult res;
    res.x_end = batch;
    res.log_det.assign(batch.n, 0.0);
    res.traj_length.assign(batch.n, 0.0);
    std::vector<long> evals(batch.n, 0);
    for_each_sample(batch.n, [&](std::size_t i) {
        SampleCtx ctx(params, cfg, i);
        transport_one(ctx, i, res.x_end.row(i), track_logdet, res.log_det[i],
                      res.traj_length[i]);
        evals[i] = ctx.evals;
    });
    for (long e : evals) res.n_field_evals += e;
    return res;
}

}  // namespace

FlowResult forward_map(const FieldParams& params, const SampleBatch& x0,
                       const IntegratorConfig& cfg) {
    if (cfg.direction != Direction::forward)
        throw std::invalid_argument("forward_map: cfg.direction must be forward");
    return run_map(params, x0, cfg, true);
}

FlowResult inverse_map(const FieldParams& params, const SampleBatch& x1,
                       const IntegratorConfig& cfg) {
    if (cfg.direction != Direction::inverse)
        throw std::invalid_argument("inverse_map: cfg.direction must be inverse");
    return run_map(params, x1, cfg, true);
}

Vec log_prob(const FieldParams& params, const EnergyModel& base, const SampleBatch& x1,
             const IntegratorConfig& cfg) {
    if (!base.has_exact_log_prob())
        throw std::runtime_error("log_prob: base must have a closed-form density");
    IntegratorConfig inv_cfg = cfg;
    inv_cfg.direction = Direction::inverse;
    FlowResult r = inverse_map(params, x1, inv_cfg);
    Vec lp(x1.n);
    for (std::size_t i = 0; i < x1.n; ++i)
        lp[i] = base.log_prob(r.x_end.row(i)) - r.log_det[i];
    return lp;
}

std::pair<SampleBatch, Vec> sample(const FieldParams& params, const EnergyModel& base,
                                   std::size_t n, std::uint64_t seed,
                                   const IntegratorConfig& cfg) {
    SampleBatch x0 = sample_exact(base, n, seed);
    Vec base_lp(n);
    for (std::size_t i = 0; i < n; ++i) base_lp[i] = base.log_prob(x0.row(i));
    IntegratorConfig fwd_cfg = cfg;
    fwd_cfg.direction = Direction::forward;
    FlowResult r = forward_map(params, x0, fwd_cfg);
    Vec log_q(n);
    for (std::size_t i = 0; i < n; ++i) log_q[i] = base_lp[i] + r.log_det[i];
    return {std::move(r.x_end), std::move(log_q)};
}

AugmentedResult augmented_inverse(const FieldParams& params, const SampleBatch& x1,
                                  const SampleBatch& grad_log_p1,
                                  const IntegratorConfig& cfg) {
    if (x1.n != grad_log_p1.n || x1.dim != grad_log_p1.dim)
        throw std::invalid_argument("augmented_inverse: shape mismatch");
    if (x1.dim != params.arch.input_dim)
        throw std::invalid_argument("augmented_inverse: batch dimension does not match field");

    AugmentedResult res;
    res.x0 = x1;
    res.grad_log_p0 = grad_log_p1;
    res.log_det.assign(x1.n, 0.0);
    std::vector<long> evals(x1.n, 0);

    const std::size_t d = x1.dim;
    const int n_steps = cfg.n_steps;
    const double h = 1.0 / n_steps;

    for_each_sample(x1.n, [&](std::size_t si) {
        SampleCtx ctx(params, cfg, si);
        double* x = res.x0.row(si);
        double* g = res.grad_log_p0.row(si);
        double ldet = 0.0;

        Vec xs(d), gs(d), v(d), u(d);
        Vec kx[4], kg[4];
        for (auto& k : kx) k.resize(d);
        for (auto& k : kg) k.resize(d);
        double kl[4];

        // tau = 1 - t, integrating tau: 0 -> 1
        for (int step = 0; step < n_steps; ++step) {
            double tau_k = step * h;
            for (int j = 0; j < 4; ++j) {
                if (j == 0) {
                    std::copy(x, x + d, xs.begin());
                    std::copy(g, g + d, gs.begin());
                } else {
                    double a = (j == 3) ? h : 0.5 * h;
                    for (std::size_t i = 0; i < d; ++i) {
                        xs[i] = x[i] + a * kx[j - 1][i];
                        gs[i] = g[i] + a * kg[j - 1][i];
                    }
                }
                double t = 1.0 - (tau_k + kStageOffset[j] * h);
                ProbeVector probe;
                const ProbeVector* pp = nullptr;
                if (ctx.hutch) {
                    probe = ctx.fresh_probe();
                    pp = &probe;
                }
                ctx.oracle.eval(ctx.params, xs.data(), t, v.data());
                ++ctx.evals;
                double div = ctx.oracle.divergence(ctx.params, xs.data(), t,
                                                   cfg.divergence_method, pp);
                ++ctx.evals;
                FieldCotangents cot;
                cot.d_dv = gs.data();
                cot.d_ddiv = 1.0;
                std::fill(u.begin(), u.end(), 0.0);
                ctx.oracle.vjp_accumulate(ctx.params, xs.data(), t, cot,
                                          cfg.divergence_method, pp, u.data(), nullptr);
                ++ctx.evals;
                for (std::size_t i = 0; i < d; ++i) {
                    kx[j][i] = -v[i];
                    kg[j][i] = u[i];  // dg/dtau = +g^T J + grad Tr
                }
                kl[j] = div;  // inverse convention: +int Tr dt
            }
            for (std::size_t i = 0; i < d; ++i) {
                x[i] += h / 6.0 * (kx[0][i] + 2 * kx[1][i] + 2 * kx[2][i] + kx[3][i]);
                g[i] += h / 6.0 * (kg[0][i] + 2 * kg[1][i] + 2 * kg[2][i] + kg[3][i]);
            }
            ldet += h / 6.0 * (kl[0] + 2 * kl[1] + 2 * kl[2] + kl[3]);
            if (!all_finite(x, d) || !all_finite(g, d) || !std::isfinite(ldet))
                throw IntegrationDiverged(si, step);
        }
        res.log_det[si] = ldet;
        evals[si] = ctx.evals;
    });
    for (long e : evals) res.n_field_evals += e;
    return res;
}

namespace {

// Shared implementation for the two forward adjoint runs. with_divergence
// selects the log-prob variant (divergence source terms included).
Vec adjoint_run(const FieldParams& params, const SampleBatch& x0, const SampleBatch& a0,
                const IntegratorConfig& cfg, bool with_divergence, long* n_field_evals) {
    if (x0.n != a0.n || x0.dim != a0.dim)
        throw std::invalid_argument("adjoint: shape mismatch");
    if (x0.dim != params.arch.input_dim)
        throw std::invalid_argument("adjoint: batch dimension does not match field");

    const std::size_t d = x0.dim;
    const std::size_t np = params.values.size();
    const int n_steps = cfg.n_steps;
    const double h = 1.0 / n_steps;

    std::vector<Vec> per_sample_grad(x0.n);
    std::vector<long> evals(x0.n, 0);

    for_each_sample(x0.n, [&](std::size_t si) {
        SampleCtx ctx(params, cfg, si);
        Vec x(x0.row(si), x0.row(si) + d);
        Vec a(a0.row(si), a0.row(si) + d);
        Vec grad(np, 0.0), stage_theta(np);

        Vec xs(d), as(d), v(d), u(d);
        Vec kx[4], ka[4];
        for (auto& k : kx) k.resize(d);
        for (auto& k : ka) k.resize(d);

        for (int step = 0; step < n_steps; ++step) {
            double t_k = step * h;
            for (int j = 0; j < 4; ++j) {
                if (j == 0) {
                    xs = x;
                    as = a;
                } else {
                    double c = (j == 3) ? h : 0.5 * h;
                    for (std::size_t i = 0; i < d; ++i) {
                        xs[i] = x[i] + c * kx[j - 1][i];
                        as[i] = a[i] + c * ka[j - 1][i];
                    }
                }
                double t = t_k + kStageOffset[j] * h;
                ProbeVector probe;
                const ProbeVector* pp = nullptr;
                if (ctx.hutch && with_divergence) {
                    probe = ctx.fresh_probe();
                    pp = &probe;
                }
                ctx.oracle.eval(ctx.params, xs.data(), t, v.data());
                ++ctx.evals;
                FieldCotangents cot;
                cot.d_dv = as.data();
                cot.d_ddiv = with_divergence ? 1.0 : 0.0;
                std::fill(u.begin(), u.end(), 0.0);
                std::fill(stage_theta.begin(), stage_theta.end(), 0.0);
                ctx.oracle.vjp_accumulate(ctx.params, xs.data(), t, cot,
                                          cfg.divergence_method, pp, u.data(),
                                          stage_theta.data());
                ctx.evals += with_divergence ? 2 : 1;
                for (std::size_t i = 0; i < d; ++i) {
                    kx[j][i] = v[i];
                    ka[j][i] = -u[i];
                }
                // quadrature component: dG/dt = -(a^T dv/dtheta [+ dTr/dtheta])
                double w = -h / 6.0 * kStageWeight[j];
                axpy(w, stage_theta, grad);
            }
            for (std::size_t i = 0; i < d; ++i) {
                x[i] += h / 6.0 * (kx[0][i] + 2 * kx[1][i] + 2 * kx[2][i] + kx[3][i]);
                a[i] += h / 6.0 * (ka[0][i] + 2 * ka[1][i] + 2 * ka[2][i] + ka[3][i]);
            }
            if (!all_finite(x) || !all_finite(a)) throw IntegrationDiverged(si, step);
        }
        if (!all_finite(grad)) throw IntegrationDiverged(si, n_steps);
        per_sample_grad[si] = std::move(grad);
        evals[si] = ctx.evals;
    });

    // deterministic reduction in sample order
    Vec total(np, 0.0);
    for (auto& g : per_sample_grad) axpy(1.0, g, total);
    if (n_field_evals) {
        long e = 0;
        for (long v : evals) e += v;
        *n_field_evals += e;
    }
    return total;
}

}  // namespace

Vec adjoint_param_grad(const FieldParams& params, const SampleBatch& x0,
                       const SampleBatch& cotangent_at_x0, const IntegratorConfig& cfg,
                       long* n_field_evals) {
    return adjoint_run(params, x0, cotangent_at_x0, cfg, false, n_field_evals);
}

Vec adjoint_logprob_grad(const FieldParams& params, const SampleBatch& x0,
                         const SampleBatch& grad_log_q0_at_x0, const IntegratorConfig& cfg,
                         long* n_field_evals) {
    return adjoint_run(params, x0, grad_log_q0_at_x0, cfg, true, n_field_evals);
}

std::pair<Vec, double> trajectory_length(const FieldParams& params, const SampleBatch& x,
                                         const IntegratorConfig& cfg) {
    FlowResult r = run_map(params, x, cfg, false);
    double mean = 0.0;
    for (double l : r.traj_length) mean += l;
    if (!r.traj_length.empty()) mean /= static_cast<double>(r.traj_length.size());
    return {std::move(r.traj_length), mean};
}

}  // namespace pathflow::cnf
