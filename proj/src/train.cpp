#include "pathflow/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "pathflow/metrics.hpp"
#include "pathflow/parallel.hpp"

namespace pathflow::train {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Per-sample gradient accumulation in fixed chunks of 16 samples, reduced in
// chunk order, so the result does not depend on the thread schedule.
Vec accumulate_sample_grads(std::size_t n, std::size_t n_params,
                            const std::function<void(std::size_t, double*)>& sample_grad) {
    constexpr std::size_t kChunk = 16;
    std::size_t n_chunks = (n + kChunk - 1) / kChunk;
    std::vector<Vec> chunk_grads(n_chunks);
    parallel_for(n_chunks, [&](std::size_t c) {
        chunk_grads[c].assign(n_params, 0.0);
        std::size_t hi = std::min(n, (c + 1) * kChunk);
        for (std::size_t i = c * kChunk; i < hi; ++i) sample_grad(i, chunk_grads[c].data());
    });
    Vec total(n_params, 0.0);
    for (auto& g : chunk_grads) axpy(1.0, g, total);
    return total;
}

void check_pair_shapes(const SampleBatch& x0, const SampleBatch& x1) {
    if (x0.n != x1.n || x0.dim != x1.dim)
        throw std::invalid_argument("cfm: batch shape mismatch");
}

}  // namespace

GradEstimate cfm_loss_grad(const FieldParams& params, const SampleBatch& x0,
                           const SampleBatch& x1, Coupling coupling, double sigma,
                           std::uint64_t seed) {
    check_pair_shapes(x0, x1);
    if (sigma <= 0.0) throw std::invalid_argument("cfm: sigma must be > 0");
    const std::size_t n = x0.n, d = x0.dim;
    const std::size_t np = params.values.size();

    std::vector<std::size_t> pi(n);
    std::iota(pi.begin(), pi.end(), 0);
    if (coupling == Coupling::ot) pi = ot_pair(x0, x1);

    Vec losses(n, 0.0);
    Rng root(seed ^ 0xcf31cf31cf31cf31ull);
    Vec grad = accumulate_sample_grads(n, np, [&](std::size_t i, double* acc) {
        Rng rng = root.stream(i);
        FieldOracle oracle(params.arch);
        const double* a = x0.row(i);
        const double* b = x1.row(pi[i]);
        double t = rng.uniform();
        Vec x(d), u(d), r(d);
        for (std::size_t k = 0; k < d; ++k) {
            u[k] = b[k] - a[k];
            x[k] = t * b[k] + (1.0 - t) * a[k] + sigma * rng.normal();
        }
        Vec v = oracle.eval(params, x, t);
        double l = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            r[k] = 2.0 / static_cast<double>(n) * (v[k] - u[k]);
            l += (v[k] - u[k]) * (v[k] - u[k]);
        }
        losses[i] = l;
        FieldCotangents cot;
        cot.d_dv = r.data();
        Vec dx(d, 0.0);
        oracle.vjp_accumulate(params, x.data(), t, cot, DivergenceMethod::exact, nullptr,
                              dx.data(), acc);
    });

    GradEstimate g;
    g.values = std::move(grad);
    g.estimator = Estimator::fm;
    g.batch_size = n;
    g.aux = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(n);
    return g;
}

double cfm_mse(const FieldParams& params, const SampleBatch& x0, const SampleBatch& x1,
               double sigma, std::uint64_t seed) {
    check_pair_shapes(x0, x1);
    const std::size_t n = x0.n, d = x0.dim;
    Vec losses(n, 0.0);
    Rng root(seed ^ 0xcf31cf31cf31cf31ull);
    parallel_for(n, [&](std::size_t i) {
        Rng rng = root.stream(i);
        FieldOracle oracle(params.arch);
        const double* a = x0.row(i);
        const double* b = x1.row(i);
        double t = rng.uniform();
        Vec x(d);
        for (std::size_t k = 0; k < d; ++k)
            x[k] = t * b[k] + (1.0 - t) * a[k] + sigma * rng.normal();
        Vec v = oracle.eval(params, x, t);
        double l = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            double r = v[k] - (b[k] - a[k]);
            l += r * r;
        }
        losses[i] = l;
    });
    return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(n);
}

std::vector<std::size_t> ot_pair(const SampleBatch& x0, const SampleBatch& x1) {
    check_pair_shapes(x0, x1);
    const std::size_t n = x0.n;
    if (n > 512) throw std::invalid_argument("ot_pair: batch size must be <= 512");
    if (n == 0) return {};

    std::vector<double> cost(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < x0.dim; ++k) {
                double dxy = x0.row(i)[k] - x1.row(j)[k];
                s += dxy * dxy;
            }
            cost[i * n + j] = s;
        }

    // Shortest augmenting path assignment (Jonker-Volgenant flavor).
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            std::size_t i0 = p[j0], j1 = 0;
            double delta = inf;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> pi(n);
    for (std::size_t j = 1; j <= n; ++j)
        if (p[j] != 0) pi[p[j] - 1] = j - 1;
    return pi;
}

double pairing_cost(const SampleBatch& x0, const SampleBatch& x1,
                    const std::vector<std::size_t>& pi) {
    check_pair_shapes(x0, x1);
    double c = 0.0;
    for (std::size_t i = 0; i < x0.n; ++i) {
        for (std::size_t k = 0; k < x0.dim; ++k) {
            double dxy = x0.row(i)[k] - x1.row(pi[i])[k];
            c += dxy * dxy;
        }
    }
    return c;
}

GradEstimate ml_grad(const FieldParams& params, const EnergyModel& base,
                     const SampleBatch& x1, const cnf::IntegratorConfig& cfg) {
    if (!base.has_exact_log_prob())
        throw std::runtime_error("ml_grad: base must have a closed-form density");
    const std::size_t n = x1.n;
    cnf::IntegratorConfig inv_cfg = cfg;
    inv_cfg.direction = cnf::Direction::inverse;
    cnf::FlowResult inv = cnf::inverse_map(params, x1, inv_cfg);

    SampleBatch abar0(n, x1.dim);
    double nll_acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        base.force(inv.x_end.row(i), abar0.row(i));  // grad log q0 at x0
        nll_acc -= base.log_prob(inv.x_end.row(i)) - inv.log_det[i];
    }
    Vec dsum = cnf::adjoint_logprob_grad(params, inv.x_end, abar0, cfg);

    GradEstimate g;
    g.values.resize(dsum.size());
    for (std::size_t k = 0; k < dsum.size(); ++k)
        g.values[k] = -dsum[k] / static_cast<double>(n);
    g.estimator = Estimator::ml;
    g.batch_size = n;
    g.aux = nll_acc / static_cast<double>(n);
    return g;
}

GradEstimate pg_grad(const FieldParams& params, const EnergyModel& base,
                     const EnergyModel& target, const SampleBatch& x1,
                     const SampleBatch* forces, const cnf::IntegratorConfig& cfg) {
    if (!base.has_exact_log_prob())
        throw std::runtime_error("pg_grad: base must have a closed-form density");
    const std::size_t n = x1.n, d = x1.dim;
    SampleBatch g1(n, d);
    if (forces) {
        if (forces->n != n || forces->dim != d)
            throw std::invalid_argument("pg_grad: forces shape mismatch");
        g1 = *forces;
    } else {
        for (std::size_t i = 0; i < n; ++i) target.force(x1.row(i), g1.row(i));
    }

    cnf::IntegratorConfig inv_cfg = cfg;
    inv_cfg.direction = cnf::Direction::inverse;
    cnf::AugmentedResult aug = cnf::augmented_inverse(params, x1, g1, inv_cfg);

    SampleBatch cot(n, d);
    Vec fq(d);
    double nll_acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        base.force(aug.x0.row(i), fq.data());
        for (std::size_t k = 0; k < d; ++k)
            cot.row(i)[k] = (aug.grad_log_p0.row(i)[k] - fq[k]) / static_cast<double>(n);
        nll_acc -= base.log_prob(aug.x0.row(i)) - aug.log_det[i];
    }

    GradEstimate g;
    g.values = cnf::adjoint_param_grad(params, aug.x0, cot, cfg);
    g.estimator = Estimator::pg;
    g.batch_size = n;
    g.aux = nll_acc / static_cast<double>(n);
    return g;
}

OptimizerState make_optimizer_state(std::size_t n_params) {
    OptimizerState s;
    s.m.assign(n_params, 0.0);
    s.v.assign(n_params, 0.0);
    return s;
}

std::pair<OptimizerState, FieldParams> adam_step(const OptimizerState& opt,
                                                 const FieldParams& params,
                                                 const GradEstimate& grad, double lr) {
    if (opt.m.size() != params.values.size() || grad.values.size() != params.values.size())
        throw std::invalid_argument("adam_step: shape mismatch");
    OptimizerState s = opt;
    FieldParams p = params;
    s.step += 1;
    double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        double g = grad.values[i];
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
        double mhat = s.m[i] / bc1;
        double vhat = s.v[i] / bc2;
        p.values[i] -= lr * mhat / (std::sqrt(vhat) + s.eps);
    }
    p.version += 1;
    return {std::move(s), std::move(p)};
}

GradEstimate clip_and_accumulate(const std::vector<GradEstimate>& grads,
                                 std::optional<double> clip_norm) {
    if (grads.empty()) throw std::invalid_argument("clip_and_accumulate: no gradients");
    GradEstimate out;
    out.estimator = grads.front().estimator;
    out.values.assign(grads.front().values.size(), 0.0);
    out.batch_size = 0;
    double aux = 0.0;
    for (const auto& g : grads) {
        if (g.values.size() != out.values.size() || g.estimator != out.estimator)
            throw std::invalid_argument("clip_and_accumulate: mixed gradient shapes or kinds");
        axpy(1.0, g.values, out.values);
        out.batch_size += g.batch_size;
        aux += g.aux;
    }
    double inv = 1.0 / static_cast<double>(grads.size());
    for (auto& v : out.values) v *= inv;
    out.aux = aux * inv;
    if (clip_norm) {
        double nrm = norm2(out.values);
        if (nrm > *clip_norm && nrm > 0.0) {
            double scale = *clip_norm / nrm;
            for (auto& v : out.values) v *= scale;
        }
    }
    return out;
}

namespace {

struct Batcher {
    const Dataset& ds;
    std::size_t bs;
    Rng rng;
    std::vector<std::size_t> order;
    std::size_t pos = 0;

    Batcher(const Dataset& d, std::size_t batch, std::uint64_t seed)
        : ds(d), bs(std::min(batch, d.samples.n)), rng(seed ^ 0xba7cba7cba7cba7cull) {
        order.resize(ds.samples.n);
        std::iota(order.begin(), order.end(), 0);
        shuffle();
    }

    void shuffle() {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.integer(i)]);
        pos = 0;
    }

    std::vector<std::size_t> next() {
        if (pos + bs > order.size()) shuffle();
        std::vector<std::size_t> idx(order.begin() + pos, order.begin() + pos + bs);
        pos += bs;
        return idx;
    }
};

SampleBatch gather(const SampleBatch& src, const std::vector<std::size_t>& idx) {
    SampleBatch out(idx.size(), src.dim);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(src.row(idx[i]), src.row(idx[i]) + src.dim, out.row(i));
    return out;
}

}  // namespace

std::string to_string(Stage s) {
    switch (s) {
        case Stage::fm_pretrain: return "fm_pretrain";
        case Stage::pg_finetune: return "pg_finetune";
        case Stage::ml_finetune: return "ml_finetune";
        case Stage::fm_finetune: return "fm_finetune";
    }
    return "?";
}

Stage stage_from_string(const std::string& s) {
    if (s == "fm_pretrain") return Stage::fm_pretrain;
    if (s == "pg_finetune") return Stage::pg_finetune;
    if (s == "ml_finetune") return Stage::ml_finetune;
    if (s == "fm_finetune") return Stage::fm_finetune;
    throw std::invalid_argument("unknown stage: " + s);
}

std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::cfm_standard: return "cfm_standard";
        case LossKind::cfm_ot: return "cfm_ot";
        case LossKind::ml: return "ml";
        case LossKind::pg: return "pg";
    }
    return "?";
}

LossKind loss_from_string(const std::string& s) {
    if (s == "cfm_standard") return LossKind::cfm_standard;
    if (s == "cfm_ot") return LossKind::cfm_ot;
    if (s == "ml") return LossKind::ml;
    if (s == "pg") return LossKind::pg;
    throw std::invalid_argument("unknown loss: " + s);
}

DivergenceMethod default_divergence_for_dim(std::size_t dim) {
    return dim <= 16 ? DivergenceMethod::exact : DivergenceMethod::hutchinson;
}

TrainResult run_training(Stage stage, const TrainConfig& config, const Dataset& dataset,
                         const EvalContext& eval, FieldParams initial, OptimizerState opt,
                         const EvalHook& hook) {
    if (config.sigma <= 0.0) throw std::invalid_argument("run_training: sigma must be > 0");
    if (config.lr <= 0.0) throw std::invalid_argument("run_training: lr must be > 0");
    if (config.accumulation_steps < 1)
        throw std::invalid_argument("run_training: accumulation_steps must be >= 1");
    const bool is_fm = stage == Stage::fm_pretrain || stage == Stage::fm_finetune;
    const bool is_pg = stage == Stage::pg_finetune;
    if (is_pg && !dataset.forces)
        throw std::runtime_error("run_training: pg_finetune needs a force-labeled dataset");

    TrainResult result;
    result.params = std::move(initial);
    result.opt = std::move(opt);
    if (result.opt.m.empty()) result.opt = make_optimizer_state(result.params.values.size());

    const bool budget_mode = config.wall_seconds.has_value();
    const double budget = budget_mode ? *config.wall_seconds : 0.0;
    const Coupling coupling =
        config.loss == LossKind::cfm_ot ? Coupling::ot : Coupling::independent;

    Batcher batcher(dataset, config.batch_size, config.seed);
    Rng noise_root(config.seed ^ 0x6e015e6e015e6e01ull);

    auto t_start = Clock::now();
    double loss_acc = 0.0;
    long loss_count = 0;
    double eval_time_est = 0.0;
    double step_time_est = 0.0;
    double last_eval_at = 0.0;

    auto do_eval = [&](long step, double wall, double grad_norm) {
        auto e0 = Clock::now();
        TrainLogRow row;
        row.stage = to_string(stage);
        row.step = step;
        row.wall_seconds = wall;
        row.loss = loss_count ? loss_acc / loss_count : std::numeric_limits<double>::quiet_NaN();
        row.grad_norm = grad_norm;
        loss_acc = 0.0;
        loss_count = 0;

        const FieldParams& p = result.params;
        std::size_t n_eval = std::min(eval.nll_samples, eval.test_set.n);
        if (n_eval > 0 && eval.base->has_exact_log_prob()) {
            SampleBatch sub(n_eval, eval.test_set.dim);
            std::copy(eval.test_set.data.begin(),
                      eval.test_set.data.begin() + n_eval * eval.test_set.dim,
                      sub.data.begin());
            cnf::IntegratorConfig mcfg = config.integrator;
            mcfg.n_steps = 30;
            mcfg.divergence_method = DivergenceMethod::exact;
            Vec lq = cnf::log_prob(p, *eval.base, sub, mcfg);
            double mean_lq = 0.0;
            for (double v : lq) mean_lq += v;
            mean_lq /= static_cast<double>(n_eval);
            row.nll = -mean_lq;
            if (eval.target->has_exact_log_prob()) {
                double mean_lp = 0.0;
                for (std::size_t i = 0; i < n_eval; ++i)
                    mean_lp += eval.target->log_prob(sub.row(i));
                row.fwd_kl = mean_lp / static_cast<double>(n_eval) - mean_lq;
            }
            // ESS_p from the same log q values
            metrics::WeightSet wp;
            wp.origin = metrics::WeightOrigin::target_samples;
            wp.log_w.resize(n_eval);
            for (std::size_t i = 0; i < n_eval; ++i)
                wp.log_w[i] = -eval.target->energy(sub.row(i)) - lq[i];
            row.ess_p = metrics::ess_p(wp);
        }
        if (eval.ess_q_samples > 0 && eval.base->has_exact_sampler()) {
            cnf::IntegratorConfig scfg = config.integrator;
            scfg.divergence_method = DivergenceMethod::exact;
            auto [xs, lqs] = cnf::sample(p, *eval.base, eval.ess_q_samples, eval.eval_seed, scfg);
            metrics::WeightSet wq;
            wq.origin = metrics::WeightOrigin::model_samples;
            wq.log_w.resize(xs.n);
            for (std::size_t i = 0; i < xs.n; ++i) {
                double en;
                try {
                    en = eval.target->energy(xs.row(i));
                } catch (const std::domain_error&) {
                    en = 1e300;
                }
                wq.log_w[i] = -en - lqs[i];
            }
            row.ess_q = metrics::ess_q(wq);
        }
        if (eval.traj_samples > 0 && eval.base->has_exact_sampler()) {
            SampleBatch tx = sample_exact(*eval.base, eval.traj_samples, eval.eval_seed + 1);
            cnf::IntegratorConfig tcfg = config.integrator;
            tcfg.direction = cnf::Direction::forward;
            row.traj_len = cnf::trajectory_length(p, tx, tcfg).second;
        }
        {
            std::size_t n_mse = std::min<std::size_t>(512, eval.test_set.n);
            if (n_mse > 0 && eval.base->has_exact_sampler()) {
                SampleBatch x1m(n_mse, eval.test_set.dim);
                std::copy(eval.test_set.data.begin(),
                          eval.test_set.data.begin() + n_mse * eval.test_set.dim,
                          x1m.data.begin());
                SampleBatch x0m = sample_exact(*eval.base, n_mse, eval.eval_seed + 2);
                row.cfm_mse = cfm_mse(p, x0m, x1m, config.sigma, eval.eval_seed + 3);
            }
        }
        result.log.push_back(row);
        if (hook) hook(row, result.params);
        eval_time_est = 0.5 * eval_time_est + 0.5 * seconds_since(e0);
    };

    // optimizer-step worker; returns grad norm
    auto do_step = [&](long step) -> double {
        std::vector<GradEstimate> micro;
        micro.reserve(config.accumulation_steps);
        for (int a = 0; a < config.accumulation_steps; ++a) {
            auto idx = batcher.next();
            SampleBatch x1 = gather(dataset.samples, idx);
            if (is_fm) {
                SampleBatch x0 = sample_exact(*eval.base, x1.n,
                                              noise_root.stream(step * 1000 + a).next_u64());
                micro.push_back(cfm_loss_grad(result.params, x0, x1, coupling, config.sigma,
                                              noise_root.stream(step * 1000 + a + 500).next_u64()));
            } else if (is_pg) {
                SampleBatch f = gather(*dataset.forces, idx);
                micro.push_back(pg_grad(result.params, *eval.base, *eval.target, x1, &f,
                                        config.integrator));
            } else {
                micro.push_back(ml_grad(result.params, *eval.base, x1, config.integrator));
            }
        }
        GradEstimate g = clip_and_accumulate(micro, config.grad_clip_norm);
        // a non-finite gradient would poison the Adam state; refuse the update
        if (!all_finite(g.values))
            throw std::domain_error("non-finite gradient at step " + std::to_string(step));
        loss_acc += g.aux;
        ++loss_count;
        auto [new_opt, new_params] = adam_step(result.opt, result.params, g, config.lr);
        result.opt = std::move(new_opt);
        result.params = std::move(new_params);
        return norm2(g.values);
    };

    long step = 0;
    double grad_norm = 0.0;
    try {
        if (budget_mode) {
            do_eval(0, 0.0, 0.0);
            last_eval_at = seconds_since(t_start);
            bool did_final = false;
            while (true) {
                double elapsed = seconds_since(t_start);
                double reserve = 1.2 * eval_time_est + step_time_est;
                if (elapsed + reserve >= budget) {
                    do_eval(step, seconds_since(t_start), grad_norm);
                    did_final = true;
                    break;
                }
                if (elapsed - last_eval_at >= config.eval_every_seconds) {
                    do_eval(step, elapsed, grad_norm);
                    last_eval_at = seconds_since(t_start);
                }
                auto s0 = Clock::now();
                grad_norm = do_step(step);
                ++step;
                double st = seconds_since(s0);
                step_time_est = step_time_est == 0.0 ? st : 0.7 * step_time_est + 0.3 * st;
            }
            if (!did_final) do_eval(step, seconds_since(t_start), grad_norm);
            double remaining = budget - seconds_since(t_start);
            if (remaining > 0.0)
                std::this_thread::sleep_for(std::chrono::duration<double>(remaining));
        } else {
            std::size_t micro_per_epoch =
                std::max<std::size_t>(1, dataset.samples.n / std::max<std::size_t>(1, config.batch_size));
            long total_steps = static_cast<long>(
                (static_cast<std::size_t>(std::max(config.epochs, 0)) * micro_per_epoch) /
                static_cast<std::size_t>(config.accumulation_steps));
            for (; step < total_steps; ++step) {
                grad_norm = do_step(step);
                if (config.eval_every > 0 && (step + 1) % config.eval_every == 0)
                    do_eval(step + 1, seconds_since(t_start), grad_norm);
            }
            bool have_final = !result.log.empty() && result.log.back().step == step;
            if (total_steps > 0 && !have_final)
                do_eval(step, seconds_since(t_start), grad_norm);
        }
    } catch (const cnf::IntegrationDiverged& e) {
        result.diverged = true;
        result.divergence_note = e.what();
    } catch (const std::domain_error& e) {
        // non-finite state or gradient outside the integrator's own check
        result.diverged = true;
        result.divergence_note = e.what();
    }
    result.train_seconds = seconds_since(t_start);
    return result;
}

}  // namespace pathflow::train
