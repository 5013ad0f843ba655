#include "pathflow/targets.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pathflow {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;

void check_finite_input(const double* x, std::size_t d, const char* who) {
    if (!all_finite(x, d)) throw std::domain_error(std::string(who) + ": non-finite input");
}
}  // namespace

double EnergyModel::log_prob(const double*) const {
    throw std::runtime_error("log_prob: no closed-form density for model kind '" + kind() + "'");
}

void EnergyModel::draw(Rng&, double*) const {
    throw std::runtime_error("sample_exact: no closed-form sampler for model kind '" + kind() + "'");
}

// ---------------------------------------------------------------------------

class StandardNormal final : public EnergyModel {
public:
    explicit StandardNormal(std::size_t dim) : dim_(dim) {
        if (dim == 0) throw std::invalid_argument("standard_normal: dim must be positive");
    }

    std::size_t dim() const override { return dim_; }
    std::string kind() const override { return "standard_normal"; }

    double energy(const double* x) const override {
        check_finite_input(x, dim_, "energy");
        return 0.5 * dot(x, x, dim_) + 0.5 * dim_ * std::log(kTwoPi);
    }

    void force(const double* x, double* out) const override {
        check_finite_input(x, dim_, "force");
        for (std::size_t i = 0; i < dim_; ++i) out[i] = -x[i];
    }

    bool has_exact_log_prob() const override { return true; }
    double log_prob(const double* x) const override { return -energy(x); }

    bool has_exact_sampler() const override { return true; }
    void draw(Rng& rng, double* out) const override {
        for (std::size_t i = 0; i < dim_; ++i) out[i] = rng.normal();
    }

    nlohmann::json descriptor() const override {
        return {{"kind", "standard_normal"}, {"dim", dim_}};
    }

private:
    std::size_t dim_;
};

// ---------------------------------------------------------------------------

class Gmm2d final : public EnergyModel {
public:
    Gmm2d(std::vector<double> means, std::vector<double> variances)
        : means_(std::move(means)), vars_(std::move(variances)) {
        if (means_.size() != 8 || vars_.size() != 8)
            throw std::invalid_argument("gmm2d: expects 4 components x 2 dims");
        for (double v : vars_)
            if (v <= 0.0) throw std::invalid_argument("gmm2d: variances must be positive");
    }

    std::size_t dim() const override { return 2; }
    std::string kind() const override { return "gmm2d"; }

    double energy(const double* x) const override { return -log_prob(x); }

    bool has_exact_log_prob() const override { return true; }
    double log_prob(const double* x) const override {
        check_finite_input(x, 2, "log_prob");
        double terms[4];
        double mx = -1e300;
        for (int k = 0; k < 4; ++k) {
            terms[k] = component_log_density(k, x) + std::log(0.25);
            if (terms[k] > mx) mx = terms[k];
        }
        double s = 0.0;
        for (int k = 0; k < 4; ++k) s += std::exp(terms[k] - mx);
        return mx + std::log(s);
    }

    void force(const double* x, double* out) const override {
        check_finite_input(x, 2, "force");
        // grad log p = sum_k r_k * (mu_k - x) / sigma_k^2 with responsibilities r_k
        double logw[4];
        double mx = -1e300;
        for (int k = 0; k < 4; ++k) {
            logw[k] = component_log_density(k, x);
            if (logw[k] > mx) mx = logw[k];
        }
        double z = 0.0;
        for (int k = 0; k < 4; ++k) z += std::exp(logw[k] - mx);
        out[0] = out[1] = 0.0;
        for (int k = 0; k < 4; ++k) {
            double r = std::exp(logw[k] - mx) / z;
            out[0] += r * (means_[2 * k] - x[0]) / vars_[2 * k];
            out[1] += r * (means_[2 * k + 1] - x[1]) / vars_[2 * k + 1];
        }
    }

    bool has_exact_sampler() const override { return true; }
    void draw(Rng& rng, double* out) const override {
        int k = static_cast<int>(rng.integer(4));
        out[0] = means_[2 * k] + std::sqrt(vars_[2 * k]) * rng.normal();
        out[1] = means_[2 * k + 1] + std::sqrt(vars_[2 * k + 1]) * rng.normal();
    }

    nlohmann::json descriptor() const override {
        return {{"kind", "gmm2d"}, {"means", means_}, {"variances", vars_}};
    }

private:
    double component_log_density(int k, const double* x) const {
        double s1 = vars_[2 * k], s2 = vars_[2 * k + 1];
        double d1 = x[0] - means_[2 * k], d2 = x[1] - means_[2 * k + 1];
        return -0.5 * (d1 * d1 / s1 + d2 * d2 / s2) - 0.5 * (std::log(kTwoPi * s1) + std::log(kTwoPi * s2));
    }

    std::vector<double> means_;  // [a_0 b_0 a_1 b_1 ...]
    std::vector<double> vars_;
};

// ---------------------------------------------------------------------------

class LennardJones final : public EnergyModel {
public:
    LennardJones(std::size_t n_particles, std::size_t space_dim)
        : n_(n_particles), sd_(space_dim) {
        if (n_ < 2 || sd_ == 0) throw std::invalid_argument("lennard_jones: need >= 2 particles");
    }

    std::size_t dim() const override { return n_ * sd_; }
    std::string kind() const override { return "lennard_jones"; }

    double energy(const double* x) const override {
        check_finite_input(x, dim(), "energy");
        double u = 0.0;
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = i + 1; j < n_; ++j) {
                double d2 = dist2(x, i, j);
                if (d2 < 1e-24) throw std::domain_error("lennard_jones: coincident particles");
                double inv6 = 1.0 / (d2 * d2 * d2);
                u += inv6 * inv6 - 2.0 * inv6;
            }
        }
        return u;
    }

    void force(const double* x, double* out) const override {
        check_finite_input(x, dim(), "force");
        std::fill(out, out + dim(), 0.0);
        for (std::size_t i = 0; i < n_; ++i) {
            for (std::size_t j = i + 1; j < n_; ++j) {
                double d2 = dist2(x, i, j);
                if (d2 < 1e-24) throw std::domain_error("lennard_jones: coincident particles");
                double inv2 = 1.0 / d2;
                double inv6 = inv2 * inv2 * inv2;
                // dU/d(d^2) for the pair term (1/d^12 - 2/d^6)
                double du_dd2 = -6.0 * inv6 * inv6 * inv2 + 6.0 * inv6 * inv2;
                for (std::size_t c = 0; c < sd_; ++c) {
                    double dx = x[i * sd_ + c] - x[j * sd_ + c];
                    double f = -2.0 * du_dd2 * dx;  // force = -grad U
                    out[i * sd_ + c] += f;
                    out[j * sd_ + c] -= f;
                }
            }
        }
    }

    nlohmann::json descriptor() const override {
        return {{"kind", "lennard_jones"}, {"n_particles", n_}, {"space_dim", sd_}};
    }

    std::size_t n_particles() const { return n_; }
    std::size_t space_dim() const { return sd_; }

private:
    double dist2(const double* x, std::size_t i, std::size_t j) const {
        double s = 0.0;
        for (std::size_t c = 0; c < sd_; ++c) {
            double dx = x[i * sd_ + c] - x[j * sd_ + c];
            s += dx * dx;
        }
        return s;
    }

    std::size_t n_, sd_;
};

// ---------------------------------------------------------------------------

class DoubleWell final : public EnergyModel {
public:
    explicit DoubleWell(std::size_t dim) : dim_(dim) {
        if (dim == 0) throw std::invalid_argument("double_well: dim must be positive");
    }

    std::size_t dim() const override { return dim_; }
    std::string kind() const override { return "double_well"; }

    // U = sum_d (x_d^2 - 1)^2, unnormalized
    double energy(const double* x) const override {
        check_finite_input(x, dim_, "energy");
        double u = 0.0;
        for (std::size_t i = 0; i < dim_; ++i) {
            double q = x[i] * x[i] - 1.0;
            u += q * q;
        }
        return u;
    }

    void force(const double* x, double* out) const override {
        check_finite_input(x, dim_, "force");
        for (std::size_t i = 0; i < dim_; ++i)
            out[i] = -4.0 * x[i] * (x[i] * x[i] - 1.0);
    }

    nlohmann::json descriptor() const override {
        return {{"kind", "double_well"}, {"dim", dim_}};
    }

private:
    std::size_t dim_;
};

// ---------------------------------------------------------------------------

std::shared_ptr<EnergyModel> make_standard_normal(std::size_t dim) {
    return std::make_shared<StandardNormal>(dim);
}

std::shared_ptr<EnergyModel> make_gmm2d(std::uint64_t seed) {
    Rng rng(seed ^ 0xa5a5a5a5deadbeefull);
    std::vector<double> means(8), vars(8);
    for (int k = 0; k < 8; ++k) means[k] = rng.normal();
    for (int k = 0; k < 8; ++k) {
        double v;
        do {
            v = rng.normal() + 0.01;
        } while (v <= 0.0);
        vars[k] = v;
    }
    return std::make_shared<Gmm2d>(means, vars);
}

std::shared_ptr<EnergyModel> make_gmm2d(const std::vector<double>& means,
                                        const std::vector<double>& variances) {
    return std::make_shared<Gmm2d>(means, variances);
}

std::shared_ptr<EnergyModel> make_lennard_jones(std::size_t n_particles, std::size_t space_dim) {
    return std::make_shared<LennardJones>(n_particles, space_dim);
}

std::shared_ptr<EnergyModel> make_double_well(std::size_t dim) {
    return std::make_shared<DoubleWell>(dim);
}

std::shared_ptr<EnergyModel> model_from_descriptor(const nlohmann::json& desc) {
    const std::string kind = desc.at("kind").get<std::string>();
    if (kind == "standard_normal") return make_standard_normal(desc.at("dim").get<std::size_t>());
    if (kind == "gmm2d") {
        if (desc.contains("means"))
            return make_gmm2d(desc.at("means").get<std::vector<double>>(),
                              desc.at("variances").get<std::vector<double>>());
        return make_gmm2d(desc.at("seed").get<std::uint64_t>());
    }
    if (kind == "lennard_jones")
        return make_lennard_jones(desc.at("n_particles").get<std::size_t>(),
                                  desc.at("space_dim").get<std::size_t>());
    if (kind == "double_well") return make_double_well(desc.at("dim").get<std::size_t>());
    throw std::invalid_argument("unknown model kind: " + kind);
}

SampleBatch sample_exact(const EnergyModel& model, std::size_t n, std::uint64_t seed) {
    if (!model.has_exact_sampler())
        throw std::runtime_error("sample_exact: no closed-form sampler for model kind '" +
                                 model.kind() + "'");
    SampleBatch batch(n, model.dim());
    Rng rng(seed ^ 0x5eedbea75eedbea7ull);
    for (std::size_t i = 0; i < n; ++i) model.draw(rng, batch.row(i));
    return batch;
}

// ---------------------------------------------------------------------------

namespace {

// Spread-out start state; LJ particles must not coincide.
Vec mala_init_state(const EnergyModel& model, Rng& rng) {
    Vec x(model.dim());
    if (auto* lj = dynamic_cast<const LennardJones*>(&model)) {
        std::size_t n = lj->n_particles(), sd = lj->space_dim();
        if (sd == 2) {
            // one particle at the center, then rings of 6k at radius k
            std::size_t placed = 0;
            x[0] = x[1] = 0.0;
            ++placed;
            for (std::size_t ring = 1; placed < n; ++ring) {
                std::size_t slots = 6 * ring;
                for (std::size_t s = 0; s < slots && placed < n; ++s, ++placed) {
                    double ang = kTwoPi * s / slots;
                    x[placed * 2] = ring * std::cos(ang);
                    x[placed * 2 + 1] = ring * std::sin(ang);
                }
            }
        } else {
            // cubic grid, spacing 1.1
            std::size_t side = 1;
            while (side * side * side < n) ++side;
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t r = i;
                for (std::size_t c = 0; c < sd; ++c) {
                    x[i * sd + c] = 1.1 * static_cast<double>(r % side);
                    r /= side;
                }
            }
        }
        for (auto& v : x) v += 0.01 * rng.normal();
    } else {
        for (auto& v : x) v = rng.normal();
    }
    return x;
}

}  // namespace

Dataset mcmc_sample(const EnergyModel& model, const MalaSettings& settings) {
    if (settings.step_size <= 0.0) throw std::invalid_argument("mcmc_sample: step_size must be > 0");
    const std::size_t d = model.dim();
    const std::size_t thin = settings.thinning == 0 ? 1 : settings.thinning;

    Rng rng(settings.seed ^ 0x3141592653589793ull);
    Vec x = mala_init_state(model, rng);
    double logp = -model.energy(x.data());
    Vec fx = model.force_v(x);

    double tau = settings.step_size;
    Vec prop(d), fprop(d);
    std::size_t accepted = 0, proposed = 0;
    std::size_t window_acc = 0, window_n = 0;

    Dataset out;
    out.samples = SampleBatch(settings.n, d);
    out.forces = SampleBatch(settings.n, d);

    std::size_t total_steps = settings.burn_in + settings.n * thin;
    std::size_t kept = 0;
    for (std::size_t step = 0; step < total_steps; ++step) {
        double sq = std::sqrt(2.0 * tau);
        for (std::size_t i = 0; i < d; ++i)
            prop[i] = x[i] + tau * fx[i] + sq * rng.normal();
        double logp_prop;
        bool ok = true;
        try {
            logp_prop = -model.energy(prop.data());
            model.force(prop.data(), fprop.data());
            ok = std::isfinite(logp_prop) && all_finite(fprop);
        } catch (const std::domain_error&) {
            ok = false;
            logp_prop = -1e300;
        }
        bool accept = false;
        if (ok) {
            // log q(x|x') - log q(x'|x)
            double fwd = 0.0, bwd = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                double df = prop[i] - x[i] - tau * fx[i];
                double db = x[i] - prop[i] - tau * fprop[i];
                fwd += df * df;
                bwd += db * db;
            }
            double log_alpha = logp_prop - logp + (fwd - bwd) / (4.0 * tau);
            accept = std::log(rng.uniform() + 1e-300) < log_alpha;
        }
        ++proposed;
        ++window_n;
        if (accept) {
            x = prop;
            fx = fprop;
            logp = logp_prop;
            ++accepted;
            ++window_acc;
        }
        // step-size adaptation during burn-in only, clamped to a decade around
        // the configured value: near-flat energy regions accept at any step
        // size and would otherwise drive tau to divergence
        if (step < settings.burn_in && window_n >= 100) {
            double rate = static_cast<double>(window_acc) / window_n;
            if (rate < 0.45)
                tau *= 0.8;
            else if (rate > 0.70)
                tau *= 1.2;
            tau = std::clamp(tau, 0.1 * settings.step_size, 10.0 * settings.step_size);
            window_acc = window_n = 0;
        }
        if (step >= settings.burn_in && (step - settings.burn_in) % thin == 0 && kept < settings.n) {
            std::copy(x.begin(), x.end(), out.samples.row(kept));
            std::copy(fx.begin(), fx.end(), out.forces->row(kept));
            ++kept;
        }
    }

    double acc_rate = proposed ? static_cast<double>(accepted) / proposed : 0.0;
    out.source = {{"sampler", "mala"},
                  {"model", model.descriptor()},
                  {"n", settings.n},
                  {"burn_in", settings.burn_in},
                  {"thinning", thin},
                  {"initial_step_size", settings.step_size},
                  {"final_step_size", tau},
                  {"acceptance_rate", acc_rate},
                  {"seed", settings.seed}};
    if (acc_rate < 0.1 || acc_rate > 0.9)
        out.source["warning"] = "acceptance rate outside [0.1, 0.9] after tuning";
    return out;
}

}  // namespace pathflow
