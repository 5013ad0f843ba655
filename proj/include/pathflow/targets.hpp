#pragma once

#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "pathflow/rng.hpp"
#include "pathflow/vec.hpp"

namespace pathflow {

// Target / base density interface: energy U(x), force -grad U(x), and where
// available the exact normalized log-density and a direct sampler.
// Energy and log_prob use the normalized convention whenever a closed form
// exists, so energy(x) + log_prob(x) == 0 for those models.
class EnergyModel {
public:
    virtual ~EnergyModel() = default;

    virtual std::size_t dim() const = 0;
    virtual std::string kind() const = 0;

    virtual double energy(const double* x) const = 0;
    virtual void force(const double* x, double* out) const = 0;

    virtual bool has_exact_log_prob() const { return false; }
    virtual double log_prob(const double* x) const;

    virtual bool has_exact_sampler() const { return false; }
    virtual void draw(Rng& rng, double* out) const;

    virtual nlohmann::json descriptor() const = 0;

    double energy_v(const Vec& x) const { return energy(x.data()); }
    Vec force_v(const Vec& x) const {
        Vec f(dim());
        force(x.data(), f.data());
        return f;
    }
};

std::shared_ptr<EnergyModel> make_standard_normal(std::size_t dim);
// 4 equally weighted diagonal Gaussians in 2D; means ~ N(0,1), variances
// drawn as c + 0.01 with c ~ N(0,1) re-drawn until positive.
std::shared_ptr<EnergyModel> make_gmm2d(std::uint64_t seed);
std::shared_ptr<EnergyModel> make_gmm2d(const std::vector<double>& means,
                                        const std::vector<double>& variances);
std::shared_ptr<EnergyModel> make_lennard_jones(std::size_t n_particles, std::size_t space_dim);
std::shared_ptr<EnergyModel> make_double_well(std::size_t dim);
std::shared_ptr<EnergyModel> model_from_descriptor(const nlohmann::json& desc);

SampleBatch sample_exact(const EnergyModel& model, std::size_t n, std::uint64_t seed);

// Force-labeled dataset plus a provenance record of how it was made.
struct Dataset {
    SampleBatch samples;
    std::optional<SampleBatch> forces;
    nlohmann::json source;
};

struct MalaSettings {
    std::size_t n = 0;
    std::size_t burn_in = 1000;
    std::size_t thinning = 10;
    double step_size = 1e-2;
    std::uint64_t seed = 0;
};

// Metropolis-adjusted Langevin chain; step size is adapted during burn-in
// toward ~0.57 acceptance. Stores forces for every retained sample.
Dataset mcmc_sample(const EnergyModel& model, const MalaSettings& settings);

}  // namespace pathflow
