#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pathflow/rng.hpp"
#include "pathflow/vec.hpp"

namespace pathflow {

enum class Activation { tanh_act, elu };

// Fully connected vector field v(x, t): input [x; t] of size D+1, hidden
// layers with the chosen activation, linear output of size D. The time
// coordinate enters as one extra scalar concatenated to x.
struct FieldArch {
    std::size_t input_dim = 0;             // D
    std::vector<std::size_t> hidden_widths;
    Activation activation = Activation::tanh_act;

    bool operator==(const FieldArch& o) const = default;
};

void validate_arch(const FieldArch& arch);
std::size_t parameter_count(const FieldArch& arch);

// Immutable snapshot of the flat parameter vector. The optimizer produces
// new snapshots and bumps `version`.
struct FieldParams {
    FieldArch arch;
    std::vector<double> values;
    std::int64_t version = 0;
};

// Rademacher probe for the stochastic trace estimator. Entries are +-1 by
// construction; any other content is rejected.
struct ProbeVector {
    std::vector<double> values;
    std::uint64_t seed_tag = 0;

    static ProbeVector draw(std::size_t dim, Rng& rng, std::uint64_t tag = 0);
    static ProbeVector from_values(std::vector<double> values, std::uint64_t tag = 0);
};

enum class DivergenceMethod { exact, hutchinson };

// Deterministic init: fan-in-scaled uniform weights U(-1/sqrt(fan_in),
// 1/sqrt(fan_in)), biases zero. Final-layer weights are scaled by 0.01 so
// the untrained field is near zero and the flow starts near the identity.
FieldParams init_params(const FieldArch& arch, std::uint64_t seed);

struct FieldCotangents {
    const double* d_dv = nullptr;  // length D, may be null for zero
    double d_ddiv = 0.0;
};

struct FieldVjpResult {
    Vec d_dx;      // length D
    Vec d_dtheta;  // parameter-shaped
};

// Derivative oracle for one architecture. Holds scratch buffers sized to the
// architecture; not thread-safe, create one per worker. All methods are pure
// functions of (params, x, t) and bitwise deterministic.
class FieldOracle {
public:
    explicit FieldOracle(const FieldArch& arch);

    const FieldArch& arch() const { return arch_; }

    // v(x, t)
    void eval(const FieldParams& p, const double* x, double t, double* v_out);
    Vec eval(const FieldParams& p, const Vec& x, double t);

    // dv/dx, row-major D x D
    std::vector<double> jacobian(const FieldParams& p, const double* x, double t);

    // exact: Tr(dv/dx). hutchinson: eps^T (dv/dx) eps for the given probe.
    double divergence(const FieldParams& p, const double* x, double t,
                      DivergenceMethod method, const ProbeVector* probe = nullptr);

    // d/dx of the divergence, with the SAME probe inside the differentiated
    // expression for the hutchinson mode.
    Vec grad_x_divergence(const FieldParams& p, const double* x, double t,
                          DivergenceMethod method, const ProbeVector* probe = nullptr);

    // Reverse-mode pullback of the pair (v, divergence):
    //   dL/dx = (dL/dv)^T dv/dx + (dL/ddiv) * grad_x_divergence
    // plus the matching parameter cotangent.
    FieldVjpResult vjp(const FieldParams& p, const double* x, double t,
                       const FieldCotangents& cot,
                       DivergenceMethod method = DivergenceMethod::exact,
                       const ProbeVector* probe = nullptr);

    // Same as vjp but accumulates the parameter cotangent into dtheta_accum
    // (length parameter_count) and writes dL/dx into dx_out (length D).
    void vjp_accumulate(const FieldParams& p, const double* x, double t,
                        const FieldCotangents& cot, DivergenceMethod method,
                        const ProbeVector* probe, double* dx_out, double* dtheta_accum);

private:
    struct Layer {
        std::size_t w_off, b_off, in, out;
    };

    void check_input(const FieldParams& p, const double* x, double t) const;
    void forward(const FieldParams& p, const double* x, double t);
    // Tangent pass with dx-tangent `dir` (length D, t-tangent zero).
    void jvp(const FieldParams& p, const double* dir);
    // Accumulates grad over (input, theta) of a^T v, using stored primal state.
    void reverse_first(const FieldParams& p, const double* a, double* dtheta_accum);
    // Accumulates grad over (input, theta) of a^T (dv/dx * dir), using stored
    // primal + tangent state.
    void reverse_second(const FieldParams& p, const double* a, double scale,
                        double* dtheta_accum);

    FieldArch arch_;
    std::vector<Layer> layers_;
    std::size_t n_params_ = 0;
    std::size_t n_layers_ = 0;

    // primal, tangent and adjoint buffers per layer boundary
    std::vector<Vec> h_, z_, dh_, dz_;
    std::vector<Vec> p_adj_, q_adj_;
    Vec input_grad_;  // D+1 accumulator for reverse passes
};

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

}  // namespace pathflow
