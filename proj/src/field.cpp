#include "pathflow/field.hpp"

#include <cmath>
#include <stdexcept>

namespace pathflow {

namespace {

inline void act_eval(Activation a, const Vec& z, Vec& h) {
    if (a == Activation::tanh_act) {
        for (std::size_t i = 0; i < z.size(); ++i) h[i] = std::tanh(z[i]);
    } else {
        for (std::size_t i = 0; i < z.size(); ++i) h[i] = z[i] > 0.0 ? z[i] : std::expm1(z[i]);
    }
}

inline double act_d1(Activation a, double z) {
    if (a == Activation::tanh_act) {
        double s = std::tanh(z);
        return 1.0 - s * s;
    }
    return z > 0.0 ? 1.0 : std::exp(z);
}

// Second derivative; for elu this is valid almost everywhere (discontinuous
// at z == 0, where the z > 0 branch value 0 is used).
inline double act_d2(Activation a, double z) {
    if (a == Activation::tanh_act) {
        double s = std::tanh(z);
        return -2.0 * s * (1.0 - s * s);
    }
    return z > 0.0 ? 0.0 : std::exp(z);
}

}  // namespace

void validate_arch(const FieldArch& arch) {
    if (arch.input_dim == 0) throw std::invalid_argument("FieldArch: input_dim must be positive");
    if (arch.hidden_widths.empty()) throw std::invalid_argument("FieldArch: hidden_widths must be non-empty");
    for (auto w : arch.hidden_widths)
        if (w == 0) throw std::invalid_argument("FieldArch: hidden widths must be positive");
}

std::size_t parameter_count(const FieldArch& arch) {
    validate_arch(arch);
    std::size_t count = 0;
    std::size_t in = arch.input_dim + 1;  // [x; t]
    for (auto w : arch.hidden_widths) {
        count += w * in + w;
        in = w;
    }
    count += arch.input_dim * in + arch.input_dim;
    return count;
}

ProbeVector ProbeVector::draw(std::size_t dim, Rng& rng, std::uint64_t tag) {
    ProbeVector p;
    p.seed_tag = tag;
    p.values.resize(dim);
    for (auto& v : p.values) v = rng.sign();
    return p;
}

ProbeVector ProbeVector::from_values(std::vector<double> values, std::uint64_t tag) {
    for (double v : values)
        if (v != 1.0 && v != -1.0)
            throw std::invalid_argument("ProbeVector: entries must be +-1");
    ProbeVector p;
    p.values = std::move(values);
    p.seed_tag = tag;
    return p;
}

FieldParams init_params(const FieldArch& arch, std::uint64_t seed) {
    validate_arch(arch);
    FieldParams p;
    p.arch = arch;
    p.values.assign(parameter_count(arch), 0.0);
    Rng rng(seed ^ 0xf1e1d1c1b1a19181ull);

    std::vector<std::size_t> widths;
    widths.push_back(arch.input_dim + 1);
    for (auto w : arch.hidden_widths) widths.push_back(w);
    widths.push_back(arch.input_dim);

    std::size_t off = 0;
    for (std::size_t l = 1; l < widths.size(); ++l) {
        std::size_t in = widths[l - 1], out = widths[l];
        double scale = 1.0 / std::sqrt(static_cast<double>(in));
        bool last = (l + 1 == widths.size());
        for (std::size_t i = 0; i < out * in; ++i)
            p.values[off + i] = rng.uniform(-scale, scale) * (last ? 0.01 : 1.0);
        off += out * in;
        off += out;  // biases stay zero
    }
    return p;
}

FieldOracle::FieldOracle(const FieldArch& arch) : arch_(arch) {
    validate_arch(arch);
    std::vector<std::size_t> widths;
    widths.push_back(arch.input_dim + 1);
    for (auto w : arch.hidden_widths) widths.push_back(w);
    widths.push_back(arch.input_dim);
    n_layers_ = widths.size() - 1;

    std::size_t off = 0;
    for (std::size_t l = 1; l < widths.size(); ++l) {
        Layer layer;
        layer.in = widths[l - 1];
        layer.out = widths[l];
        layer.w_off = off;
        off += layer.out * layer.in;
        layer.b_off = off;
        off += layer.out;
        layers_.push_back(layer);
    }
    n_params_ = off;

    h_.resize(n_layers_ + 1);
    z_.resize(n_layers_ + 1);
    dh_.resize(n_layers_ + 1);
    dz_.resize(n_layers_ + 1);
    p_adj_.resize(n_layers_ + 1);
    q_adj_.resize(n_layers_ + 1);
    for (std::size_t l = 0; l <= n_layers_; ++l) {
        std::size_t w = widths[l];
        h_[l].resize(w);
        z_[l].resize(w);
        dh_[l].resize(w);
        dz_[l].resize(w);
        p_adj_[l].resize(w);
        q_adj_[l].resize(w);
    }
    input_grad_.resize(arch.input_dim + 1);
}

void FieldOracle::check_input(const FieldParams& p, const double* x, double t) const {
    if (p.arch != arch_) throw std::invalid_argument("FieldOracle: arch mismatch");
    if (p.values.size() != n_params_) throw std::invalid_argument("FieldOracle: parameter size mismatch");
    if (!all_finite(x, arch_.input_dim) || !std::isfinite(t))
        throw std::domain_error("FieldOracle: non-finite input");
}

void FieldOracle::forward(const FieldParams& p, const double* x, double t) {
    const std::size_t d = arch_.input_dim;
    for (std::size_t i = 0; i < d; ++i) h_[0][i] = x[i];
    h_[0][d] = t;
    const double* theta = p.values.data();
    for (std::size_t l = 0; l < n_layers_; ++l) {
        const Layer& L = layers_[l];
        const double* w = theta + L.w_off;
        const double* b = theta + L.b_off;
        const Vec& in = h_[l];
        Vec& z = z_[l + 1];
        for (std::size_t o = 0; o < L.out; ++o)
            z[o] = b[o] + dot(w + o * L.in, in.data(), L.in);
        if (l + 1 < n_layers_)
            act_eval(arch_.activation, z, h_[l + 1]);
        else
            h_[l + 1] = z;
    }
}

void FieldOracle::jvp(const FieldParams& p, const double* dir) {
    const std::size_t d = arch_.input_dim;
    for (std::size_t i = 0; i < d; ++i) dh_[0][i] = dir[i];
    dh_[0][d] = 0.0;  // t-tangent is zero
    const double* theta = p.values.data();
    for (std::size_t l = 0; l < n_layers_; ++l) {
        const Layer& L = layers_[l];
        const double* w = theta + L.w_off;
        const Vec& din = dh_[l];
        Vec& dz = dz_[l + 1];
        for (std::size_t o = 0; o < L.out; ++o)
            dz[o] = dot(w + o * L.in, din.data(), L.in);
        if (l + 1 < n_layers_) {
            const Vec& z = z_[l + 1];
            Vec& dh = dh_[l + 1];
            for (std::size_t o = 0; o < L.out; ++o)
                dh[o] = act_d1(arch_.activation, z[o]) * dz[o];
        } else {
            dh_[l + 1] = dz;
        }
    }
}

void FieldOracle::reverse_first(const FieldParams& p, const double* a, double* dtheta_accum) {
    // grad over (input, theta) of a^T v, accumulating into input_grad_ / dtheta.
    const double* theta = p.values.data();
    Vec& zadj = p_adj_[n_layers_];
    for (std::size_t o = 0; o < layers_.back().out; ++o) zadj[o] = a[o];

    for (std::size_t l = n_layers_; l-- > 0;) {
        const Layer& L = layers_[l];
        const double* w = theta + L.w_off;
        const Vec& za = p_adj_[l + 1];
        Vec& hadj = p_adj_[l];
        std::fill(hadj.begin(), hadj.end(), 0.0);
        for (std::size_t o = 0; o < L.out; ++o) {
            double g = za[o];
            if (g == 0.0) continue;
            const double* wrow = w + o * L.in;
            for (std::size_t i = 0; i < L.in; ++i) hadj[i] += wrow[i] * g;
            if (dtheta_accum) {
                double* dwrow = dtheta_accum + L.w_off + o * L.in;
                const Vec& hin = h_[l];
                for (std::size_t i = 0; i < L.in; ++i) dwrow[i] += g * hin[i];
                dtheta_accum[L.b_off + o] += g;
            }
        }
        if (l > 0) {
            const Vec& z = z_[l];
            for (std::size_t i = 0; i < L.in; ++i)
                hadj[i] *= act_d1(arch_.activation, z[i]);
        }
    }
    for (std::size_t i = 0; i < input_grad_.size(); ++i) input_grad_[i] += p_adj_[0][i];
}

void FieldOracle::reverse_second(const FieldParams& p, const double* a, double scale,
                                 double* dtheta_accum) {
    // grad over (input, theta) of scale * a^T (J dir), where the tangent pass
    // for dir is stored in dh_/dz_. Reverse through both primal and tangent
    // variables; needs the activation's second derivative.
    const double* theta = p.values.data();
    Vec& pz_top = p_adj_[n_layers_];
    Vec& qz_top = q_adj_[n_layers_];
    for (std::size_t o = 0; o < layers_.back().out; ++o) {
        pz_top[o] = 0.0;
        qz_top[o] = scale * a[o];
    }

    for (std::size_t l = n_layers_; l-- > 0;) {
        const Layer& L = layers_[l];
        const double* w = theta + L.w_off;
        const Vec& pz = p_adj_[l + 1];
        const Vec& qz = q_adj_[l + 1];
        Vec& ph = p_adj_[l];
        Vec& qh = q_adj_[l];
        std::fill(ph.begin(), ph.end(), 0.0);
        std::fill(qh.begin(), qh.end(), 0.0);
        const Vec& hin = h_[l];
        const Vec& dhin = dh_[l];
        for (std::size_t o = 0; o < L.out; ++o) {
            double gp = pz[o], gq = qz[o];
            const double* wrow = w + o * L.in;
            if (gp != 0.0 || gq != 0.0) {
                for (std::size_t i = 0; i < L.in; ++i) {
                    ph[i] += wrow[i] * gp;
                    qh[i] += wrow[i] * gq;
                }
            }
            if (dtheta_accum) {
                double* dwrow = dtheta_accum + L.w_off + o * L.in;
                for (std::size_t i = 0; i < L.in; ++i)
                    dwrow[i] += gp * hin[i] + gq * dhin[i];
                dtheta_accum[L.b_off + o] += gp;
            }
        }
        if (l > 0) {
            const Vec& z = z_[l];
            const Vec& dz = dz_[l];
            for (std::size_t i = 0; i < L.in; ++i) {
                double d1 = act_d1(arch_.activation, z[i]);
                double d2 = act_d2(arch_.activation, z[i]);
                double pnew = d1 * ph[i] + d2 * dz[i] * qh[i];
                qh[i] = d1 * qh[i];
                ph[i] = pnew;
            }
        }
    }
    for (std::size_t i = 0; i < input_grad_.size(); ++i) input_grad_[i] += p_adj_[0][i];
}

void FieldOracle::eval(const FieldParams& p, const double* x, double t, double* v_out) {
    check_input(p, x, t);
    forward(p, x, t);
    const Vec& v = h_[n_layers_];
    for (std::size_t i = 0; i < arch_.input_dim; ++i) v_out[i] = v[i];
}

Vec FieldOracle::eval(const FieldParams& p, const Vec& x, double t) {
    Vec v(arch_.input_dim);
    eval(p, x.data(), t, v.data());
    return v;
}

std::vector<double> FieldOracle::jacobian(const FieldParams& p, const double* x, double t) {
    check_input(p, x, t);
    forward(p, x, t);
    const std::size_t d = arch_.input_dim;
    std::vector<double> jac(d * d);
    Vec dir(d, 0.0);
    for (std::size_t col = 0; col < d; ++col) {
        dir[col] = 1.0;
        jvp(p, dir.data());
        dir[col] = 0.0;
        const Vec& jcol = dh_[n_layers_];
        for (std::size_t row = 0; row < d; ++row) jac[row * d + col] = jcol[row];
    }
    return jac;
}

double FieldOracle::divergence(const FieldParams& p, const double* x, double t,
                               DivergenceMethod method, const ProbeVector* probe) {
    check_input(p, x, t);
    forward(p, x, t);
    const std::size_t d = arch_.input_dim;
    if (method == DivergenceMethod::exact) {
        double tr = 0.0;
        Vec dir(d, 0.0);
        for (std::size_t i = 0; i < d; ++i) {
            dir[i] = 1.0;
            jvp(p, dir.data());
            dir[i] = 0.0;
            tr += dh_[n_layers_][i];
        }
        return tr;
    }
    if (!probe || probe->values.size() != d)
        throw std::invalid_argument("divergence: hutchinson mode needs a probe of length D");
    jvp(p, probe->values.data());
    return dot(probe->values.data(), dh_[n_layers_].data(), d);
}

Vec FieldOracle::grad_x_divergence(const FieldParams& p, const double* x, double t,
                                   DivergenceMethod method, const ProbeVector* probe) {
    FieldCotangents cot;
    cot.d_ddiv = 1.0;
    return vjp(p, x, t, cot, method, probe).d_dx;
}

FieldVjpResult FieldOracle::vjp(const FieldParams& p, const double* x, double t,
                                const FieldCotangents& cot, DivergenceMethod method,
                                const ProbeVector* probe) {
    FieldVjpResult r;
    r.d_dx.assign(arch_.input_dim, 0.0);
    r.d_dtheta.assign(n_params_, 0.0);
    vjp_accumulate(p, x, t, cot, method, probe, r.d_dx.data(), r.d_dtheta.data());
    return r;
}

void FieldOracle::vjp_accumulate(const FieldParams& p, const double* x, double t,
                                 const FieldCotangents& cot, DivergenceMethod method,
                                 const ProbeVector* probe, double* dx_out,
                                 double* dtheta_accum) {
    check_input(p, x, t);
    forward(p, x, t);
    std::fill(input_grad_.begin(), input_grad_.end(), 0.0);
    const std::size_t d = arch_.input_dim;

    if (cot.d_dv) reverse_first(p, cot.d_dv, dtheta_accum);

    if (cot.d_ddiv != 0.0) {
        if (method == DivergenceMethod::exact) {
            Vec dir(d, 0.0);
            for (std::size_t i = 0; i < d; ++i) {
                dir[i] = 1.0;
                jvp(p, dir.data());
                reverse_second(p, dir.data(), cot.d_ddiv, dtheta_accum);
                dir[i] = 0.0;
            }
        } else {
            if (!probe || probe->values.size() != d)
                throw std::invalid_argument("vjp: hutchinson mode needs a probe of length D");
            jvp(p, probe->values.data());
            reverse_second(p, probe->values.data(), cot.d_ddiv, dtheta_accum);
        }
    }
    for (std::size_t i = 0; i < d; ++i) dx_out[i] += input_grad_[i];
}

std::string to_string(Activation a) {
    return a == Activation::tanh_act ? "tanh" : "elu";
}

Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::tanh_act;
    if (s == "elu") return Activation::elu;
    throw std::invalid_argument("unknown activation: " + s);
}

}  // namespace pathflow
