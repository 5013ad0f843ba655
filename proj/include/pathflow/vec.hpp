#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace pathflow {

using Vec = std::vector<double>;

// N x D batch of configurations, row-major.
struct SampleBatch {
    std::size_t n = 0;
    std::size_t dim = 0;
    std::vector<double> data;  // n * dim

    SampleBatch() = default;
    SampleBatch(std::size_t n_, std::size_t dim_) : n(n_), dim(dim_), data(n_ * dim_, 0.0) {}

    double* row(std::size_t i) { return data.data() + i * dim; }
    const double* row(std::size_t i) const { return data.data() + i * dim; }
};

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline double dot(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: size mismatch");
    return dot(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, const Vec& x, Vec& y) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

inline double norm2(const double* a, std::size_t n) {
    return std::sqrt(dot(a, a, n));
}

inline double norm2(const Vec& a) { return norm2(a.data(), a.size()); }

inline bool all_finite(const double* a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (!std::isfinite(a[i])) return false;
    return true;
}

inline bool all_finite(const Vec& a) { return all_finite(a.data(), a.size()); }

}  // namespace pathflow
