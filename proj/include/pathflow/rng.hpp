#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace pathflow {

// Deterministic RNG stream. Wraps a 64-bit Mersenne twister but implements
// the uniform/normal transforms by hand so results are identical across
// standard libraries (std::normal_distribution is implementation-defined).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix(seed)), state2_(splitmix(state_ ^ 0x9e3779b97f4a7c15ull)) {}

    // Derive an independent stream, e.g. one per sample or per trial.
    Rng stream(std::uint64_t tag) const {
        return Rng(state_ ^ splitmix(tag ^ 0xd1b54a32d192ed03ull));
    }

    std::uint64_t next_u64() {
        // xoshiro-style mix of two splitmix-seeded lanes.
        std::uint64_t s0 = state_, s1 = state2_;
        std::uint64_t r = rotl(s0 + s1, 17) + s0;
        s1 ^= s0;
        state_ = rotl(s0, 49) ^ s1 ^ (s1 << 21);
        state2_ = rotl(s1, 28);
        return r;
    }

    // Uniform in [0,1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; caches the second variate.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        cached_ = r * std::sin(6.283185307179586476925286766559 * u2);
        has_cached_ = true;
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Rademacher +-1.
    double sign() { return (next_u64() & 1ull) ? 1.0 : -1.0; }

    std::uint64_t integer(std::uint64_t n) { return next_u64() % n; }

    void fill_normal(std::vector<double>& out) {
        for (auto& v : out) v = normal();
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::uint64_t state_;
    std::uint64_t state2_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace pathflow
