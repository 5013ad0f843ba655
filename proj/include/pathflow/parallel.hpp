#pragma once

#include <cstdlib>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace pathflow {

// Thread-count override: PATHFLOW_THREADS, else hardware concurrency.
inline unsigned thread_count() {
    if (const char* env = std::getenv("PATHFLOW_THREADS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : hc;
}

// Runs body(i) for i in [0, n). Each index writes only its own outputs, so
// results are independent of the schedule; callers reduce in index order.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
    unsigned nthreads = thread_count();
    if (nthreads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    if (nthreads > n) nthreads = static_cast<unsigned>(n);
    std::vector<std::thread> workers;
    workers.reserve(nthreads);
    std::size_t chunk = (n + nthreads - 1) / nthreads;
    for (unsigned t = 0; t < nthreads; ++t) {
        std::size_t lo = t * chunk;
        std::size_t hi = lo + chunk < n ? lo + chunk : n;
        if (lo >= hi) break;
        workers.emplace_back([lo, hi, &body] {
            for (std::size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& w : workers) w.join();
}

}  // namespace pathflow
