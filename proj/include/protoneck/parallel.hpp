#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace protoneck {

// Worker budget for evaluation. PROTONECK_THREADS overrides the hardware
// count; anything unparsable or < 1 falls back to 1.
inline int thread_budget() {
    if (const char* env = std::getenv("PROTONECK_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end == env || v < 1) return 1;
        return static_cast<int>(v);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

// Runs fn(i) for i in [0, n) across at most thread_budget() threads.
// Each index must touch only its own output slot; chunks are contiguous, so
// any later index-ordered reduction is independent of the thread count.
template <class Fn>
inline void parallel_for(int64_t n, Fn&& fn) {
    int workers = std::min<int64_t>(thread_budget(), n);
    if (workers <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        int64_t lo = n * w / workers;
        int64_t hi = n * (w + 1) / workers;
        pool.emplace_back([lo, hi, &fn]() {
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace protoneck
