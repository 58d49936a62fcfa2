#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace protoneck {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Counter-based generator: the stream is a pure function of (seed, stream),
// so any draw can be reproduced out of order and in parallel. No ambient
// state, identical output on every platform.
class Rng {
public:
    Rng() : key_(0), ctr_(0) {}
    explicit Rng(uint64_t seed, uint64_t stream = 0)
        : key_(splitmix64(seed ^ splitmix64(stream * 0x9e3779b97f4a7c15ull + 1))), ctr_(0) {}

    // Derive an independent stream without disturbing this one.
    Rng fork(uint64_t stream) const { return Rng(key_, stream + 0x51ed2701ull); }

    uint64_t next_u64() { return splitmix64(key_ + 0x2545f4914f6cdd1dull * ++ctr_); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>(uniform() * static_cast<double>(n)) % n;
    }

    // Box-Muller, hand-rolled so draws are platform-independent.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            int j = static_cast<int>(below(static_cast<uint64_t>(i) + 1));
            std::swap(p[i], p[j]);
        }
        return p;
    }

private:
    uint64_t key_;
    uint64_t ctr_;
};

}  // namespace protoneck
