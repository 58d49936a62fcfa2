#pragma once

#include <cstdint>
#include <vector>

#include "protoneck/errors.hpp"
#include "protoneck/sparse_activations.hpp"

namespace protoneck {

// Detached snapshot of per-location prototype activations, prototype-major
// [P][H][W]. Every spatial location holds a distribution over prototypes.
struct PrototypeMap {
    int p = 0, h = 0, w = 0;
    NeckNormMode mode = NeckNormMode::Softmax;
    std::vector<double> values;

    double at(int pp, int i, int j) const {
        return values[(static_cast<size_t>(pp) * static_cast<size_t>(h) + static_cast<size_t>(i)) *
                          static_cast<size_t>(w) +
                      static_cast<size_t>(j)];
    }
};

// Post-softmax cross-attention mass of one detection, averaged over decoder
// layers and heads; sums to 1 over the grid.
struct AttentionMap {
    int h = 0, w = 0;
    std::vector<double> values;

    double at(int i, int j) const {
        return values[static_cast<size_t>(i) * static_cast<size_t>(w) + static_cast<size_t>(j)];
    }
};

// [HW,P] token-major activations (the differentiable layout) to the
// prototype-major snapshot.
inline PrototypeMap prototype_map_from_tokens(const std::vector<double>& tokens, int p, int h,
                                              int w, NeckNormMode mode) {
    if (static_cast<size_t>(p) * static_cast<size_t>(h) * static_cast<size_t>(w) != tokens.size())
        throw shape_error("prototype_map_from_tokens: extent mismatch");
    PrototypeMap m;
    m.p = p;
    m.h = h;
    m.w = w;
    m.mode = mode;
    m.values.resize(tokens.size());
    for (int loc = 0; loc < h * w; ++loc)
        for (int pp = 0; pp < p; ++pp)
            m.values[static_cast<size_t>(pp) * static_cast<size_t>(h * w) + static_cast<size_t>(loc)] =
                tokens[static_cast<size_t>(loc) * static_cast<size_t>(p) + static_cast<size_t>(pp)];
    return m;
}

}  // namespace protoneck
