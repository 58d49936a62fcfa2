#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "protoneck/errors.hpp"
#include "protoneck/tensor.hpp"

namespace protoneck {

// Per-location normalization of prototype scores into a distribution.
enum class NeckNormMode { Softmax, Sparsemax, Argmax };

inline NeckNormMode neck_mode_from_string(const std::string& s) {
    if (s == "softmax") return NeckNormMode::Softmax;
    if (s == "sparsemax") return NeckNormMode::Sparsemax;
    if (s == "argmax") return NeckNormMode::Argmax;
    throw config_error("unknown neck mode '" + s + "' (softmax|sparsemax|argmax)");
}

inline std::string to_string(NeckNormMode m) {
    switch (m) {
        case NeckNormMode::Softmax: return "softmax";
        case NeckNormMode::Sparsemax: return "sparsemax";
        default: return "argmax";
    }
}

namespace detail {

// Projection of one line onto the probability simplex: sort descending, find
// the largest k with 1 + k*z_(k) > sum_{j<=k} z_(j), threshold at
// tau = (sum_{j<=k} z_(j) - 1)/k, clamp below at zero.
inline void sparsemax_line(const double* z, int64_t n, int64_t stride, double* out) {
    std::vector<double> s(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) s[static_cast<size_t>(j)] = z[j * stride];
    std::sort(s.begin(), s.end(), std::greater<double>());
    double cum = 0.0, tau = 0.0;
    int64_t k = 0;
    for (int64_t j = 0; j < n; ++j) {
        cum += s[static_cast<size_t>(j)];
        double kk = static_cast<double>(j + 1);
        if (1.0 + kk * s[static_cast<size_t>(j)] > cum) {
            k = j + 1;
            tau = (cum - 1.0) / kk;
        }
    }
    (void)k;
    for (int64_t j = 0; j < n; ++j) out[j * stride] = std::max(z[j * stride] - tau, 0.0);
}

}  // namespace detail

// Euclidean projection onto the probability simplex along `axis`.
// Backward spreads g - mean(g over the support) across the support.
inline Tensor sparsemax_axis(const Tensor& x, int axis) {
    axis = detail::norm_axis(x, axis, "sparsemax_axis");
    for (double v : x.data())
        if (!std::isfinite(v)) throw numeric_error("sparsemax: non-finite input");
    Tensor out = Tensor::zeros(x.shape());
    const double* xd = x.data().data();
    double* od = out.data().data();
    detail::for_each_line(x.shape(), axis, [&](int64_t base, int64_t stride, int64_t extent) {
        detail::sparsemax_line(xd + base, extent, stride, od + base);
    });
    if (detail::want_grad({&x})) {
        auto xi = x.impl();
        auto oi = out.impl();
        detail::mark(out, [=]() {
            if (oi->grad.empty()) return;
            ensure_grad(*xi);
            const double* y = oi->data.data();
            const double* g = oi->grad.data();
            detail::for_each_line(xi->shape, axis, [&](int64_t base, int64_t stride, int64_t extent) {
                double gsum = 0.0;
                int64_t support = 0;
                for (int64_t j = 0; j < extent; ++j) {
                    if (y[base + j * stride] > 0.0) {
                        gsum += g[base + j * stride];
                        ++support;
                    }
                }
                double gmean = gsum / static_cast<double>(support);
                for (int64_t j = 0; j < extent; ++j) {
                    int64_t p = base + j * stride;
                    if (y[p] > 0.0) xi->grad[static_cast<size_t>(p)] += g[p] - gmean;
                }
            });
        });
    }
    return out;
}

// One-hot at the per-line maximum (ties take the lowest index). The forward
// pass is a hard argmax; the backward pass skips it entirely and hands the
// upstream gradient, scaled down, straight to the input.
inline Tensor argmax_onehot_ste(const Tensor& x, int axis, double scale) {
    axis = detail::norm_axis(x, axis, "argmax_onehot_ste");
    Tensor out = Tensor::zeros(x.shape());
    const double* xd = x.data().data();
    double* od = out.data().data();
    detail::for_each_line(x.shape(), axis, [&](int64_t base, int64_t stride, int64_t extent) {
        int64_t arg = 0;
        for (int64_t j = 1; j < extent; ++j)
            if (xd[base + j * stride] > xd[base + arg * stride]) arg = j;
        od[base + arg * stride] = 1.0;
    });
    if (detail::want_grad({&x})) {
        auto xi = x.impl();
        auto oi = out.impl();
        detail::mark(out, [=]() {
            if (oi->grad.empty()) return;
            ensure_grad(*xi);
            const double* g = oi->grad.data();
            for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += g[i] * scale;
        });
    }
    return out;
}

// Mode dispatch for the neck's third step. The LayerNorm affine parameters
// participate only on the argmax path; the softmax and sparsemax paths
// consume the raw scores.
inline Tensor normalize_prototype_scores(const Tensor& scores, int axis, NeckNormMode mode,
                                         const Tensor& ln_gain, const Tensor& ln_bias,
                                         double argmax_scale = 0.01) {
    switch (mode) {
        case NeckNormMode::Softmax: return softmax_axis(scores, axis);
        case NeckNormMode::Sparsemax: return sparsemax_axis(scores, axis);
        default:
            return argmax_onehot_ste(layernorm(scores, ln_gain, ln_bias, axis), axis, argmax_scale);
    }
}

}  // namespace protoneck
