#pragma once

#include <string>
#include <vector>

#include "protoneck/maps.hpp"
#include "protoneck/rng.hpp"
#include "protoneck/sparse_activations.hpp"
#include "protoneck/tensor.hpp"

namespace protoneck {

// Bottleneck between backbone and transformer. Per grid cell: adapt the
// backbone vector, score it against every prototype, normalize the scores
// into a distribution, then embed that distribution back to C channels.
// Everything after the neck sees only the normalized prototype activations.
struct NeckParams {
    Tensor adapter1_w, adapter1_b;  // [Cb,C], [1,C]
    Tensor adapter2_w, adapter2_b;  // [C,C],  [1,C]
    Tensor proto_w, proto_b;        // [C,P],  [1,P]
    Tensor out_w, out_b;            // [P,C],  [1,C]
    Tensor ln_gain, ln_bias;        // [P], [P]

    int backbone_channels() const { return static_cast<int>(a1_rows()); }
    int channels() const { return static_cast<int>(adapter1_w.shape()[1]); }
    int prototypes() const { return static_cast<int>(proto_w.shape()[1]); }

  private:
    int64_t a1_rows() const { return adapter1_w.shape()[0]; }
};

inline NeckParams neck_init(int cb, int c, int p, Rng& rng) {
    auto mat = [&](int rows, int cols) {
        Tensor t = Tensor::zeros({rows, cols}, true);
        double s = 1.0 / std::sqrt(static_cast<double>(rows));
        for (double& v : t.data()) v = rng.normal() * s;
        return t;
    };
    NeckParams np;
    np.adapter1_w = mat(cb, c);
    np.adapter1_b = Tensor::zeros({1, c}, true);
    np.adapter2_w = mat(c, c);
    np.adapter2_b = Tensor::zeros({1, c}, true);
    np.proto_w = mat(c, p);
    np.proto_b = Tensor::zeros({1, p}, true);
    np.out_w = mat(p, c);
    np.out_b = Tensor::zeros({1, c}, true);
    np.ln_gain = Tensor::filled({p}, 1.0, true);
    np.ln_bias = Tensor::zeros({p}, true);
    return np;
}

inline void neck_collect_params(NeckParams& np, const std::string& prefix,
                                std::vector<NamedParam>& out) {
    out.push_back({prefix + ".adapter1.weight", np.adapter1_w});
    out.push_back({prefix + ".adapter1.bias", np.adapter1_b});
    out.push_back({prefix + ".adapter2.weight", np.adapter2_w});
    out.push_back({prefix + ".adapter2.bias", np.adapter2_b});
    out.push_back({prefix + ".prototypes.weight", np.proto_w});
    out.push_back({prefix + ".prototypes.bias", np.proto_b});
    out.push_back({prefix + ".embed.weight", np.out_w});
    out.push_back({prefix + ".embed.bias", np.out_b});
    out.push_back({prefix + ".ln.gain", np.ln_gain});
    out.push_back({prefix + ".ln.bias", np.ln_bias});
}

struct NeckOut {
    Tensor proto_tokens;  // [HW,P] rows are distributions (the prototype map)
    Tensor output;        // [HW,C] re-embedded tokens for the transformer
    NeckNormMode mode = NeckNormMode::Softmax;
};

// features: token-major [HW,Cb] grid rows in row-major cell order.
inline NeckOut neck_forward(const Tensor& features, NeckParams& np, NeckNormMode mode) {
    Tensor a1 = relu(add(matmul(features, np.adapter1_w), np.adapter1_b));
    check_finite(a1, "neck.adapter1");
    Tensor a2 = relu(add(matmul(a1, np.adapter2_w), np.adapter2_b));
    check_finite(a2, "neck.adapter2");
    Tensor scores = add(matmul(a2, np.proto_w), np.proto_b);
    check_finite(scores, "neck.scores");
    NeckOut out;
    out.mode = mode;
    out.proto_tokens = normalize_prototype_scores(scores, 1, mode, np.ln_gain, np.ln_bias);
    check_finite(out.proto_tokens, "neck.normalize");
    out.output = relu(add(matmul(out.proto_tokens, np.out_w), np.out_b));
    check_finite(out.output, "neck.embed");
    return out;
}

// Re-embeds an existing prototype map without touching the scoring path.
// Feeding back m_p from a prior forward must reproduce the output exactly;
// anything else leaking past the neck would break that equality.
inline Tensor neck_embed_only(const Tensor& proto_tokens, NeckParams& np) {
    return relu(add(matmul(proto_tokens, np.out_w), np.out_b));
}

struct ArgmaxSchedule {
    double start_pct = 0.0;
    double end_pct = 5.0;
};

// Per-image draw: quantize with a probability that ramps linearly over
// training. A hard-quantized configured mode wins unconditionally.
inline NeckNormMode pick_norm_mode_for_image(double epoch_fraction, NeckNormMode configured,
                                             const ArgmaxSchedule& sched, Rng& rng) {
    if (configured == NeckNormMode::Argmax) return NeckNormMode::Argmax;
    double pct = sched.start_pct + (sched.end_pct - sched.start_pct) * epoch_fraction;
    if (rng.uniform() * 100.0 < pct) return NeckNormMode::Argmax;
    return configured;
}

}  // namespace protoneck
