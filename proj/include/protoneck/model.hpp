#pragma once

#include <vector>

#include "protoneck/detector.hpp"
#include "protoneck/metrics.hpp"
#include "protoneck/neck.hpp"
#include "protoneck/shapes_data.hpp"

namespace protoneck {

struct ModelConfig {
    int num_classes = 4;
    int image_size = 64;
    int patch = 8;
    int backbone_channels = 64;
    int channels = 64;
    int prototypes = 16;
    int queries = 10;
    int enc_layers = 2;
    int dec_layers = 2;
    int heads = 4;
    int ffn_dim = 128;
    // Ablation switch: false routes backbone features straight into the
    // encoder (needs backbone_channels == channels).
    bool use_neck = true;
};

struct Model {
    ModelConfig cfg;
    DetectorParams det;
    NeckParams neck;

    std::vector<NamedParam> params() {
        std::vector<NamedParam> out;
        detector_collect_params(det, "detector", out);
        if (cfg.use_neck) neck_collect_params(neck, "neck", out);
        return out;
    }
};

inline Model model_init(const ModelConfig& cfg, uint64_t seed) {
    Model m;
    m.cfg = cfg;
    Rng rng(seed, 1);
    m.det = detector_init(cfg.patch, cfg.backbone_channels, cfg.channels, cfg.num_classes,
                          cfg.queries, cfg.enc_layers, cfg.dec_layers, cfg.heads, cfg.ffn_dim, rng);
    if (cfg.use_neck) m.neck = neck_init(cfg.backbone_channels, cfg.channels, cfg.prototypes, rng);
    return m;
}

struct ForwardOut {
    Tensor class_logits;  // [Q, K+1]
    Tensor boxes;         // [Q, 4]
    Tensor proto_tokens;  // [HW, P]
    std::vector<AttentionMap> attention;
    int grid_h = 0, grid_w = 0;
    NeckNormMode mode = NeckNormMode::Softmax;
};

inline ForwardOut model_forward(Model& m, const std::vector<double>& image, int img_h, int img_w,
                                NeckNormMode mode) {
    PatchGrid grid = patchify(image, img_h, img_w, m.cfg.patch);
    Tensor feats = backbone_forward(grid, m.det);
    ForwardOut out;
    Tensor tokens;
    if (m.cfg.use_neck) {
        NeckOut neck = neck_forward(feats, m.neck, mode);
        tokens = neck.output;
        out.proto_tokens = neck.proto_tokens;
    } else {
        tokens = feats;
    }
    DetectOut det = detect(tokens, m.det, grid.h, grid.w);
    out.class_logits = det.class_logits;
    out.boxes = det.boxes;
    out.attention = std::move(det.attention);
    out.grid_h = grid.h;
    out.grid_w = grid.w;
    out.mode = mode;
    return out;
}

inline ForwardOut model_forward(Model& m, const SceneSample& s, NeckNormMode mode) {
    return model_forward(m, s.image, s.h, s.w, mode);
}

// Query outputs as scored detections: softmax over K+1, take the best real
// class; the no-object column only competes for probability mass.
inline std::vector<ScoredDetection> scored_detections(const Tensor& class_logits,
                                                      const Tensor& boxes) {
    int64_t q = class_logits.shape()[0], kp1 = class_logits.shape()[1];
    std::vector<ScoredDetection> out;
    const std::vector<double>& lg = class_logits.data();
    const std::vector<double>& bx = boxes.data();
    for (int64_t i = 0; i < q; ++i) {
        const double* row = lg.data() + i * kp1;
        double mx = row[0];
        for (int64_t k = 1; k < kp1; ++k) mx = std::max(mx, row[k]);
        double z = 0;
        for (int64_t k = 0; k < kp1; ++k) z += std::exp(row[k] - mx);
        int best = 0;
        double bestp = -1;
        for (int64_t k = 0; k + 1 < kp1; ++k) {
            double p = std::exp(row[k] - mx) / z;
            if (p > bestp) {
                bestp = p;
                best = static_cast<int>(k);
            }
        }
        out.push_back({best, bestp,
                       Box{bx[static_cast<size_t>(i * 4)], bx[static_cast<size_t>(i * 4 + 1)],
                           bx[static_cast<size_t>(i * 4 + 2)], bx[static_cast<size_t>(i * 4 + 3)]}});
    }
    return out;
}

}  // namespace protoneck
