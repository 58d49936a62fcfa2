#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <map>

#include "oracles.hpp"
#include "protoneck/losses.hpp"
#include "protoneck/model.hpp"

using namespace protoneck;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.image_size = 16;
    cfg.patch = 8;
    cfg.backbone_channels = 8;
    cfg.channels = 8;
    cfg.prototypes = 4;
    cfg.queries = 3;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    return cfg;
}

Tensor fixed_weights(const Shape& s, uint64_t seed) {
    Tensor t = Tensor::zeros(s);
    Rng rng(seed);
    for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
    return t;
}

// Central differences over every parameter tensor, striding large tensors so
// the test stays fast while still touching each one.
void check_params_against_fd(std::vector<NamedParam> params,
                             const std::function<double()>& eval,
                             const std::map<std::string, std::vector<double>>& analytic,
                             int max_coords, double tol) {
    const double h = 1e-6;
    for (NamedParam& p : params) {
        std::vector<double>& vals = p.tensor.data();
        const auto it = analytic.find(p.name);
        int64_t n = p.tensor.numel();
        int64_t stride = std::max<int64_t>(1, n / max_coords);
        int checked = 0;
        for (int64_t i = 0; i < n; i += stride) {
            double keep = vals[static_cast<size_t>(i)];
            vals[static_cast<size_t>(i)] = keep + h;
            double up = eval();
            vals[static_cast<size_t>(i)] = keep - h;
            double dn = eval();
            vals[static_cast<size_t>(i)] = keep;
            double fd = (up - dn) / (2 * h);
            double an = it == analytic.end() ? 0.0 : it->second[static_cast<size_t>(i)];
            EXPECT_LE(oracles::scaled_err(an, fd, 1e-3), tol)
                << p.name << "[" << i << "] analytic " << an << " fd " << fd;
            ++checked;
        }
        EXPECT_GT(checked, 0);
    }
}

std::map<std::string, std::vector<double>> grads_of(std::vector<NamedParam>& params) {
    std::map<std::string, std::vector<double>> out;
    for (NamedParam& p : params)
        if (p.tensor.has_grad()) out[p.name] = p.tensor.grad();
    return out;
}

}  // namespace

TEST(Patchify, GridExtentsAndContent) {
    std::vector<double> image(3 * 64 * 64);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                image[(static_cast<size_t>(c) * 64 + y) * 64 + x] = c * 10000 + y * 100 + x;
    PatchGrid g = patchify(image, 64, 64, 8);
    EXPECT_EQ(g.h, 8);
    EXPECT_EQ(g.w, 8);
    ASSERT_EQ(g.pixels.shape(), (Shape{64, 192}));
    // Cell (2,3): channel-major 8x8 block starting at pixel (16,24).
    const double* row = g.pixels.data().data() + (2 * 8 + 3) * 192;
    size_t k = 0;
    for (int c = 0; c < 3; ++c)
        for (int dy = 0; dy < 8; ++dy)
            for (int dx = 0; dx < 8; ++dx)
                ASSERT_EQ(row[k++], c * 10000 + (16 + dy) * 100 + (24 + dx));
    EXPECT_THROW(patchify(image, 64, 64, 7), config_error);
}

TEST(Patchify, ZeroImageZeroBiasGivesZeroFeatures) {
    Model m = model_init(tiny_config(), 3);
    std::vector<double> image(3 * 16 * 16, 0.0);
    Tensor f = backbone_forward(patchify(image, 16, 16, 8), m.det);
    for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(Patchify, EmbeddingGradMatchesFd) {
    Model m = model_init(tiny_config(), 4);
    DataSpec ds;
    ds.image_size = 16;
    SceneSample s = generate(21, 0, ds);
    Tensor wmix = fixed_weights({4, 8}, 91);
    auto eval = [&]() {
        Tape tape;
        Tensor f = backbone_forward(patchify(s.image, 16, 16, 8), m.det);
        return sum(mul(f, wmix)).item();
    };
    std::vector<NamedParam> params;
    params.push_back({"patch.weight", m.det.patch_w});
    params.push_back({"patch.bias", m.det.patch_b});
    zero_grads(params);
    {
        Tape tape;
        Tensor f = backbone_forward(patchify(s.image, 16, 16, 8), m.det);
        Tensor loss = sum(mul(f, wmix));
        tape.backward(loss);
    }
    check_params_against_fd(params, eval, grads_of(params), 40, 1e-5);
}

TEST(PositionEncoding, DistinctFiniteRows) {
    Tensor pe = position_encoding(4, 5, 8);
    ASSERT_EQ(pe.shape(), (Shape{20, 8}));
    for (double v : pe.data()) ASSERT_TRUE(std::isfinite(v));
    auto row = [&](int t) { return std::vector<double>(pe.data().begin() + t * 8, pe.data().begin() + (t + 1) * 8); };
    EXPECT_NE(row(0), row(1));      // neighbour in x
    EXPECT_NE(row(0), row(5));      // neighbour in y
    EXPECT_NE(row(6), row(11));     // diagonal pair
    EXPECT_THROW(position_encoding(4, 5, 6), config_error);
}

TEST(Neck, ZeroWeightsSoftmaxGivesUniformMap) {
    Rng rng(31);
    NeckParams np = neck_init(8, 8, 4, rng);
    for (double& v : np.adapter1_w.data()) v = 0;
    for (double& v : np.adapter2_w.data()) v = 0;
    for (double& v : np.proto_b.data()) v = 0;
    Tensor features = fixed_weights({10, 8}, 92);
    Tape tape;
    NeckOut out = neck_forward(features, np, NeckNormMode::Softmax);
    for (double v : out.proto_tokens.data()) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(Neck, RowsAreDistributionsInAllModes) {
    Rng rng(32);
    NeckParams np = neck_init(8, 8, 5, rng);
    Tensor features = fixed_weights({12, 8}, 93);
    for (NeckNormMode mode :
         {NeckNormMode::Softmax, NeckNormMode::Sparsemax, NeckNormMode::Argmax}) {
        Tape tape;
        NeckOut out = neck_forward(features, np, mode);
        for (int t = 0; t < 12; ++t) {
            double sum = 0;
            for (int p = 0; p < 5; ++p) {
                double v = out.proto_tokens.at({t, p});
                EXPECT_GE(v, 0.0);
                sum += v;
            }
            EXPECT_NEAR(sum, 1.0, 1e-9);
        }
    }
}

TEST(Neck, SoftmaxGradsMatchFdForAllParams) {
    Rng rng(33);
    NeckParams np = neck_init(6, 8, 4, rng);
    Tensor features = fixed_weights({9, 6}, 94);
    Tensor wmix = fixed_weights({9, 8}, 95);
    auto eval = [&]() {
        Tape tape;
        NeckOut out = neck_forward(features, np, NeckNormMode::Softmax);
        return sum(mul(out.output, wmix)).item();
    };
    std::vector<NamedParam> params;
    neck_collect_params(np, "neck", params);
    zero_grads(params);
    {
        Tape tape;
        NeckOut out = neck_forward(features, np, NeckNormMode::Softmax);
        Tensor loss = sum(mul(out.output, wmix));
        tape.backward(loss);
    }
    check_params_against_fd(params, eval, grads_of(params), 30, 1e-4);
}

TEST(Neck, OutputDependsOnMapAlone) {
    Rng rng(34);
    NeckParams np = neck_init(8, 8, 4, rng);
    Tensor features = fixed_weights({10, 8}, 96);
    Tape tape;
    NeckOut out = neck_forward(features, np, NeckNormMode::Sparsemax);
    // Re-embed a detached copy of the map: outputs must be bit-identical.
    Tensor copy = Tensor::from_data(out.proto_tokens.shape(), out.proto_tokens.data());
    Tensor again = neck_embed_only(copy, np);
    ASSERT_EQ(again.numel(), out.output.numel());
    EXPECT_EQ(std::memcmp(again.data().data(), out.output.data().data(),
                          static_cast<size_t>(out.output.numel()) * sizeof(double)),
              0);
}

TEST(Neck, ArgmaxOutputSelectsEmbedColumn) {
    Rng rng(35);
    const int p = 5, c = 8;
    NeckParams np = neck_init(6, c, p, rng);
    Tensor features = fixed_weights({7, 6}, 97);
    Tape tape;
    NeckOut out = neck_forward(features, np, NeckNormMode::Argmax);
    for (int t = 0; t < 7; ++t) {
        int sel = -1;
        for (int pp = 0; pp < p; ++pp)
            if (out.proto_tokens.at({t, pp}) == 1.0) sel = pp;
        ASSERT_GE(sel, 0);
        for (int ch = 0; ch < c; ++ch) {
            double manual =
                std::max(0.0, np.out_w.at({sel, ch}) + np.out_b.at({0, ch}));
            EXPECT_EQ(out.output.at({t, ch}), manual);
        }
    }
}

TEST(NormModeSchedule, EdgesAndMonteCarlo) {
    Rng rng(36);
    ArgmaxSchedule ramp{0.0, 5.0};
    // Fraction 0 under a ramp starting at zero never quantizes.
    for (int i = 0; i < 2000; ++i)
        EXPECT_EQ(pick_norm_mode_for_image(0.0, NeckNormMode::Softmax, ramp, rng),
                  NeckNormMode::Softmax);
    // Hard-configured quantization ignores the schedule.
    for (int i = 0; i < 100; ++i)
        EXPECT_EQ(pick_norm_mode_for_image(0.3, NeckNormMode::Argmax, ramp, rng),
                  NeckNormMode::Argmax);
    ArgmaxSchedule full{0.0, 100.0};
    for (int i = 0; i < 100; ++i)
        EXPECT_EQ(pick_norm_mode_for_image(1.0, NeckNormMode::Sparsemax, full, rng),
                  NeckNormMode::Argmax);
    int hits = 0;
    for (int i = 0; i < 10000; ++i)
        hits += pick_norm_mode_for_image(0.5, NeckNormMode::Softmax, full, rng) ==
                NeckNormMode::Argmax;
    EXPECT_NEAR(hits / 10000.0, 0.5, 0.01);
}

TEST(Detector, AttentionMapsAreDistributions) {
    ModelConfig cfg;  // full-size defaults
    Model m = model_init(cfg, 5);
    DataSpec ds;
    SceneSample s = generate(22, 0, ds);
    Tape tape;
    ForwardOut f = model_forward(m, s, NeckNormMode::Softmax);
    ASSERT_EQ(f.attention.size(), 10u);
    for (const AttentionMap& a : f.attention) {
        EXPECT_EQ(a.h, 8);
        EXPECT_EQ(a.w, 8);
        double sum = 0;
        for (double v : a.values) {
            EXPECT_GE(v, 0.0);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(Detector, UntrainedOutputsFiniteWithBoxesInUnitRange) {
    Model m = model_init(ModelConfig{}, 6);
    DataSpec ds;
    SceneSample s = generate(23, 1, ds);
    Tape tape;
    ForwardOut f = model_forward(m, s, NeckNormMode::Softmax);
    for (double v : f.class_logits.data()) EXPECT_TRUE(std::isfinite(v));
    for (double v : f.boxes.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    auto dets = scored_detections(f.class_logits, f.boxes);
    ASSERT_EQ(dets.size(), 10u);
    for (const auto& d : dets) {
        EXPECT_GE(d.cls, 0);
        EXPECT_LT(d.cls, 4);
        EXPECT_GT(d.score, 0.0);
        EXPECT_LT(d.score, 1.0);
    }
}

TEST(Detector, QueryPermutationPermutesOutputs) {
    ModelConfig cfg = tiny_config();
    Model m = model_init(cfg, 7);
    DataSpec ds;
    ds.image_size = 16;
    SceneSample s = generate(24, 2, ds);
    Tape tape;
    ForwardOut base = model_forward(m, s, NeckNormMode::Softmax);

    Rng rng(41);
    std::vector<int64_t> perm64;
    for (int v : rng.permutation(cfg.queries)) perm64.push_back(v);
    Tensor orig = m.det.queries;
    Tensor permuted = Tensor::zeros(orig.shape(), true);
    for (int q = 0; q < cfg.queries; ++q)
        for (int c = 0; c < cfg.channels; ++c)
            permuted.data()[static_cast<size_t>(q * cfg.channels + c)] =
                orig.at({perm64[static_cast<size_t>(q)], c});
    m.det.queries = permuted;
    ForwardOut moved = model_forward(m, s, NeckNormMode::Softmax);
    m.det.queries = orig;

    for (int q = 0; q < cfg.queries; ++q) {
        int64_t src = perm64[static_cast<size_t>(q)];
        for (int k = 0; k < cfg.num_classes + 1; ++k)
            EXPECT_NEAR(moved.class_logits.at({q, k}), base.class_logits.at({src, k}), 1e-9);
        for (int k = 0; k < 4; ++k)
            EXPECT_NEAR(moved.boxes.at({q, k}), base.boxes.at({src, k}), 1e-9);
        for (size_t t = 0; t < moved.attention[static_cast<size_t>(q)].values.size(); ++t)
            EXPECT_NEAR(moved.attention[static_cast<size_t>(q)].values[t],
                        base.attention[static_cast<size_t>(src)].values[t], 1e-9);
    }
}

TEST(Detector, EndToEndGradMatchesFdOnSmallImage) {
    ModelConfig cfg = tiny_config();
    Model m = model_init(cfg, 8);
    DataSpec ds;
    ds.image_size = 16;
    ds.num_classes = 3;
    ds.max_objects = 2;
    SceneSample s = generate(25, 3, ds);
    ASSERT_GE(s.targets.size(), 1u);
    PrototypeAssignment assign = assign_prototypes(cfg.prototypes, cfg.num_classes);
    LossCoeffs co;
    auto eval = [&]() {
        Tape tape;
        ForwardOut f = model_forward(m, s, NeckNormMode::Softmax);
        return image_loss(f.class_logits, f.boxes, f.proto_tokens, f.grid_h, f.grid_w, s.targets,
                          assign, co, 1.0)
            .total.item();
    };
    std::vector<NamedParam> params = m.params();
    zero_grads(params);
    {
        Tape tape;
        ForwardOut f = model_forward(m, s, NeckNormMode::Softmax);
        ImageLoss l = image_loss(f.class_logits, f.boxes, f.proto_tokens, f.grid_h, f.grid_w,
                                 s.targets, assign, co, 1.0);
        tape.backward(l.total);
    }
    check_params_against_fd(params, eval, grads_of(params), 6, 1e-4);
}

TEST(Detector, GradientReachesEveryTensorInAllModes) {
    ModelConfig cfg = tiny_config();
    cfg.image_size = 32;
    Model m = model_init(cfg, 9);
    DataSpec ds;
    ds.image_size = 32;
    ds.num_classes = 3;
    ds.max_objects = 2;
    PrototypeAssignment assign = assign_prototypes(cfg.prototypes, cfg.num_classes);
    LossCoeffs co;
    for (NeckNormMode mode :
         {NeckNormMode::Softmax, NeckNormMode::Sparsemax, NeckNormMode::Argmax}) {
        std::vector<NamedParam> params = m.params();
        zero_grads(params);
        for (uint64_t idx = 0; idx < 3; ++idx) {
            SceneSample s = generate(26, idx, ds);
            Tape tape;
            ForwardOut f = model_forward(m, s, mode);
            ImageLoss l = image_loss(f.class_logits, f.boxes, f.proto_tokens, f.grid_h, f.grid_w,
                                     s.targets, assign, co, 1.0);
            tape.backward(l.total);
        }
        for (NamedParam& p : params) {
            // The neck's pre-quantization norm only runs on the hard path, so
            // soft modes legitimately leave it untouched.
            if (mode != NeckNormMode::Argmax && p.name.rfind("neck.ln.", 0) == 0) continue;
            bool any = false;
            if (p.tensor.has_grad())
                for (double g : p.tensor.grad()) any = any || g != 0.0;
            EXPECT_TRUE(any) << "no gradient reached " << p.name << " under mode "
                             << to_string(mode);
        }
    }
}

TEST(Neck, SparsemaxKeepsFewerThanAllPrototypesAfterAStep) {
    ModelConfig cfg = tiny_config();
    cfg.image_size = 32;
    Model m = model_init(cfg, 10);
    DataSpec ds;
    ds.image_size = 32;
    ds.num_classes = 3;
    ds.max_objects = 2;
    PrototypeAssignment assign = assign_prototypes(cfg.prototypes, cfg.num_classes);
    LossCoeffs co;
    std::vector<NamedParam> params = m.params();
    AdamState opt;
    adam_init(opt, params);
    SceneSample s = generate(27, 0, ds);
    for (int step = 0; step < 2; ++step) {
        zero_grads(params);
        Tape tape;
        ForwardOut f = model_forward(m, s, NeckNormMode::Sparsemax);
        ImageLoss l = image_loss(f.class_logits, f.boxes, f.proto_tokens, f.grid_h, f.grid_w,
                                 s.targets, assign, co, 1.0);
        tape.backward(l.total);
        adam_step(params, opt, 1e-3);
    }
    Tape tape;
    ForwardOut f = model_forward(m, s, NeckNormMode::Sparsemax);
    PrototypeMap pm = prototype_map_from_tokens(f.proto_tokens.data(), cfg.prototypes, f.grid_h,
                                                f.grid_w, NeckNormMode::Sparsemax);
    EXPECT_LT(avg_active_prototypes(pm), static_cast<double>(cfg.prototypes));
    EXPECT_GE(avg_active_prototypes(pm), 1.0);
}
