#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "protoneck/errors.hpp"
#include "protoneck/maps.hpp"
#include "protoneck/rng.hpp"
#include "protoneck/tensor.hpp"

namespace protoneck {

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), b);
}

// Cuts the image into non-overlapping patch*patch blocks and flattens each
// into one row: [HW, 3*patch*patch], grid in row-major cell order. The image
// is input data, so the result is a plain constant.
struct PatchGrid {
    Tensor pixels;
    int h = 0, w = 0;
};

inline PatchGrid patchify(const std::vector<double>& image, int img_h, int img_w, int patch) {
    if (patch <= 0 || img_h % patch != 0 || img_w % patch != 0)
        throw config_error("image " + std::to_string(img_h) + "x" + std::to_string(img_w) +
                           " not divisible by patch size " + std::to_string(patch));
    PatchGrid g;
    g.h = img_h / patch;
    g.w = img_w / patch;
    int64_t row_len = 3ll * patch * patch;
    g.pixels = Tensor::zeros({static_cast<int64_t>(g.h) * g.w, row_len});
    double* out = g.pixels.data().data();
    for (int gi = 0; gi < g.h; ++gi)
        for (int gj = 0; gj < g.w; ++gj) {
            double* row = out + (static_cast<size_t>(gi) * g.w + gj) * row_len;
            size_t k = 0;
            for (int c = 0; c < 3; ++c)
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        row[k++] = image[(static_cast<size_t>(c) * img_h + gi * patch + dy) *
                                             static_cast<size_t>(img_w) +
                                         gj * patch + dx];
        }
    return g;
}

// Fixed 2-D sinusoidal positions, half the channels per axis, sin/cos pairs
// over geometrically spaced wavelengths.
inline Tensor position_encoding(int h, int w, int c) {
    if (c % 4 != 0) throw config_error("position encoding needs channels divisible by 4");
    int half = c / 2, pairs = half / 2;
    Tensor pe = Tensor::zeros({static_cast<int64_t>(h) * w, c});
    double* out = pe.data().data();
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double* row = out + (static_cast<size_t>(i) * w + j) * c;
            for (int k = 0; k < pairs; ++k) {
                double freq = std::pow(10000.0, -2.0 * k / half);
                row[2 * k] = std::sin(i * freq);
                row[2 * k + 1] = std::cos(i * freq);
                row[half + 2 * k] = std::sin(j * freq);
                row[half + 2 * k + 1] = std::cos(j * freq);
            }
        }
    return pe;
}

struct AttnParams {
    Tensor qw, qb, kw, kb, vw, vb, ow, ob;
};

struct FfnParams {
    Tensor w1, b1, w2, b2;
};

struct LnParams {
    Tensor gain, bias;
};

struct EncoderLayerParams {
    AttnParams attn;
    LnParams ln1;
    FfnParams ffn;
    LnParams ln2;
};

struct DecoderLayerParams {
    AttnParams self_attn;
    LnParams ln1;
    AttnParams cross;
    LnParams ln2;
    FfnParams ffn;
    LnParams ln3;
};

struct DetectorParams {
    int patch = 8;
    int heads = 4;
    Tensor patch_w, patch_b;  // [3*patch*patch, Cb]
    std::vector<EncoderLayerParams> encoder;
    LnParams enc_final;
    std::vector<DecoderLayerParams> decoder;
    LnParams dec_final;
    Tensor queries;           // [Q, C]
    Tensor class_w, class_b;  // [C, K+1]
    Tensor box_w, box_b;      // [C, 4]
};

namespace detail {

inline Tensor init_mat(int rows, int cols, Rng& rng) {
    Tensor t = Tensor::zeros({rows, cols}, true);
    double s = 1.0 / std::sqrt(static_cast<double>(rows));
    for (double& v : t.data()) v = rng.normal() * s;
    return t;
}

inline AttnParams init_attn(int c, Rng& rng) {
    AttnParams p;
    p.qw = init_mat(c, c, rng);
    p.qb = Tensor::zeros({1, c}, true);
    p.kw = init_mat(c, c, rng);
    p.kb = Tensor::zeros({1, c}, true);
    p.vw = init_mat(c, c, rng);
    p.vb = Tensor::zeros({1, c}, true);
    p.ow = init_mat(c, c, rng);
    p.ob = Tensor::zeros({1, c}, true);
    return p;
}

inline FfnParams init_ffn(int c, int f, Rng& rng) {
    FfnParams p;
    p.w1 = init_mat(c, f, rng);
    p.b1 = Tensor::zeros({1, f}, true);
    p.w2 = init_mat(f, c, rng);
    p.b2 = Tensor::zeros({1, c}, true);
    return p;
}

inline LnParams init_ln(int c) {
    return {Tensor::filled({c}, 1.0, true), Tensor::zeros({c}, true)};
}

inline void collect_attn(AttnParams& p, const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".q.weight", p.qw});
    out.push_back({prefix + ".q.bias", p.qb});
    out.push_back({prefix + ".k.weight", p.kw});
    out.push_back({prefix + ".k.bias", p.kb});
    out.push_back({prefix + ".v.weight", p.vw});
    out.push_back({prefix + ".v.bias", p.vb});
    out.push_back({prefix + ".out.weight", p.ow});
    out.push_back({prefix + ".out.bias", p.ob});
}

inline void collect_ffn(FfnParams& p, const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".w1.weight", p.w1});
    out.push_back({prefix + ".w1.bias", p.b1});
    out.push_back({prefix + ".w2.weight", p.w2});
    out.push_back({prefix + ".w2.bias", p.b2});
}

inline void collect_ln(LnParams& p, const std::string& prefix, std::vector<NamedParam>& out) {
    out.push_back({prefix + ".gain", p.gain});
    out.push_back({prefix + ".bias", p.bias});
}

// Scaled dot-product attention with per-head column slices. `capture`, when
// set, receives the post-softmax weights of every head as flat value copies.
// Positional signals join only the query/key projections; values stay content.
inline Tensor mha(const Tensor& q_in, const Tensor& kv_in, const AttnParams& p, int heads,
                  std::vector<std::vector<double>>* capture = nullptr,
                  const Tensor* q_pos = nullptr, const Tensor* k_pos = nullptr) {
    int64_t c = q_in.shape()[1];
    if (c % heads != 0) throw config_error("channels not divisible by head count");
    int64_t dh = c / heads;
    Tensor q = linear(q_pos ? add(q_in, *q_pos) : q_in, p.qw, p.qb);
    Tensor k = linear(k_pos ? add(kv_in, *k_pos) : kv_in, p.kw, p.kb);
    Tensor v = linear(kv_in, p.vw, p.vb);
    double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    for (int h = 0; h < heads; ++h) {
        std::vector<int64_t> cols(static_cast<size_t>(dh));
        std::iota(cols.begin(), cols.end(), h * dh);
        Tensor qh = index_select(q, 1, cols);
        Tensor kh = index_select(k, 1, cols);
        Tensor vh = index_select(v, 1, cols);
        Tensor attn = softmax_axis(scale(matmul(qh, transpose2d(kh)), inv), 1);
        if (capture) capture->push_back(attn.data());
        outs.push_back(matmul(attn, vh));
    }
    return linear(concat(outs, 1), p.ow, p.ob);
}

inline Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
    return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

// Pre-norm residual blocks: each sublayer reads a normalized copy of the
// stream and adds its output back, which keeps gradients usable from step one
// without warmup. Token positions re-enter every attention through q/k.
inline Tensor encoder_layer(const Tensor& x, EncoderLayerParams& p, int heads,
                            const Tensor& pos) {
    Tensor h = layernorm(x, p.ln1.gain, p.ln1.bias, 1);
    Tensor a = add(x, mha(h, h, p.attn, heads, nullptr, &pos, &pos));
    Tensor h2 = layernorm(a, p.ln2.gain, p.ln2.bias, 1);
    return add(a, ffn_forward(h2, p.ffn));
}

inline Tensor decoder_layer(const Tensor& x, const Tensor& memory, DecoderLayerParams& p,
                            int heads, std::vector<std::vector<double>>* capture,
                            const Tensor& query_pos, const Tensor& mem_pos) {
    Tensor h = layernorm(x, p.ln1.gain, p.ln1.bias, 1);
    Tensor a = add(x, mha(h, h, p.self_attn, heads, nullptr, &query_pos, &query_pos));
    Tensor h2 = layernorm(a, p.ln2.gain, p.ln2.bias, 1);
    Tensor b = add(a, mha(h2, memory, p.cross, heads, capture, &query_pos, &mem_pos));
    Tensor h3 = layernorm(b, p.ln3.gain, p.ln3.bias, 1);
    return add(b, ffn_forward(h3, p.ffn));
}

}  // namespace detail

inline DetectorParams detector_init(int patch, int cb, int c, int classes, int queries,
                                    int enc_layers, int dec_layers, int heads, int ffn_dim,
                                    Rng& rng) {
    DetectorParams dp;
    dp.patch = patch;
    dp.heads = heads;
    dp.patch_w = detail::init_mat(3 * patch * patch, cb, rng);
    dp.patch_b = Tensor::zeros({1, cb}, true);
    for (int l = 0; l < enc_layers; ++l)
        dp.encoder.push_back({detail::init_attn(c, rng), detail::init_ln(c),
                              detail::init_ffn(c, ffn_dim, rng), detail::init_ln(c)});
    dp.enc_final = detail::init_ln(c);
    for (int l = 0; l < dec_layers; ++l)
        dp.decoder.push_back({detail::init_attn(c, rng), detail::init_ln(c),
                              detail::init_attn(c, rng), detail::init_ln(c),
                              detail::init_ffn(c, ffn_dim, rng), detail::init_ln(c)});
    dp.dec_final = detail::init_ln(c);
    dp.queries = detail::init_mat(queries, c, rng);
    dp.class_w = detail::init_mat(c, classes + 1, rng);
    dp.class_b = Tensor::zeros({1, classes + 1}, true);
    dp.box_w = detail::init_mat(c, 4, rng);
    dp.box_b = Tensor::zeros({1, 4}, true);
    return dp;
}

inline void detector_collect_params(DetectorParams& dp, const std::string& prefix,
                                    std::vector<NamedParam>& out) {
    out.push_back({prefix + ".patch.weight", dp.patch_w});
    out.push_back({prefix + ".patch.bias", dp.patch_b});
    for (size_t l = 0; l < dp.encoder.size(); ++l) {
        std::string base = prefix + ".encoder" + std::to_string(l);
        detail::collect_attn(dp.encoder[l].attn, base + ".attn", out);
        detail::collect_ln(dp.encoder[l].ln1, base + ".ln1", out);
        detail::collect_ffn(dp.encoder[l].ffn, base + ".ffn", out);
        detail::collect_ln(dp.encoder[l].ln2, base + ".ln2", out);
    }
    detail::collect_ln(dp.enc_final, prefix + ".enc_final", out);
    for (size_t l = 0; l < dp.decoder.size(); ++l) {
        std::string base = prefix + ".decoder" + std::to_string(l);
        detail::collect_attn(dp.decoder[l].self_attn, base + ".self", out);
        detail::collect_ln(dp.decoder[l].ln1, base + ".ln1", out);
        detail::collect_attn(dp.decoder[l].cross, base + ".cross", out);
        detail::collect_ln(dp.decoder[l].ln2, base + ".ln2", out);
        detail::collect_ffn(dp.decoder[l].ffn, base + ".ffn", out);
        detail::collect_ln(dp.decoder[l].ln3, base + ".ln3", out);
    }
    detail::collect_ln(dp.dec_final, prefix + ".dec_final", out);
    out.push_back({prefix + ".queries", dp.queries});
    out.push_back({prefix + ".class.weight", dp.class_w});
    out.push_back({prefix + ".class.bias", dp.class_b});
    out.push_back({prefix + ".box.weight", dp.box_w});
    out.push_back({prefix + ".box.bias", dp.box_b});
}

inline Tensor backbone_forward(const PatchGrid& g, DetectorParams& dp) {
    Tensor f = linear(g.pixels, dp.patch_w, dp.patch_b);
    check_finite(f, "backbone.patch_embed");
    return f;  // [HW, Cb]
}

struct DetectOut {
    Tensor class_logits;                  // [Q, K+1]
    Tensor boxes;                         // [Q, 4], sigmoid range
    std::vector<AttentionMap> attention;  // per query, grid-shaped, sums to 1
};

// Runs encoder over the token grid and decodes Q queries. The query
// embeddings seed the decoder stream and also act as learned positions that
// every layer re-injects, so a query's identity survives each block.
// The reported attention per query is the mean over decoder layers and heads
// of the post-softmax cross-attention rows.
inline DetectOut detect(const Tensor& neck_output, DetectorParams& dp, int grid_h, int grid_w) {
    int64_t c = neck_output.shape()[1];
    Tensor pos = position_encoding(grid_h, grid_w, static_cast<int>(c));
    Tensor x = neck_output;
    for (auto& layer : dp.encoder) x = detail::encoder_layer(x, layer, dp.heads, pos);
    x = layernorm(x, dp.enc_final.gain, dp.enc_final.bias, 1);
    check_finite(x, "encoder");

    std::vector<std::vector<double>> captured;
    Tensor dq = dp.queries;
    for (auto& layer : dp.decoder)
        dq = detail::decoder_layer(dq, x, layer, dp.heads, &captured, dp.queries, pos);
    dq = layernorm(dq, dp.dec_final.gain, dp.dec_final.bias, 1);
    check_finite(dq, "decoder");

    DetectOut out;
    out.class_logits = linear(dq, dp.class_w, dp.class_b);
    out.boxes = sigmoid(linear(dq, dp.box_w, dp.box_b));
    check_finite(out.class_logits, "class_head");
    check_finite(out.boxes, "box_head");

    int64_t nq = dp.queries.shape()[0];
    size_t hw = static_cast<size_t>(grid_h) * static_cast<size_t>(grid_w);
    out.attention.assign(static_cast<size_t>(nq), AttentionMap{});
    for (int64_t q = 0; q < nq; ++q) {
        AttentionMap& m = out.attention[static_cast<size_t>(q)];
        m.h = grid_h;
        m.w = grid_w;
        m.values.assign(hw, 0.0);
        for (const auto& a : captured)
            for (size_t t = 0; t < hw; ++t) m.values[t] += a[static_cast<size_t>(q) * hw + t];
        for (double& v : m.values) v /= static_cast<double>(captured.size());
    }
    return out;
}

}  // namespace protoneck
