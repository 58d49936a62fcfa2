#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "protoneck/errors.hpp"
#include "protoneck/losses.hpp"
#include "protoneck/maps.hpp"
#include "protoneck/shapes_data.hpp"

namespace protoneck {

struct Rgb {
    uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb& o) const { return r == o.r && g == o.g && b == o.b; }
};

// Saturated, mutually distinct overlay colors; cyan is reserved for the
// residual "everything else" mass and stays out of the ranked list.
struct Palette {
    std::vector<Rgb> colors;
    Rgb catch_all{0, 255, 255};
};

inline Palette default_palette() {
    Palette p;
    p.colors = {
        {255, 225, 0},   // yellow
        {235, 45, 35},   // red
        {60, 200, 60},   // green
        {70, 105, 230},  // blue
        {235, 60, 235},  // magenta
        {255, 150, 30},  // orange
        {150, 80, 220},  // purple
        {160, 220, 40},  // lime
    };
    return p;
}

struct RgbImage {
    int h = 0, w = 0;
    std::vector<uint8_t> pixels;  // interleaved rgb rows

    Rgb at(int y, int x) const {
        size_t k = (static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)) * 3;
        return {pixels[k], pixels[k + 1], pixels[k + 2]};
    }
};

inline void write_ppm(const std::string& path, const RgbImage& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open '" + path + "' for writing");
    f << "P6\n" << img.w << ' ' << img.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!f) throw data_error("write failed for '" + path + "'");
}

inline std::string map_filename(const std::string& split, uint64_t index, const std::string& mode,
                                char tag = 0, int id = -1) {
    std::string name = split + "_" + std::to_string(index) + "_" + mode;
    if (tag) name += std::string("_") + tag + std::to_string(id);
    return name + ".ppm";
}

namespace detail {

// 5x7 glyphs, one byte per row, low 5 bits used.
inline const uint8_t* glyph5x7(char c) {
    static const uint8_t digits[10][7] = {
        {0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e}, {0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e},
        {0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f}, {0x1e, 0x01, 0x01, 0x0e, 0x01, 0x01, 0x1e},
        {0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02}, {0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e},
        {0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e}, {0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
        {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e}, {0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c}};
    static const uint8_t p[7] = {0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10};
    static const uint8_t cc[7] = {0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e};
    static const uint8_t o[7] = {0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e};
    static const uint8_t t[7] = {0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04};
    static const uint8_t hh[7] = {0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11};
    static const uint8_t e[7] = {0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f};
    static const uint8_t r[7] = {0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11};
    static const uint8_t blank[7] = {0, 0, 0, 0, 0, 0, 0};
    if (c >= '0' && c <= '9') return digits[c - '0'];
    switch (c) {
        case 'P': return p;
        case 'C': return cc;
        case 'O': return o;
        case 'T': return t;
        case 'H': return hh;
        case 'E': return e;
        case 'R': return r;
        default: return blank;
    }
}

inline void draw_text(RgbImage& img, int y, int x, const std::string& text, Rgb color) {
    for (char c : text) {
        const uint8_t* rows = glyph5x7(c);
        for (int dy = 0; dy < 7; ++dy)
            for (int dx = 0; dx < 5; ++dx) {
                if (!(rows[dy] >> (4 - dx) & 1)) continue;
                int yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= img.h || xx < 0 || xx >= img.w) continue;
                size_t k = (static_cast<size_t>(yy) * img.w + xx) * 3;
                img.pixels[k] = color.r;
                img.pixels[k + 1] = color.g;
                img.pixels[k + 2] = color.b;
            }
        x += 6;
    }
}

inline uint8_t luma_byte(const SceneSample& s, int y, int x) {
    size_t base = static_cast<size_t>(y) * static_cast<size_t>(s.w) + static_cast<size_t>(x);
    size_t plane = static_cast<size_t>(s.h) * static_cast<size_t>(s.w);
    double v = 0.299 * s.image[base] + 0.587 * s.image[plane + base] +
               0.114 * s.image[2 * plane + base];
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline RgbImage grayscale_base(const SceneSample& s) {
    RgbImage img;
    img.h = s.h;
    img.w = s.w;
    img.pixels.resize(static_cast<size_t>(s.h) * s.w * 3);
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
            uint8_t g = luma_byte(s, y, x);
            size_t k = (static_cast<size_t>(y) * s.w + x) * 3;
            img.pixels[k] = img.pixels[k + 1] = img.pixels[k + 2] = g;
        }
    return img;
}

inline uint8_t mix_byte(double base, double over, double t) {
    return static_cast<uint8_t>(std::lround(std::clamp(base + t * (over - base), 0.0, 255.0)));
}

}  // namespace detail

// Prototypes ordered by how much mass each carries in `weight_of` (ties to
// the lower index), truncated to k.
inline std::vector<int> rank_prototypes(const std::vector<double>& mass, int k) {
    std::vector<int> order(mass.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return mass[static_cast<size_t>(a)] > mass[static_cast<size_t>(b)]; });
    order.resize(static_cast<size_t>(std::min<size_t>(static_cast<size_t>(k), order.size())));
    return order;
}

// Convex per-cell color weights for the displayed prototypes; the last entry
// is the residual mass shown in the catch-all color.
inline std::vector<double> multi_cell_weights(const PrototypeMap& m, int i, int j,
                                              const std::vector<int>& shown) {
    std::vector<double> w;
    double used = 0;
    for (int p : shown) {
        double v = m.at(p, i, j);
        w.push_back(v);
        used += v;
    }
    w.push_back(std::max(0.0, 1.0 - used));
    return w;
}

// Single-prototype overlay: bright yellow whose opacity tracks the
// activation, over the grayscale scene. Zero activation leaves the base
// pixels untouched.
inline RgbImage render_single(const PrototypeMap& m, int p, const SceneSample& img,
                              Rgb overlay = {255, 225, 0}) {
    if (p < 0 || p >= m.p)
        throw contract_error("render_single: prototype " + std::to_string(p) + " out of range 0.." +
                             std::to_string(m.p - 1));
    RgbImage out = detail::grayscale_base(img);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double v = m.at(p, y * m.h / img.h, x * m.w / img.w);
            size_t k = (static_cast<size_t>(y) * img.w + x) * 3;
            out.pixels[k] = detail::mix_byte(out.pixels[k], overlay.r, v);
            out.pixels[k + 1] = detail::mix_byte(out.pixels[k + 1], overlay.g, v);
            out.pixels[k + 2] = detail::mix_byte(out.pixels[k + 2], overlay.b, v);
        }
    return out;
}

namespace detail {

constexpr int kLegendRow = 10;

inline void legend_entry(RgbImage& img, int row, Rgb color, const std::string& label) {
    int y = img.h - (row + 1) * kLegendRow + 1;
    for (int dy = 0; dy < 8; ++dy)
        for (int dx = 0; dx < 8; ++dx) {
            size_t k = (static_cast<size_t>(y + dy) * img.w + 2 + dx) * 3;
            img.pixels[k] = color.r;
            img.pixels[k + 1] = color.g;
            img.pixels[k + 2] = color.b;
        }
    draw_text(img, y, 14, label, {255, 255, 255});
}

// Shared by multi and product maps: per-cell convex blend of the shown
// prototypes' colors, modulated by a per-cell opacity field, plus a legend
// strip naming each displayed prototype.
inline RgbImage render_blend(const PrototypeMap& m, const std::vector<int>& shown,
                             const Palette& pal, const SceneSample& img,
                             const std::vector<double>& opacity,
                             const PrototypeAssignment* assign) {
    RgbImage base = grayscale_base(img);
    RgbImage out;
    out.h = base.h + (static_cast<int>(shown.size()) + 1) * kLegendRow + 2;
    out.w = base.w;
    out.pixels.assign(static_cast<size_t>(out.h) * out.w * 3, 0);
    for (int y = 0; y < base.h; ++y)
        for (int x = 0; x < base.w; ++x) {
            int ci = y * m.h / base.h, cj = x * m.w / base.w;
            std::vector<double> w = multi_cell_weights(m, ci, cj, shown);
            double rr = 0, gg = 0, bb = 0;
            for (size_t k = 0; k < shown.size(); ++k) {
                const Rgb& c = pal.colors[k];
                rr += w[k] * c.r;
                gg += w[k] * c.g;
                bb += w[k] * c.b;
            }
            rr += w.back() * pal.catch_all.r;
            gg += w.back() * pal.catch_all.g;
            bb += w.back() * pal.catch_all.b;
            double t = opacity[static_cast<size_t>(ci) * m.w + cj];
            size_t k = (static_cast<size_t>(y) * out.w + x) * 3;
            size_t kb = (static_cast<size_t>(y) * base.w + x) * 3;
            out.pixels[k] = mix_byte(base.pixels[kb], rr, t);
            out.pixels[k + 1] = mix_byte(base.pixels[kb + 1], gg, t);
            out.pixels[k + 2] = mix_byte(base.pixels[kb + 2], bb, t);
        }
    for (size_t k = 0; k < shown.size(); ++k) {
        std::string label = "P" + std::to_string(shown[k]);
        if (assign) label += " C" + std::to_string(assign->class_of[static_cast<size_t>(shown[k])]);
        legend_entry(out, static_cast<int>(shown.size()) - static_cast<int>(k), pal.colors[k], label);
    }
    legend_entry(out, 0, pal.catch_all, "OTHER");
    return out;
}

}  // namespace detail

// Top-k prototypes by total activation, each in its own color, residual mass
// in cyan; fully opaque so quantized maps come out in pure colors.
inline RgbImage render_multi(const PrototypeMap& m, int top_k, const Palette& pal,
                             const SceneSample& img, const PrototypeAssignment* assign = nullptr) {
    if (top_k < 1 || static_cast<size_t>(top_k) > pal.colors.size())
        throw contract_error("render_multi: top_k " + std::to_string(top_k) +
                             " exceeds palette size " + std::to_string(pal.colors.size()));
    std::vector<double> mass(static_cast<size_t>(m.p), 0.0);
    for (int p = 0; p < m.p; ++p)
        for (int i = 0; i < m.h; ++i)
            for (int j = 0; j < m.w; ++j) mass[static_cast<size_t>(p)] += m.at(p, i, j);
    std::vector<int> shown = rank_prototypes(mass, top_k);
    std::vector<double> opacity(static_cast<size_t>(m.h) * m.w, 1.0);
    return detail::render_blend(m, shown, pal, img, opacity, assign);
}

// Isotropic Gaussian blur over the grid, renormalized to sum 1. Each output
// cell is a convex average over the kernel window clipped to the grid, so
// blurring never raises the maximum and a uniform field stays uniform.
inline AttentionMap blur_attention(const AttentionMap& a, double sigma) {
    if (sigma <= 0.0) return a;
    int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    for (int d = -radius; d <= radius; ++d)
        kernel[static_cast<size_t>(d + radius)] = std::exp(-0.5 * d * d / (sigma * sigma));

    auto pass = [&](const std::vector<double>& in, std::vector<double>& out, int h, int w,
                    bool vertical) {
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double acc = 0, wsum = 0;
                int c = vertical ? i : j, lim = vertical ? h : w;
                for (int d = -radius; d <= radius; ++d) {
                    int cc = c + d;
                    if (cc < 0 || cc >= lim) continue;
                    double k = kernel[static_cast<size_t>(d + radius)];
                    size_t idx = vertical ? static_cast<size_t>(cc) * w + j
                                          : static_cast<size_t>(i) * w + cc;
                    acc += k * in[idx];
                    wsum += k;
                }
                out[static_cast<size_t>(i) * w + j] = acc / wsum;
            }
    };
    std::vector<double> tmp(a.values.size(), 0.0);
    AttentionMap out = a;
    pass(a.values, tmp, a.h, a.w, false);
    pass(tmp, out.values, a.h, a.w, true);
    double total = 0;
    for (double v : out.values) total += v;
    if (total <= 0) throw numeric_error("blur_attention: attention mass vanished");
    for (double& v : out.values) v /= total;
    return out;
}

// Product map: the attended part of the prototype map for one detection.
// Cell opacity follows the blurred attention, colors follow the prototype
// distribution; ranking weighs prototypes by the mass they carry inside the
// attended region.
inline RgbImage render_product(const AttentionMap& att, const PrototypeMap& m, int top_k,
                               const Palette& pal, const SceneSample& img,
                               double blur_sigma = 1.5,
                               const PrototypeAssignment* assign = nullptr) {
    if (att.h != m.h || att.w != m.w)
        throw shape_error("render_product: attention grid " + std::to_string(att.h) + "x" +
                          std::to_string(att.w) + " does not match map " + std::to_string(m.h) +
                          "x" + std::to_string(m.w));
    if (top_k < 1 || static_cast<size_t>(top_k) > pal.colors.size())
        throw contract_error("render_product: top_k exceeds palette size");
    AttentionMap blurred = blur_attention(att, blur_sigma);
    std::vector<double> attended(static_cast<size_t>(m.p), 0.0);
    for (int i = 0; i < m.h; ++i)
        for (int j = 0; j < m.w; ++j)
            for (int p = 0; p < m.p; ++p)
                attended[static_cast<size_t>(p)] += blurred.at(i, j) * m.at(p, i, j);
    std::vector<int> shown = rank_prototypes(attended, top_k);
    // The blurred attention itself is the opacity field: per-prototype
    // intensity is then blurred * m_p, never above the attention peak, zero
    // wherever attention is zero.
    return detail::render_blend(m, shown, pal, img, blurred.values, assign);
}

}  // namespace protoneck
