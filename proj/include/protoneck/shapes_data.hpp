#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "protoneck/errors.hpp"
#include "protoneck/losses.hpp"
#include "protoneck/rng.hpp"

namespace protoneck {

// Synthetic detection scenes: colored shapes on a noisy dark background.
// Classes: 0 circle, 1 square, 2 triangle, 3 cross.
struct DataSpec {
    int num_classes = 4;
    int image_size = 64;
    int max_objects = 4;
    double noise = 0.08;
    bool allow_occlusion = true;
    // Optional non-square override (0 means image_size); exercised by the
    // padding path, the standard dataset stays square.
    int image_h = 0, image_w = 0;
};

struct SceneSample {
    int h = 0, w = 0;                  // canvas extents
    int content_h = 0, content_w = 0;  // real image region (rest is padding)
    std::vector<double> image;         // [3][h][w], values in [0,1]
    std::vector<Target> targets;       // boxes normalized to the canvas
};

namespace detail {

inline void hsv_to_rgb(double hue, double s, double v, double rgb[3]) {
    double c = v * s;
    double hp = hue * 6.0;
    double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) r = c, g = x;
    else if (hp < 2) r = x, g = c;
    else if (hp < 3) g = c, b = x;
    else if (hp < 4) g = x, b = c;
    else if (hp < 5) r = x, b = c;
    else r = c, b = x;
    double m = v - c;
    rgb[0] = r + m;
    rgb[1] = g + m;
    rgb[2] = b + m;
}

// Rasterize one shape into mask (h*w); returns false if nothing was drawn.
inline bool draw_shape(int cls, int cx, int cy, int half, int h, int w, std::vector<uint8_t>& mask) {
    bool any = false;
    auto put = [&](int y, int x) {
        if (y < 0 || y >= h || x < 0 || x >= w) return;
        mask[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)] = 1;
        any = true;
    };
    switch (cls) {
        case 0:  // circle
            for (int dy = -half; dy <= half; ++dy)
                for (int dx = -half; dx <= half; ++dx)
                    if (dx * dx + dy * dy <= half * half) put(cy + dy, cx + dx);
            break;
        case 1:  // square
            for (int dy = -half; dy <= half; ++dy)
                for (int dx = -half; dx <= half; ++dx) put(cy + dy, cx + dx);
            break;
        case 2:  // triangle, apex up
            for (int dy = -half; dy <= half; ++dy) {
                double t = static_cast<double>(dy + half) / (2.0 * half);
                int hw_row = static_cast<int>(std::floor(t * half));
                for (int dx = -hw_row; dx <= hw_row; ++dx) put(cy + dy, cx + dx);
            }
            break;
        default: {  // cross
            int bar = std::max(1, half / 3);
            for (int dy = -half; dy <= half; ++dy)
                for (int dx = -bar; dx <= bar; ++dx) put(cy + dy, cx + dx);
            for (int dx = -half; dx <= half; ++dx)
                for (int dy = -bar; dy <= bar; ++dy) put(cy + dy, cx + dx);
            break;
        }
    }
    return any;
}

}  // namespace detail

// Fully determined by (seed, index): the sample can be regenerated out of
// order, in parallel, and across platforms.
inline SceneSample generate(uint64_t seed, uint64_t index, const DataSpec& spec) {
    int h = spec.image_h > 0 ? spec.image_h : spec.image_size;
    int w = spec.image_w > 0 ? spec.image_w : spec.image_size;
    Rng rng(seed, index);
    SceneSample s;
    s.h = s.content_h = h;
    s.w = s.content_w = w;
    s.image.assign(3 * static_cast<size_t>(h) * static_cast<size_t>(w), 0.0);

    // Background: additive uniform noise over black.
    for (double& v : s.image) v = rng.uniform(0.0, spec.noise);

    int cap = (std::min(h, w) - 1) / 2;  // largest half-extent with room to place
    if (cap < 4) throw config_error("image too small for the shape generator (needs 9px)");
    int hi = std::min(9, cap + 1);

    int count = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(spec.max_objects)));
    std::vector<Box> placed;
    for (int obj = 0; obj < count; ++obj) {
        int cls = static_cast<int>(rng.below(static_cast<uint64_t>(spec.num_classes)));
        for (int attempt = 0; attempt < 20; ++attempt) {
            int half = 4 + static_cast<int>(rng.below(static_cast<uint64_t>(hi - 4)));
            int cx = half + static_cast<int>(rng.below(static_cast<uint64_t>(w - 2 * half)));
            int cy = half + static_cast<int>(rng.below(static_cast<uint64_t>(h - 2 * half)));
            Box rough{(cx + 0.5) / w, (cy + 0.5) / h, (2.0 * half + 1) / w, (2.0 * half + 1) / h};
            if (!spec.allow_occlusion) {
                bool clash = false;
                for (const Box& other : placed) clash = clash || iou(rough, other) > 0.0;
                if (clash) continue;
            }
            std::vector<uint8_t> mask(static_cast<size_t>(h) * static_cast<size_t>(w), 0);
            if (!detail::draw_shape(cls, cx, cy, half, h, w, mask)) continue;

            double rgb[3];
            detail::hsv_to_rgb(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.6, 1.0), rgb);
            int x0 = w, x1 = -1, y0 = h, y1 = -1;
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    if (!mask[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)])
                        continue;
                    x0 = std::min(x0, x);
                    x1 = std::max(x1, x);
                    y0 = std::min(y0, y);
                    y1 = std::max(y1, y);
                    for (int c = 0; c < 3; ++c)
                        s.image[(static_cast<size_t>(c) * h + y) * static_cast<size_t>(w) + x] = rgb[c];
                }
            // Tight pixel bound, normalized to the canvas.
            Box bb{(x0 + x1 + 1) / 2.0 / w, (y0 + y1 + 1) / 2.0 / h, (x1 - x0 + 1.0) / w,
                   (y1 - y0 + 1.0) / h};
            placed.push_back(bb);
            s.targets.push_back(Target{cls, bb});
            break;
        }
    }
    return s;
}

// Zero-pads right/bottom to a square canvas and rescales the boxes into the
// new frame. Content extents keep the original size for masking.
inline SceneSample pad_to_square(const SceneSample& in, int target) {
    if (target < in.h || target < in.w)
        throw contract_error("pad_to_square: target " + std::to_string(target) +
                             " smaller than image " + std::to_string(in.h) + "x" + std::to_string(in.w));
    SceneSample out;
    out.h = out.w = target;
    out.content_h = in.content_h;
    out.content_w = in.content_w;
    out.image.assign(3 * static_cast<size_t>(target) * static_cast<size_t>(target), 0.0);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < in.h; ++y)
            for (int x = 0; x < in.w; ++x)
                out.image[(static_cast<size_t>(c) * target + y) * static_cast<size_t>(target) + x] =
                    in.image[(static_cast<size_t>(c) * in.h + y) * static_cast<size_t>(in.w) + x];
    double sx = static_cast<double>(in.w) / target, sy = static_cast<double>(in.h) / target;
    for (const Target& t : in.targets)
        out.targets.push_back(
            Target{t.cls, Box{t.box.cx * sx, t.box.cy * sy, t.box.w * sx, t.box.h * sy}});
    return out;
}

// Validity of feature cells at the given patch size: a cell is padding (0)
// exactly when its pixel block lies entirely outside the content region.
inline std::vector<uint8_t> feature_valid_mask(const SceneSample& s, int patch) {
    if (s.h % patch != 0 || s.w % patch != 0)
        throw config_error("feature_valid_mask: image " + std::to_string(s.h) + "x" +
                           std::to_string(s.w) + " not divisible by patch " + std::to_string(patch));
    int fh = s.h / patch, fw = s.w / patch;
    std::vector<uint8_t> mask(static_cast<size_t>(fh) * static_cast<size_t>(fw), 1);
    for (int i = 0; i < fh; ++i)
        for (int j = 0; j < fw; ++j)
            if (i * patch >= s.content_h || j * patch >= s.content_w)
                mask[static_cast<size_t>(i) * static_cast<size_t>(fw) + static_cast<size_t>(j)] = 0;
    return mask;
}

// Index bases keeping the splits disjoint no matter how many samples each
// split draws (up to a million apiece).
constexpr uint64_t kTrainIndexBase = 0;
constexpr uint64_t kValIndexBase = 1u << 20;
constexpr uint64_t kTestIndexBase = 2u << 20;

inline uint64_t split_index_base(const std::string& split) {
    if (split == "train") return kTrainIndexBase;
    if (split == "val") return kValIndexBase;
    if (split == "test") return kTestIndexBase;
    throw config_error("unknown split '" + split + "' (train|val|test)");
}

// ---------------------------------------------------------------------------
// On-disk export: magic, record count, then per record the extents, f32
// pixels (channel-major), and the target list. All integers little-endian.
//
//   "PNSHAPES1"                       9 bytes
//   u32 record_count
//   record:
//     u32 h, u32 w, u32 channels(=3), u32 target_count
//     f32 pixels[channels*h*w]
//     target: u32 class, f32 cx, f32 cy, f32 w, f32 h

inline void write_dataset(const std::string& path, const std::vector<SceneSample>& samples) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open '" + path + "' for writing");
    f.write("PNSHAPES1", 9);
    auto put_u32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    auto put_f32 = [&](float v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    put_u32(static_cast<uint32_t>(samples.size()));
    for (const SceneSample& s : samples) {
        put_u32(static_cast<uint32_t>(s.h));
        put_u32(static_cast<uint32_t>(s.w));
        put_u32(3);
        put_u32(static_cast<uint32_t>(s.targets.size()));
        for (double v : s.image) put_f32(static_cast<float>(v));
        for (const Target& t : s.targets) {
            put_u32(static_cast<uint32_t>(t.cls));
            put_f32(static_cast<float>(t.box.cx));
            put_f32(static_cast<float>(t.box.cy));
            put_f32(static_cast<float>(t.box.w));
            put_f32(static_cast<float>(t.box.h));
        }
    }
    if (!f) throw data_error("write failed for '" + path + "'");
}

inline std::vector<SceneSample> read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open '" + path + "'");
    char magic[9];
    f.read(magic, 9);
    if (!f || std::memcmp(magic, "PNSHAPES1", 9) != 0)
        throw data_error("'" + path + "' is not a shapes dataset (bad magic)");
    auto get_u32 = [&]() {
        uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    auto get_f32 = [&]() {
        float v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    uint32_t count = get_u32();
    std::vector<SceneSample> samples;
    for (uint32_t r = 0; r < count && f; ++r) {
        SceneSample s;
        s.h = s.content_h = static_cast<int>(get_u32());
        s.w = s.content_w = static_cast<int>(get_u32());
        uint32_t channels = get_u32();
        uint32_t nt = get_u32();
        if (channels != 3) throw data_error("'" + path + "': unsupported channel count");
        if (s.h <= 0 || s.w <= 0 || s.h > 4096 || s.w > 4096)
            throw data_error("'" + path + "': implausible extents");
        s.image.resize(3 * static_cast<size_t>(s.h) * static_cast<size_t>(s.w));
        for (double& v : s.image) v = get_f32();
        for (uint32_t t = 0; t < nt; ++t) {
            Target tg;
            tg.cls = static_cast<int>(get_u32());
            tg.box.cx = get_f32();
            tg.box.cy = get_f32();
            tg.box.w = get_f32();
            tg.box.h = get_f32();
            s.targets.push_back(tg);
        }
        samples.push_back(std::move(s));
    }
    if (!f) throw data_error("'" + path + "' ended unexpectedly");
    return samples;
}

}  // namespace protoneck
