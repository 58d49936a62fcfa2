#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "protoneck/errors.hpp"
#include "protoneck/losses.hpp"
#include "protoneck/model.hpp"
#include "protoneck/neck.hpp"
#include "protoneck/shapes_data.hpp"

namespace protoneck {

// Flat key = value run configuration. Every field has a usable default, so
// an empty file is a valid base run; unknown keys are hard errors.
struct RunConfig {
    int num_classes = 4;
    int image_size = 64;
    int patch = 8;
    int channels = 64;
    int backbone_channels = 64;
    int prototypes = 16;
    int queries = 10;
    int enc_layers = 2;
    int dec_layers = 2;
    int heads = 4;
    int ffn_dim = 128;

    std::string neck_mode = "softmax";  // softmax | sparsemax | argmax | none
    std::map<int, int> protos_extra;    // class -> additional prototypes
    double align_start = 1.2, align_end = 0.7;
    double argmax_start = 0.0, argmax_end = 5.0;  // percent of images quantized

    int epochs = 30;
    double lr = 1e-3;
    int batch_size = 4;
    uint64_t seed = 1;
    std::vector<uint64_t> seeds = {1, 2, 3};

    int train_samples = 2000;
    int val_samples = 200;
    int test_samples = 200;
    double noise = 0.08;
    int max_objects = 4;
    bool allow_occlusion = true;

    double coef_ce = 1.0, coef_l1 = 5.0, coef_giou = 2.0;
    double no_object_weight = 0.1;

    double blur_sigma = 1.5;
    int topk = 5;
    std::string out_dir = "out";

    std::vector<double> sweep_align;  // alignment-strength axis
    std::vector<double> sweep_quant;  // quantization-percent axis

    bool has_neck() const { return neck_mode != "none"; }

    ModelConfig model_config() const {
        ModelConfig mc;
        mc.num_classes = num_classes;
        mc.image_size = image_size;
        mc.patch = patch;
        mc.channels = channels;
        mc.backbone_channels = backbone_channels;
        mc.prototypes = prototypes;
        mc.queries = queries;
        mc.enc_layers = enc_layers;
        mc.dec_layers = dec_layers;
        mc.heads = heads;
        mc.ffn_dim = ffn_dim;
        mc.use_neck = has_neck();
        return mc;
    }

    DataSpec data_spec() const {
        DataSpec ds;
        ds.num_classes = num_classes;
        ds.image_size = image_size;
        ds.max_objects = max_objects;
        ds.noise = noise;
        ds.allow_occlusion = allow_occlusion;
        return ds;
    }

    LossCoeffs loss_coeffs() const {
        LossCoeffs co;
        co.ce = coef_ce;
        co.l1 = coef_l1;
        co.giou = coef_giou;
        co.no_object_weight = no_object_weight;
        return co;
    }

    ArgmaxSchedule argmax_schedule() const { return {argmax_start, argmax_end}; }

    NeckNormMode soft_mode() const {
        // The mode the schedule falls back to when an image is not quantized.
        return neck_mode == "none" ? NeckNormMode::Softmax : neck_mode_from_string(neck_mode);
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

struct ConfigCursor {
    std::string source;
    int line = 0;

    [[noreturn]] void fail(const std::string& msg) const {
        throw config_error(source + ":" + std::to_string(line) + ": " + msg);
    }

    int64_t to_int(const std::string& v) const {
        size_t used = 0;
        int64_t out = 0;
        try {
            out = std::stoll(v, &used);
        } catch (const std::exception&) {
            fail("expected an integer, got '" + v + "'");
        }
        if (used != v.size()) fail("expected an integer, got '" + v + "'");
        return out;
    }

    double to_double(const std::string& v) const {
        size_t used = 0;
        double out = 0;
        try {
            out = std::stod(v, &used);
        } catch (const std::exception&) {
            fail("expected a number, got '" + v + "'");
        }
        if (used != v.size()) fail("expected a number, got '" + v + "'");
        return out;
    }

    bool to_bool(const std::string& v) const {
        if (v == "1" || v == "true") return true;
        if (v == "0" || v == "false") return false;
        fail("expected a boolean (0/1/true/false), got '" + v + "'");
    }

    std::vector<std::string> split_list(const std::string& v) const {
        std::vector<std::string> parts;
        std::string cur;
        std::stringstream ss(v);
        while (std::getline(ss, cur, ','))
            if (!trim(cur).empty()) parts.push_back(trim(cur));
        return parts;
    }
};

inline void apply_preset(RunConfig& cfg, const std::string& name, const ConfigCursor& at) {
    if (name == "base") {
        return;
    } else if (name == "few-prototypes") {
        cfg.prototypes = cfg.prototypes / 2;
    } else if (name == "sparsemax") {
        cfg.neck_mode = "sparsemax";
    } else if (name == "argmax") {
        cfg.neck_mode = "argmax";
    } else if (name == "strong-alignment") {
        cfg.align_start = cfg.align_end = 8.0;
    } else {
        at.fail("unknown preset '" + name +
                "' (base|few-prototypes|sparsemax|argmax|strong-alignment)");
    }
}

inline void apply_key(RunConfig& cfg, const std::string& key, const std::string& value,
                      const ConfigCursor& at) {
    if (key == "num_classes") cfg.num_classes = static_cast<int>(at.to_int(value));
    else if (key == "image_size") cfg.image_size = static_cast<int>(at.to_int(value));
    else if (key == "patch") cfg.patch = static_cast<int>(at.to_int(value));
    else if (key == "channels") cfg.channels = static_cast<int>(at.to_int(value));
    else if (key == "backbone_channels") cfg.backbone_channels = static_cast<int>(at.to_int(value));
    else if (key == "prototypes") cfg.prototypes = static_cast<int>(at.to_int(value));
    else if (key == "queries") cfg.queries = static_cast<int>(at.to_int(value));
    else if (key == "enc_layers") cfg.enc_layers = static_cast<int>(at.to_int(value));
    else if (key == "dec_layers") cfg.dec_layers = static_cast<int>(at.to_int(value));
    else if (key == "heads") cfg.heads = static_cast<int>(at.to_int(value));
    else if (key == "ffn_dim") cfg.ffn_dim = static_cast<int>(at.to_int(value));
    else if (key == "neck_mode") {
        if (value != "none") neck_mode_from_string(value);  // validates
        cfg.neck_mode = value;
    } else if (key == "protos_extra") {
        cfg.protos_extra.clear();
        for (const std::string& part : at.split_list(value)) {
            size_t colon = part.find(':');
            if (colon == std::string::npos) at.fail("expected class:count pairs, got '" + part + "'");
            cfg.protos_extra[static_cast<int>(at.to_int(trim(part.substr(0, colon))))] =
                static_cast<int>(at.to_int(trim(part.substr(colon + 1))));
        }
    } else if (key == "align_coef") {
        cfg.align_start = cfg.align_end = at.to_double(value);
    } else if (key == "align_start") cfg.align_start = at.to_double(value);
    else if (key == "align_end") cfg.align_end = at.to_double(value);
    else if (key == "argmax_pct") {
        cfg.argmax_start = cfg.argmax_end = at.to_double(value);
    } else if (key == "argmax_start") cfg.argmax_start = at.to_double(value);
    else if (key == "argmax_end") cfg.argmax_end = at.to_double(value);
    else if (key == "epochs") cfg.epochs = static_cast<int>(at.to_int(value));
    else if (key == "lr") cfg.lr = at.to_double(value);
    else if (key == "batch_size") cfg.batch_size = static_cast<int>(at.to_int(value));
    else if (key == "seed") cfg.seed = static_cast<uint64_t>(at.to_int(value));
    else if (key == "seeds") {
        cfg.seeds.clear();
        for (const std::string& part : at.split_list(value))
            cfg.seeds.push_back(static_cast<uint64_t>(at.to_int(part)));
        if (cfg.seeds.empty()) at.fail("seeds list is empty");
    } else if (key == "train_samples") cfg.train_samples = static_cast<int>(at.to_int(value));
    else if (key == "val_samples") cfg.val_samples = static_cast<int>(at.to_int(value));
    else if (key == "test_samples") cfg.test_samples = static_cast<int>(at.to_int(value));
    else if (key == "noise") cfg.noise = at.to_double(value);
    else if (key == "max_objects") cfg.max_objects = static_cast<int>(at.to_int(value));
    else if (key == "allow_occlusion") cfg.allow_occlusion = at.to_bool(value);
    else if (key == "coef_ce") cfg.coef_ce = at.to_double(value);
    else if (key == "coef_l1") cfg.coef_l1 = at.to_double(value);
    else if (key == "coef_giou") cfg.coef_giou = at.to_double(value);
    else if (key == "no_object_weight") cfg.no_object_weight = at.to_double(value);
    else if (key == "blur_sigma") cfg.blur_sigma = at.to_double(value);
    else if (key == "topk") cfg.topk = static_cast<int>(at.to_int(value));
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "sweep_align") {
        cfg.sweep_align.clear();
        for (const std::string& part : at.split_list(value)) cfg.sweep_align.push_back(at.to_double(part));
    } else if (key == "sweep_quant") {
        cfg.sweep_quant.clear();
        for (const std::string& part : at.split_list(value)) cfg.sweep_quant.push_back(at.to_double(part));
    } else if (key == "preset") apply_preset(cfg, value, at);
    else at.fail("unknown key '" + key + "'");
}

}  // namespace detail

inline void validate_config(const RunConfig& cfg) {
    auto fail = [](const std::string& msg) { throw config_error(msg); };
    if (cfg.image_size < 16) fail("image_size must be at least 16");
    if (cfg.patch <= 0 || cfg.image_size % cfg.patch != 0) fail("image_size must be divisible by patch");
    if (cfg.channels % cfg.heads != 0) fail("channels must be divisible by heads");
    if (cfg.channels % 4 != 0) fail("channels must be divisible by 4 for the position encoding");
    if (cfg.num_classes < 1) fail("num_classes must be positive");
    if (cfg.has_neck() && cfg.prototypes < cfg.num_classes)
        fail("prototypes must be at least num_classes");
    if (!cfg.has_neck() && cfg.backbone_channels != cfg.channels)
        fail("neck_mode none needs backbone_channels == channels");
    if (cfg.epochs < 1 || cfg.batch_size < 1) fail("epochs and batch_size must be positive");
    if (cfg.lr <= 0) fail("lr must be positive");
    if (cfg.train_samples < 1) fail("train_samples must be positive");
    if (cfg.val_samples < 0 || cfg.test_samples < 0) fail("sample counts cannot be negative");
    if (cfg.argmax_start < 0 || cfg.argmax_start > 100 || cfg.argmax_end < 0 ||
        cfg.argmax_end > 100)
        fail("argmax schedule percentages must lie in [0,100]");
    if (cfg.queries < cfg.max_objects) fail("queries must cover max_objects");
    if (cfg.topk < 1) fail("topk must be positive");
}

inline RunConfig parse_config_text(const std::string& text, const std::string& source) {
    RunConfig cfg;
    detail::ConfigCursor at{source, 0};
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        ++at.line;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) at.fail("expected key = value, got '" + line + "'");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) at.fail("missing key before '='");
        detail::apply_key(cfg, key, value, at);
    }
    validate_config(cfg);
    return cfg;
}

inline RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str(), path);
}

// Canonical dump of the effective settings; the run hash is taken over this,
// so defaults, file values and CLI overrides all count the same way.
inline std::string config_dump(const RunConfig& c) {
    std::ostringstream o;
    o.precision(17);
    auto list_u = [](const std::vector<uint64_t>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    auto list_d = [&o](const std::vector<double>& v) {
        std::ostringstream s;
        s.precision(17);
        for (size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
        return s.str();
    };
    o << "align_end = " << c.align_end << "\n";
    o << "align_start = " << c.align_start << "\n";
    o << "allow_occlusion = " << (c.allow_occlusion ? 1 : 0) << "\n";
    o << "argmax_end = " << c.argmax_end << "\n";
    o << "argmax_start = " << c.argmax_start << "\n";
    o << "backbone_channels = " << c.backbone_channels << "\n";
    o << "batch_size = " << c.batch_size << "\n";
    o << "blur_sigma = " << c.blur_sigma << "\n";
    o << "channels = " << c.channels << "\n";
    o << "coef_ce = " << c.coef_ce << "\n";
    o << "coef_giou = " << c.coef_giou << "\n";
    o << "coef_l1 = " << c.coef_l1 << "\n";
    o << "dec_layers = " << c.dec_layers << "\n";
    o << "enc_layers = " << c.enc_layers << "\n";
    o << "epochs = " << c.epochs << "\n";
    o << "ffn_dim = " << c.ffn_dim << "\n";
    o << "heads = " << c.heads << "\n";
    o << "image_size = " << c.image_size << "\n";
    o << "lr = " << c.lr << "\n";
    o << "max_objects = " << c.max_objects << "\n";
    o << "neck_mode = " << c.neck_mode << "\n";
    o << "no_object_weight = " << c.no_object_weight << "\n";
    o << "noise = " << c.noise << "\n";
    o << "num_classes = " << c.num_classes << "\n";
    o << "patch = " << c.patch << "\n";
    std::string extra;
    for (const auto& [k, v] : c.protos_extra)
        extra += (extra.empty() ? "" : ",") + std::to_string(k) + ":" + std::to_string(v);
    o << "protos_extra = " << extra << "\n";
    o << "prototypes = " << c.prototypes << "\n";
    o << "queries = " << c.queries << "\n";
    o << "seed = " << c.seed << "\n";
    o << "seeds = " << list_u(c.seeds) << "\n";
    o << "sweep_align = " << list_d(c.sweep_align) << "\n";
    o << "sweep_quant = " << list_d(c.sweep_quant) << "\n";
    o << "test_samples = " << c.test_samples << "\n";
    o << "topk = " << c.topk << "\n";
    o << "train_samples = " << c.train_samples << "\n";
    o << "val_samples = " << c.val_samples << "\n";
    return o.str();
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string config_hash(const RunConfig& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(config_dump(cfg))));
    return buf;
}

}  // namespace protoneck
