#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "protoneck/errors.hpp"
#include "protoneck/tensor.hpp"

namespace protoneck {

// Checkpoint layout: version line, manifest length (u64 LE), JSON manifest,
// then the raw f64 payload. The manifest records name, shape and byte offset
// of every array plus free-form string metadata.
inline constexpr const char* kCheckpointVersion = "protoneck-v1";

inline void save_checkpoint(const std::string& path, const std::vector<NamedParam>& params,
                            const std::map<std::string, std::string>& meta = {}) {
    nlohmann::json manifest;
    manifest["version"] = kCheckpointVersion;
    manifest["meta"] = meta;
    uint64_t offset = 0;
    nlohmann::json plist = nlohmann::json::array();
    for (const NamedParam& p : params) {
        nlohmann::json e;
        e["name"] = p.name;
        e["shape"] = p.tensor.shape();
        e["offset"] = offset;
        offset += p.tensor.numel() * sizeof(double);
        plist.push_back(e);
    }
    manifest["params"] = plist;
    std::string text = manifest.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw checkpoint_error("cannot open '" + path + "' for writing");
    f << kCheckpointVersion << '\n';
    uint64_t len = text.size();
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const NamedParam& p : params)
        f.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                static_cast<std::streamsize>(p.tensor.numel() * sizeof(double)));
    if (!f) throw checkpoint_error("write failed for '" + path + "'");
}

namespace detail {

inline nlohmann::json read_manifest(std::ifstream& f, const std::string& path) {
    std::string version;
    if (!std::getline(f, version) || version != kCheckpointVersion)
        throw checkpoint_error("'" + path + "' is not a " + kCheckpointVersion + " checkpoint");
    uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    if (!f || len > (1ull << 30)) throw checkpoint_error("'" + path + "': bad manifest length");
    std::string text(len, '\0');
    f.read(text.data(), static_cast<std::streamsize>(len));
    if (!f) throw checkpoint_error("'" + path + "': truncated manifest");
    nlohmann::json manifest = nlohmann::json::parse(text, nullptr, false);
    if (manifest.is_discarded() || !manifest.contains("params"))
        throw checkpoint_error("'" + path + "': unreadable manifest");
    return manifest;
}

}  // namespace detail

inline std::map<std::string, std::string> read_checkpoint_meta(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw checkpoint_error("cannot open '" + path + "'");
    nlohmann::json manifest = detail::read_manifest(f, path);
    std::map<std::string, std::string> meta;
    if (manifest.contains("meta"))
        for (auto& [k, v] : manifest["meta"].items()) meta[k] = v.get<std::string>();
    return meta;
}

// Strict by design: the parameter sets must match exactly, shapes included.
// A checkpoint from a differently sized model should fail here, not produce
// quietly wrong numbers downstream.
inline void load_checkpoint(const std::string& path, std::vector<NamedParam>& params) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw checkpoint_error("cannot open '" + path + "'");
    nlohmann::json manifest = detail::read_manifest(f, path);
    std::streampos data_start = f.tellg();

    std::map<std::string, std::pair<Shape, uint64_t>> entries;
    for (const auto& e : manifest["params"]) {
        Shape shape;
        for (const auto& d : e["shape"]) shape.push_back(d.get<int64_t>());
        entries[e["name"].get<std::string>()] = {shape, e["offset"].get<uint64_t>()};
    }
    if (entries.size() != params.size())
        throw checkpoint_error("'" + path + "' holds " + std::to_string(entries.size()) +
                               " arrays, model has " + std::to_string(params.size()));
    for (NamedParam& p : params) {
        auto it = entries.find(p.name);
        if (it == entries.end())
            throw checkpoint_error("'" + path + "' is missing parameter '" + p.name + "'");
        if (it->second.first != p.tensor.shape())
            throw checkpoint_error("parameter '" + p.name + "' has shape " +
                                   shape_str(it->second.first) + " in '" + path + "', expected " +
                                   shape_str(p.tensor.shape()));
        f.seekg(data_start + static_cast<std::streamoff>(it->second.second));
        f.read(reinterpret_cast<char*>(p.tensor.data().data()),
               static_cast<std::streamsize>(p.tensor.numel() * sizeof(double)));
        if (!f) throw checkpoint_error("'" + path + "': truncated data for '" + p.name + "'");
    }
    for (const NamedParam& p : params) check_finite(p.tensor, "checkpoint parameter " + p.name);
}

}  // namespace protoneck
