#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "chameleon/errors.hpp"
#include "chameleon/tensor.hpp"

// Single-file checkpoint: one line of compact UTF-8 JSON (the manifest)
// terminated by '\n', followed by the tensors as little-endian float32 blobs
// in manifest order. Offsets in the manifest are relative to the first blob
// byte.
//
//   {"format":"chameleon-ckpt","version":1,"metadata":{...},
//    "tensors":[{"name":"wte","shape":[100,64],"offset":0}, ...]}\n
//   <blob bytes>
namespace chameleon::checkpoint {

inline constexpr const char* kFormat = "chameleon-ckpt";
inline constexpr int kVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct Checkpoint {
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    const Tensor& at(const std::string& name) const {
        for (const auto& nt : tensors)
            if (nt.name == name) return nt.tensor;
        throw CheckpointError("checkpoint has no tensor named '" + name + "'");
    }

    bool contains(const std::string& name) const {
        for (const auto& nt : tensors)
            if (nt.name == name) return true;
        return false;
    }
};

inline std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

inline float round_to_f32(Real v) { return static_cast<float>(v); }

inline void save(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json manifest;
    manifest["format"] = kFormat;
    manifest["version"] = kVersion;
    manifest["metadata"] = ckpt.metadata;
    manifest["tensors"] = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& nt : ckpt.tensors) {
        manifest["tensors"].push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}, {"offset", offset}});
        offset += nt.tensor.numel() * sizeof(float);
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
    const std::string header = manifest.dump();
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.put('\n');
    std::vector<std::uint32_t> buf;
    for (const auto& nt : ckpt.tensors) {
        buf.resize(nt.tensor.numel());
        auto src = nt.tensor.data();
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_le(std::bit_cast<std::uint32_t>(round_to_f32(src[i])));
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw CheckpointError("failed writing checkpoint: " + path.string());
}

inline Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
    std::string header;
    if (!std::getline(in, header)) throw CheckpointError("checkpoint has no manifest: " + path.string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError("malformed checkpoint manifest in " + path.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != kFormat) throw CheckpointError("not a chameleon checkpoint: " + path.string());
    std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    Checkpoint ckpt;
    ckpt.metadata = manifest.value("metadata", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
        const auto shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::size_t>();
        const std::size_t n = shape_numel(shape);
        if (offset + n * sizeof(float) > blob.size()) {
            throw CheckpointError("tensor '" + entry.at("name").get<std::string>() + "' runs past end of file");
        }
        std::vector<Real> values(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t bits;
            std::memcpy(&bits, blob.data() + offset + i * sizeof(float), sizeof(bits));
            values[i] = static_cast<Real>(std::bit_cast<float>(to_le(bits)));
        }
        ckpt.tensors.push_back({entry.at("name").get<std::string>(), Tensor(shape, std::move(values))});
    }
    return ckpt;
}

// FNV-1a over each tensor's name, shape and in-memory values.
inline std::uint64_t checksum(const std::vector<NamedTensor>& tensors) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* p, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& nt : tensors) {
        feed(nt.name.data(), nt.name.size());
        for (std::size_t dim : nt.tensor.shape()) {
            const std::uint64_t d = dim;
            feed(&d, sizeof(d));
        }
        for (Real v : nt.tensor.data()) feed(&v, sizeof(v));
    }
    return h;
}

}  // namespace chameleon::checkpoint
