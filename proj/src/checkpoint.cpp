// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include "reflgen/checkpoint.h"

#include <cstring>
#include <fstream>
#include <unordered_map>

#include "reflgen/errors.h"

namespace reflgen::checkpoint {

namespace fs = std::filesystem;

namespace {

std::string dtype_name(torch::ScalarType t) {
    switch (t) {
        case torch::kFloat32: return "f32";
        case torch::kFloat64: return "f64";
        case torch::kInt64: return "i64";
        case torch::kInt32: return "i32";
        case torch::kUInt8: return "u8";
        default: throw Error(ErrorCode::InvalidArgument, "unsupported tensor dtype in checkpoint");
    }
}

torch::ScalarType dtype_from(const std::string& s) {
    if (s == "f32") return torch::kFloat32;
    if (s == "f64") return torch::kFloat64;
    if (s == "i64") return torch::kInt64;
    if (s == "i32") return torch::kInt32;
    if (s == "u8") return torch::kUInt8;
    throw Error(ErrorCode::CorruptData, "unknown dtype '" + s + "'");
}

}  // namespace

const torch::Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw Error(ErrorCode::CorruptData, "checkpoint has no tensor '" + name + "'");
}

void save(const Checkpoint& ckpt, const fs::path& path) {
    nlohmann::json index = nlohmann::json::array();
    std::vector<torch::Tensor> blobs;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        torch::Tensor c = t.detach().to(torch::kCPU).contiguous();
        const auto nbytes = static_cast<std::uint64_t>(c.numel() * c.element_size());
        index.push_back({{"name", name},
                         {"dtype", dtype_name(c.scalar_type())},
                         {"shape", c.sizes().vec()},
                         {"offset", offset},
                         {"nbytes", nbytes}});
        offset += nbytes;
        blobs.push_back(std::move(c));
    }
    const nlohmann::json header{{"kind", ckpt.kind},
                                {"config", ckpt.config},
                                {"metadata", ckpt.metadata},
                                {"rng_state", ckpt.rng_state},
                                {"tensors", index}};
    const std::string text = header.dump();

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    // Write to a sibling and rename so a crash never leaves a torn checkpoint.
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw Error(ErrorCode::Io, "cannot write " + tmp.string());
        const std::uint64_t len = text.size();
        out.write(kMagic, sizeof kMagic);
        out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& b : blobs)
            out.write(static_cast<const char*>(b.data_ptr()), static_cast<std::streamsize>(b.numel() * b.element_size()));
        if (!out) throw Error(ErrorCode::Io, "write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load(const fs::path& path, const std::string& expected_kind) {
    if (!fs::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    const auto corrupt = [&](const std::string& why) {
        return Error(ErrorCode::CorruptData, "checkpoint " + path.string() + ": " + why);
    };

    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw corrupt("bad magic");
    if (version != kVersion) throw corrupt("unsupported version " + std::to_string(version));
    const auto file_size = static_cast<std::uint64_t>(fs::file_size(path));
    if (len > file_size) throw corrupt("header length past end of file");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw corrupt("truncated header");

    Checkpoint ckpt;
    try {
        const auto header = nlohmann::json::parse(text);
        ckpt.kind = header.at("kind").get<std::string>();
        ckpt.config = header.at("config");
        ckpt.metadata = header.at("metadata");
        ckpt.rng_state = header.at("rng_state").get<std::string>();
        const std::uint64_t data_start = sizeof kMagic + sizeof version + sizeof len + len;
        for (const auto& e : header.at("tensors")) {
            const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
            const auto dtype = dtype_from(e.at("dtype").get<std::string>());
            const auto offset = e.at("offset").get<std::uint64_t>();
            const auto nbytes = e.at("nbytes").get<std::uint64_t>();
            torch::Tensor t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
            if (static_cast<std::uint64_t>(t.numel() * t.element_size()) != nbytes) throw corrupt("size mismatch");
            if (data_start + offset + nbytes > file_size) throw corrupt("truncated tensor data");
            in.seekg(static_cast<std::streamoff>(data_start + offset));
            in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
            if (!in) throw corrupt("read failed");
            ckpt.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
        }
    } catch (const nlohmann::json::exception& ex) {
        throw corrupt(ex.what());
    }
    if (!expected_kind.empty() && ckpt.kind != expected_kind)
        throw corrupt("expected a '" + expected_kind + "' checkpoint, found '" + ckpt.kind + "'");
    return ckpt;
}

std::vector<std::pair<std::string, torch::Tensor>> state_of(const torch::nn::Module& module) {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& p : module.named_parameters()) out.emplace_back(p.key(), p.value().detach().clone().contiguous());
    for (const auto& b : module.named_buffers()) out.emplace_back(b.key(), b.value().detach().clone().contiguous());
    return out;
}

void load_state(torch::nn::Module& module, const std::vector<std::pair<std::string, torch::Tensor>>& state,
                const std::string& prefix) {
    std::unordered_map<std::string, const torch::Tensor*> by_name;
    for (const auto& [n, t] : state) by_name[n] = &t;
    torch::NoGradGuard no_grad;
    auto copy = [&](const std::string& name, torch::Tensor& dst) {
        const auto it = by_name.find(prefix + name);
        if (it == by_name.end()) throw Error(ErrorCode::CorruptData, "checkpoint is missing '" + prefix + name + "'");
        if (it->second->sizes() != dst.sizes())
            throw Error(ErrorCode::CorruptData, "shape mismatch for '" + prefix + name + "'");
        dst.copy_(*it->second);
    };
    for (auto& p : module.named_parameters()) copy(p.key(), p.value());
    for (auto& b : module.named_buffers()) copy(b.key(), b.value());
}

}  // namespace reflgen::checkpoint
