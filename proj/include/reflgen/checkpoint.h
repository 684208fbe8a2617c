// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace reflgen::checkpoint {

// File layout:
//   8 bytes  magic "RFLGCKPT"
//   uint32   format version
//   uint64   header length N
//   N bytes  JSON header {kind, config, metadata, rng_state, tensors: [{name, dtype, shape, offset, nbytes}]}
//   raw little-endian tensor blobs, offsets relative to the end of the header
inline constexpr char kMagic[8] = {'R', 'F', 'L', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

struct Checkpoint {
    std::string kind;  // "aux" or "diffusion"
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json metadata = nlohmann::json::object();
    std::string rng_state;
    std::vector<std::pair<std::string, torch::Tensor>> tensors;

    const torch::Tensor& tensor(const std::string& name) const;
};

void save(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Throws MissingFile, or CorruptData for bad magic/version/truncation.
Checkpoint load(const std::filesystem::path& path, const std::string& expected_kind = "");

/// Parameters and buffers, in registration order, copied to contiguous CPU tensors.
std::vector<std::pair<std::string, torch::Tensor>> state_of(const torch::nn::Module& module);

/// Copies into the module; every parameter/buffer must be present with a matching shape.
void load_state(torch::nn::Module& module, const std::vector<std::pair<std::string, torch::Tensor>>& state,
                const std::string& prefix = "");

}  // namespace reflgen::checkpoint
