// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>

namespace reflgen::cli {

// Exit statuses.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeError = 1;
inline constexpr int kUsageError = 2;

/// Environment variable naming the default parent of every --out directory.
inline constexpr const char* kOutputRootEnv = "REFLGEN_OUTPUT_ROOT";

/// Entry point behind the reflgen tool. Subcommands: dataset generate, dataset split,
/// train-aux, train-diffusion, infer, evaluate, ablate. Values come from flags, then
/// from the optional --config INI file (unknown keys are rejected), then defaults; the
/// resolved values are written next to the command's outputs.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace reflgen::cli
