// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace reflgen {

enum class ErrorCode {
    InvalidBox,
    InvalidCoefficient,
    EmptyRegion,
    Numeric,
    InvalidArgument,
    ShapeMismatch,
    DegenerateScene,
    Io,
    MissingFile,
    CorruptData,
    Split,
    Divergence,
    Usage,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace reflgen
