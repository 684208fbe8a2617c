// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include "reflgen/errors.h"

namespace reflgen::testutil {

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("reflgen_test_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace reflgen::testutil

#define EXPECT_REFLGEN_ERROR(stmt, expected_code)                                      \
    do {                                                                               \
        try {                                                                          \
            stmt;                                                                      \
            ADD_FAILURE() << "expected " << ::reflgen::to_string(expected_code);      \
        } catch (const ::reflgen::Error& e) {                                          \
            EXPECT_EQ(e.code(), expected_code) << e.what();                            \
        }                                                                              \
    } while (0)
