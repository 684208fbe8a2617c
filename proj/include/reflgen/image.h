// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace reflgen {

/// Row-major binary raster. Pixel (row, col) has its center at (x = col, y = row).
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

    std::uint8_t& at(int row, int col) { return data[static_cast<std::size_t>(row) * width + col]; }
    std::uint8_t at(int row, int col) const { return data[static_cast<std::size_t>(row) * width + col]; }

    std::size_t count() const;
    bool empty() const { return count() == 0; }

    bool operator==(const Mask&) const = default;
};

/// Interleaved float image (HWC), values nominally in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 3;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c = 3, float fill = 0.0f)
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

    float& at(int row, int col, int ch) {
        return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
    }
    float at(int row, int col, int ch) const {
        return data[(static_cast<std::size_t>(row) * width + col) * channels + ch];
    }

    bool same_shape(const Image& other) const {
        return height == other.height && width == other.width && channels == other.channels;
    }

    bool operator==(const Image&) const = default;
};

struct PixelRect {
    int row0 = 0, col0 = 0;  // inclusive
    int row1 = 0, col1 = 0;  // exclusive
    int rows() const { return row1 - row0; }
    int cols() const { return col1 - col0; }
};

/// Tight axis-aligned bounds of the set pixels; throws EmptyRegion on an empty mask.
PixelRect mask_bounds(const Mask& mask);

Image flip_vertical(const Image& img);
Image crop(const Image& img, const PixelRect& rect);
Image resize_bilinear(const Image& img, int height, int width);

/// 8-bit PNG storage. Images are quantized with round(v * 255); masks map {0,1} <-> {0,255}.
void write_png(const std::filesystem::path& path, const Image& img);
void write_png(const std::filesystem::path& path, const Mask& mask);
Image read_png_image(const std::filesystem::path& path);
Mask read_png_mask(const std::filesystem::path& path);

/// Round every value to the nearest multiple of 1/255 and clamp to [0, 1].
void quantize_8bit(Image& img);

}  // namespace reflgen
