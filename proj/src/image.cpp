// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include "reflgen/image.h"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "reflgen/errors.h"

namespace reflgen {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidBox: return "invalid box";
        case ErrorCode::InvalidCoefficient: return "invalid coefficient";
        case ErrorCode::EmptyRegion: return "empty region";
        case ErrorCode::Numeric: return "numeric error";
        case ErrorCode::InvalidArgument: return "invalid argument";
        case ErrorCode::ShapeMismatch: return "shape mismatch";
        case ErrorCode::DegenerateScene: return "degenerate scene";
        case ErrorCode::Io: return "I/O error";
        case ErrorCode::MissingFile: return "missing file";
        case ErrorCode::CorruptData: return "corrupt data";
        case ErrorCode::Split: return "split error";
        case ErrorCode::Divergence: return "divergence";
        case ErrorCode::Usage: return "usage error";
    }
    return "error";
}

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

PixelRect mask_bounds(const Mask& mask) {
    PixelRect r{mask.height, mask.width, -1, -1};
    for (int i = 0; i < mask.height; ++i) {
        for (int j = 0; j < mask.width; ++j) {
            if (!mask.at(i, j)) continue;
            r.row0 = std::min(r.row0, i);
            r.col0 = std::min(r.col0, j);
            r.row1 = std::max(r.row1, i + 1);
            r.col1 = std::max(r.col1, j + 1);
        }
    }
    if (r.row1 < 0) throw Error(ErrorCode::EmptyRegion, "mask has no foreground pixels");
    return r;
}

Image flip_vertical(const Image& img) {
    Image out(img.height, img.width, img.channels);
    const std::size_t row_len = static_cast<std::size_t>(img.width) * img.channels;
    for (int i = 0; i < img.height; ++i) {
        std::copy_n(img.data.begin() + static_cast<std::ptrdiff_t>(i * row_len), row_len,
                    out.data.begin() + static_cast<std::ptrdiff_t>((img.height - 1 - i) * row_len));
    }
    return out;
}

Image crop(const Image& img, const PixelRect& rect) {
    const int r0 = std::clamp(rect.row0, 0, img.height), r1 = std::clamp(rect.row1, 0, img.height);
    const int c0 = std::clamp(rect.col0, 0, img.width), c1 = std::clamp(rect.col1, 0, img.width);
    Image out(r1 - r0, c1 - c0, img.channels);
    for (int i = r0; i < r1; ++i)
        for (int j = c0; j < c1; ++j)
            for (int c = 0; c < img.channels; ++c) out.at(i - r0, j - c0, c) = img.at(i, j, c);
    return out;
}

namespace {

cv::Mat as_mat(const Image& img) {
    // cv::Mat view over const data; callers only read from it.
    return cv::Mat(img.height, img.width, CV_32FC(img.channels), const_cast<float*>(img.data.data()));
}

}  // namespace

Image resize_bilinear(const Image& img, int height, int width) {
    if (img.height < 1 || img.width < 1 || height < 1 || width < 1)
        throw Error(ErrorCode::InvalidArgument, "resize of an empty image");
    Image out(height, width, img.channels);
    cv::Mat dst(height, width, CV_32FC(img.channels), out.data.data());
    cv::resize(as_mat(img), dst, dst.size(), 0, 0, cv::INTER_LINEAR);
    return out;
}

void quantize_8bit(Image& img) {
    for (float& v : img.data) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
}

void write_png(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 3) throw Error(ErrorCode::InvalidArgument, "write_png expects a 3-channel image");
    cv::Mat bgr(img.height, img.width, CV_8UC3);
    for (int i = 0; i < img.height; ++i) {
        auto* row = bgr.ptr<cv::Vec3b>(i);
        for (int j = 0; j < img.width; ++j)
            for (int c = 0; c < 3; ++c)
                row[j][2 - c] = static_cast<std::uint8_t>(std::lround(std::clamp(img.at(i, j, c), 0.0f, 1.0f) * 255.0f));
    }
    if (!cv::imwrite(path.string(), bgr)) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

void write_png(const std::filesystem::path& path, const Mask& mask) {
    cv::Mat m(mask.height, mask.width, CV_8UC1);
    for (int i = 0; i < mask.height; ++i)
        for (int j = 0; j < mask.width; ++j) m.at<std::uint8_t>(i, j) = mask.at(i, j) ? 255 : 0;
    if (!cv::imwrite(path.string(), m)) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

Image read_png_image(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw Error(ErrorCode::CorruptData, "unreadable image " + path.string());
    Image img(bgr.rows, bgr.cols, 3);
    for (int i = 0; i < bgr.rows; ++i) {
        const auto* row = bgr.ptr<cv::Vec3b>(i);
        for (int j = 0; j < bgr.cols; ++j)
            for (int c = 0; c < 3; ++c) img.at(i, j, c) = static_cast<float>(row[j][2 - c]) / 255.0f;
    }
    return img;
}

Mask read_png_mask(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw Error(ErrorCode::CorruptData, "unreadable mask " + path.string());
    Mask mask(m.rows, m.cols);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) {
            const std::uint8_t v = m.at<std::uint8_t>(i, j);
            if (v != 0 && v != 255) throw Error(ErrorCode::CorruptData, "non-binary mask " + path.string());
            mask.at(i, j) = v ? 1 : 0;
        }
    return mask;
}

}  // namespace reflgen
