// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>

#include <Eigen/Core>

#include "reflgen/image.h"

namespace reflgen::geometry {

/// Oriented rectangle in pixel coordinates (origin top-left, y down).
///
/// `theta` is the angle in degrees of the w-edge, counterclockwise as seen on
/// screen, so the w-edge direction is (cos θ, -sin θ) in (x, y) pixel
/// coordinates. Canonical boxes keep theta in [-90, 90).
struct RotatedBox {
    double cx = 0.0;
    double cy = 0.0;
    double w = 1.0;
    double h = 1.0;
    double theta = 0.0;
};

/// Offsets mapping an object box to its reflection box. Angles in radians.
struct BoxRegressionCoeffs {
    double tx = 0.0;
    double ty = 0.0;
    double tw = 0.0;
    double th = 0.0;
    double ttheta = 0.0;
};

struct GaussianBox {
    Eigen::Vector2d mean;
    Eigen::Matrix2d cov;
};

struct Point {
    double x = 0.0;
    double y = 0.0;
};

struct KfiouOptions {
    /// Multiply the fused volume by exp(-d^T (S1+S2)^-1 d / 2). Disabling it
    /// makes the measure blind to center distance.
    bool center_factor = true;
};

/// Unit vector along the w-edge / h-edge of a box with angle `theta_deg`.
Point w_axis(double theta_deg);
Point h_axis(double theta_deg);

/// Reduce an angle in degrees to [-90, 90).
double canonical_angle(double theta_deg);
RotatedBox canonicalize(const RotatedBox& box);

/// Throws InvalidBox unless all fields are finite and w, h > 0.
void validate(const RotatedBox& box);
bool is_valid(const RotatedBox& box);

std::array<Point, 4> corners(const RotatedBox& box);

BoxRegressionCoeffs encode_regression(const RotatedBox& object, const RotatedBox& reflection);
RotatedBox decode_regression(const RotatedBox& object, const BoxRegressionCoeffs& t);

GaussianBox box_to_gaussian(const RotatedBox& box);

/// Kalman-fused overlap volume v_f of the two Gaussian embeddings.
double kfiou_overlap(const RotatedBox& a, const RotatedBox& b, KfiouOptions opts = {});
/// v_f / (v_a + v_b - v_f); lies in (0, 1/3], with 1/3 reached for identical boxes.
double kfiou(const RotatedBox& a, const RotatedBox& b, KfiouOptions opts = {});
/// exp(1 - kfiou), in [e^(2/3), e).
double kfiou_loss(const RotatedBox& pred, const RotatedBox& gt, KfiouOptions opts = {});

struct LossWithGradient {
    double value = 0.0;
    /// d loss / d (cx, cy, w, h, theta) of the predicted box; theta in degrees.
    std::array<double, 5> grad{};
};

/// kfiou_loss and its exact gradient w.r.t. the predicted box (forward-mode AD).
LossWithGradient kfiou_loss_with_gradient(const RotatedBox& pred, const RotatedBox& gt, KfiouOptions opts = {});

/// Pixels whose centers lie inside or on the boundary of the box.
Mask rasterize_box(const RotatedBox& box, int height, int width);

/// Minimum-area rectangle around the foreground pixel centers, grown by one
/// pixel in w and h so that it covers the pixel footprints (a single pixel
/// gives a 1x1 box). The result is labeled with |theta| <= 45; ties prefer the
/// smallest |theta|. Throws EmptyRegion.
RotatedBox min_area_box(const Mask& mask);

}  // namespace reflgen::geometry
