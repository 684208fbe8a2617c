// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

// Test-only reference computations. Nothing here calls into the code paths
// that the oracles are used to check.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "reflgen/geometry.h"
#include "reflgen/image.h"

namespace reflgen::oracle {

using geometry::Point;
using geometry::RotatedBox;

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

/// Corners from first principles: rotate the axis-aligned corner offsets.
inline std::array<Point, 4> box_corners(const RotatedBox& b) {
    const double t = deg2rad(b.theta);
    // Screen-counterclockwise rotation in y-down coordinates.
    const double c = std::cos(t), s = std::sin(t);
    const std::array<std::array<double, 2>, 4> offs{{{-b.w / 2, -b.h / 2}, {b.w / 2, -b.h / 2},
                                                     {b.w / 2, b.h / 2}, {-b.w / 2, b.h / 2}}};
    std::array<Point, 4> out;
    for (int k = 0; k < 4; ++k) {
        const double ox = offs[k][0], oy = offs[k][1];
        out[k] = {b.cx + c * ox + s * oy, b.cy - s * ox + c * oy};
    }
    return out;
}

/// Max over corners of the distance to the nearest corner of the other box.
inline double corner_set_distance(const RotatedBox& a, const RotatedBox& b) {
    const auto ca = box_corners(a), cb = box_corners(b);
    double worst = 0.0;
    for (const auto& p : ca) {
        double best = 1e300;
        for (const auto& q : cb) best = std::min(best, std::hypot(p.x - q.x, p.y - q.y));
        worst = std::max(worst, best);
    }
    for (const auto& q : cb) {
        double best = 1e300;
        for (const auto& p : ca) best = std::min(best, std::hypot(p.x - q.x, p.y - q.y));
        worst = std::max(worst, best);
    }
    return worst;
}

/// Point-in-rectangle via the four edge half-planes (cross-product signs).
inline bool inside_half_planes(const std::array<Point, 4>& c, double x, double y, double eps = 1e-9) {
    int pos = 0, neg = 0;
    for (int k = 0; k < 4; ++k) {
        const Point& a = c[k];
        const Point& b = c[(k + 1) % 4];
        const double len = std::hypot(b.x - a.x, b.y - a.y);
        const double cr = ((b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x)) / len;
        if (cr > eps) ++pos;
        if (cr < -eps) ++neg;
    }
    return pos == 0 || neg == 0;
}

inline Mask rasterize_half_planes(const RotatedBox& b, int height, int width) {
    const auto c = box_corners(b);
    Mask m(height, width);
    for (int i = 0; i < height; ++i)
        for (int j = 0; j < width; ++j) m.at(i, j) = inside_half_planes(c, j, i) ? 1 : 0;
    return m;
}

/// (1 / 2π) ∫∫ g_a g_b over a midpoint grid, g the unnormalized box Gaussians.
inline double gaussian_product_mass(const RotatedBox& a, const RotatedBox& b, int n = 900) {
    auto inv_cov = [](const RotatedBox& r) {
        const double t = deg2rad(r.theta), c = std::cos(t), s = std::sin(t);
        // Principal axes (c, -s) with std w/2, (s, c) with std h/2.
        const double ia = 4.0 / (r.w * r.w), ib = 4.0 / (r.h * r.h);
        return std::array<double, 3>{ia * c * c + ib * s * s, -ia * c * s + ib * s * c, ia * s * s + ib * c * c};
    };
    const auto pa = inv_cov(a), pb = inv_cov(b);
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    // 6 sigma of the widest axis: the product is bounded by either factor.
    const double pad = 3.0 * std::max({a.w, a.h, b.w, b.h});
    for (const auto& r : {a, b}) {
        xmin = std::min(xmin, r.cx - pad);
        xmax = std::max(xmax, r.cx + pad);
        ymin = std::min(ymin, r.cy - pad);
        ymax = std::max(ymax, r.cy + pad);
    }
    const double dx = (xmax - xmin) / n, dy = (ymax - ymin) / n;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        const double y = ymin + (i + 0.5) * dy;
        for (int j = 0; j < n; ++j) {
            const double x = xmin + (j + 0.5) * dx;
            const double ax = x - a.cx, ay = y - a.cy, bx = x - b.cx, by = y - b.cy;
            const double qa = pa[0] * ax * ax + 2 * pa[1] * ax * ay + pa[2] * ay * ay;
            const double qb = pb[0] * bx * bx + 2 * pb[1] * bx * by + pb[2] * by * by;
            sum += std::exp(-0.5 * (qa + qb));
        }
    }
    return sum * dx * dy / (2.0 * std::numbers::pi);
}

/// Smallest w*h over a fixed angle grid, projecting every foreground pixel center.
inline double brute_force_min_area(const Mask& m, double step_deg = 0.5) {
    std::vector<Point> pts;
    for (int i = 0; i < m.height; ++i)
        for (int j = 0; j < m.width; ++j)
            if (m.at(i, j)) pts.push_back({static_cast<double>(j), static_cast<double>(i)});
    double best = 1e300;
    for (double a = 0.0; a < 180.0; a += step_deg) {
        const double c = std::cos(deg2rad(a)), s = std::sin(deg2rad(a));
        double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
        for (const auto& p : pts) {
            const double u = c * p.x + s * p.y, v = -s * p.x + c * p.y;
            umin = std::min(umin, u);
            umax = std::max(umax, u);
            vmin = std::min(vmin, v);
            vmax = std::max(vmax, v);
        }
        best = std::min(best, (umax - umin) * (vmax - vmin));
    }
    return best;
}

/// Mean of squared differences with plain nested loops.
inline double naive_mse(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

inline RotatedBox random_box(std::mt19937_64& rng, double min_size = 2.0, double max_size = 40.0,
                             double center_range = 100.0) {
    std::uniform_real_distribution<double> c(-center_range, center_range), s(min_size, max_size),
        t(-180.0, 180.0);
    return {c(rng), c(rng), s(rng), s(rng), t(rng)};
}

}  // namespace reflgen::oracle

