// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Eigenvalues>

#include "oracles.h"
#include "reflgen/errors.h"
#include "reflgen/geometry.h"

using namespace reflgen;
using namespace reflgen::geometry;

namespace {

const double kLossFloor = std::exp(2.0 / 3.0);

void expect_coeffs(const BoxRegressionCoeffs& t, double tx, double ty, double tw, double th, double tt,
                   double tol = 1e-12) {
    EXPECT_NEAR(t.tx, tx, tol);
    EXPECT_NEAR(t.ty, ty, tol);
    EXPECT_NEAR(t.tw, tw, tol);
    EXPECT_NEAR(t.th, th, tol);
    EXPECT_NEAR(t.ttheta, tt, tol);
}

RotatedBox rigid(const RotatedBox& b, double tx, double ty, double rot_deg) {
    // Screen-counterclockwise rotation about the origin, then translation.
    const double r = oracle::deg2rad(rot_deg), c = std::cos(r), s = std::sin(r);
    return {c * b.cx + s * b.cy + tx, -s * b.cx + c * b.cy + ty, b.w, b.h, b.theta + rot_deg};
}

}  // namespace

TEST(RotatedBoxTest, CanonicalAngleRange) {
    EXPECT_DOUBLE_EQ(canonical_angle(90.0), -90.0);
    EXPECT_DOUBLE_EQ(canonical_angle(-90.0), -90.0);
    EXPECT_DOUBLE_EQ(canonical_angle(180.0), 0.0);
    EXPECT_DOUBLE_EQ(canonical_angle(135.0), -45.0);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> a(-1000, 1000);
    for (int i = 0; i < 1000; ++i) {
        RotatedBox b = oracle::random_box(rng);
        b.theta = a(rng);
        const RotatedBox c = canonicalize(b);
        EXPECT_GE(c.theta, -90.0);
        EXPECT_LT(c.theta, 90.0);
        EXPECT_LT(oracle::corner_set_distance(b, c), 1e-9);
    }
}

TEST(RotatedBoxTest, CornersMatchIndependentConstruction) {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 200; ++i) {
        const RotatedBox b = oracle::random_box(rng);
        const auto mine = corners(b);
        const auto ref = oracle::box_corners(b);
        for (int k = 0; k < 4; ++k) {
            EXPECT_NEAR(mine[k].x, ref[k].x, 1e-9);
            EXPECT_NEAR(mine[k].y, ref[k].y, 1e-9);
        }
    }
}

TEST(RotatedBoxTest, ValidateRejectsNonPositiveSize) {
    EXPECT_THROW(validate({0, 0, 0, 1, 0}), Error);
    EXPECT_THROW(validate({0, 0, 1, -1, 0}), Error);
    EXPECT_THROW(validate({0, NAN, 1, 1, 0}), Error);
    EXPECT_NO_THROW(validate({0, 0, 1, 1, 0}));
}

TEST(EncodeRegressionTest, Examples) {
    expect_coeffs(encode_regression({10, 10, 4, 2, 0}, {10, 14, 4, 2, 0}), 0, 2, 0, 0, 0);
    expect_coeffs(encode_regression({3, -7, 5, 6, 12}, {3, -7, 5, 6, 12}), 0, 0, 0, 0, 0);
    expect_coeffs(encode_regression({0, 0, 2, 2, 0}, {1, 1, 4, 4, 45}), 0.5, 0.5, std::log(2.0), std::log(2.0),
                  std::numbers::pi / 4);
}

TEST(EncodeRegressionTest, AngleDifferenceReducedToHalfOpenRange) {
    // 170 - (-80) = 250 deg is the same rectangle as 70 deg.
    const auto t = encode_regression({0, 0, 2, 2, -80}, {0, 0, 2, 2, 170});
    EXPECT_NEAR(t.ttheta, oracle::deg2rad(70.0), 1e-12);
    // Exactly 90 stays at +90, -90 maps to +90.
    EXPECT_NEAR(encode_regression({0, 0, 2, 2, 0}, {0, 0, 2, 2, 90}).ttheta, std::numbers::pi / 2, 1e-12);
    EXPECT_NEAR(encode_regression({0, 0, 2, 2, 0}, {0, 0, 2, 2, -90}).ttheta, std::numbers::pi / 2, 1e-12);
}

TEST(EncodeRegressionTest, InvalidBoxThrows) {
    try {
        encode_regression({0, 0, -1, 2, 0}, {0, 0, 1, 1, 0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidBox);
    }
}

TEST(DecodeRegressionTest, Examples) {
    const RotatedBox r = decode_regression({10, 10, 4, 2, 0}, {0, 2, 0, 0, 0});
    EXPECT_NEAR(r.cx, 10, 1e-12);
    EXPECT_NEAR(r.cy, 14, 1e-12);
    EXPECT_NEAR(r.w, 4, 1e-12);
    EXPECT_NEAR(r.h, 2, 1e-12);
    EXPECT_NEAR(r.theta, 0, 1e-12);
    const RotatedBox o{5, 6, 7, 8, 33};
    const RotatedBox same = decode_regression(o, {});
    EXPECT_LT(oracle::corner_set_distance(o, same), 1e-12);
}

TEST(DecodeRegressionTest, OverflowIsInvalidCoefficient) {
    try {
        decode_regression({0, 0, 1, 1, 0}, {0, 0, 800.0, 0, 0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidCoefficient);
    }
    EXPECT_THROW(decode_regression({0, 0, 1, 1, 0}, {0, 0, -800.0, 0, 0}), Error);
    EXPECT_THROW(decode_regression({0, 0, 1, 1, 0}, {NAN, 0, 0, 0, 0}), Error);
}

TEST(DecodeRegressionTest, RandomRoundTripsReproduceCornerSets) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 1000; ++i) {
        const RotatedBox o = oracle::random_box(rng), r = oracle::random_box(rng);
        const RotatedBox back = decode_regression(o, encode_regression(o, r));
        EXPECT_LT(oracle::corner_set_distance(back, r), 1e-6) << "pair " << i;
        EXPECT_GE(back.theta, -90.0);
        EXPECT_LT(back.theta, 90.0);
    }
}

TEST(DecodeRegressionTest, EncodeOfDecodeRecoversCoefficients) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-2, 2), ang(-1.5, 1.5);
    for (int i = 0; i < 1000; ++i) {
        const RotatedBox o = oracle::random_box(rng);
        const BoxRegressionCoeffs t{u(rng), u(rng), u(rng), u(rng), ang(rng)};
        expect_coeffs(encode_regression(o, decode_regression(o, t)), t.tx, t.ty, t.tw, t.th, t.ttheta, 1e-9);
    }
}

TEST(BoxToGaussianTest, Examples) {
    const auto g = box_to_gaussian({0, 0, 2, 2, 0});
    EXPECT_TRUE(g.mean.isZero());
    EXPECT_TRUE(g.cov.isApprox(Eigen::Matrix2d::Identity(), 1e-12));
    const auto g90 = box_to_gaussian({0, 0, 4, 2, 90});
    EXPECT_NEAR(g90.cov(0, 0), 1.0, 1e-12);
    EXPECT_NEAR(g90.cov(1, 1), 4.0, 1e-12);
    EXPECT_NEAR(g90.cov(0, 1), 0.0, 1e-12);
}

TEST(BoxToGaussianTest, EigenvaluesAreHalfExtentsSquared) {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 200; ++i) {
        const RotatedBox b = oracle::random_box(rng);
        const auto g = box_to_gaussian(b);
        EXPECT_NEAR(g.cov(0, 1), g.cov(1, 0), 1e-12);
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(g.cov);
        const double lo = std::min(b.w, b.h), hi = std::max(b.w, b.h);
        EXPECT_NEAR(es.eigenvalues()(0), lo * lo / 4, 1e-9 * hi * hi);
        EXPECT_NEAR(es.eigenvalues()(1), hi * hi / 4, 1e-9 * hi * hi);
        // The w-axis is the eigenvector for w^2/4.
        const Point u = w_axis(b.theta);
        const Eigen::Vector2d uv(u.x, u.y);
        EXPECT_NEAR((g.cov * uv - b.w * b.w / 4 * uv).norm(), 0.0, 1e-9 * hi * hi);
    }
}

TEST(KfiouTest, SelfOverlapIsOneThird) {
    std::mt19937_64 rng(6);
    for (int i = 0; i < 100; ++i) {
        const RotatedBox b = oracle::random_box(rng);
        EXPECT_NEAR(kfiou(b, b), 1.0 / 3.0, 1e-9);
    }
}

TEST(KfiouTest, FarApartGoesToZero) {
    const RotatedBox a{0, 0, 10, 6, 20};
    double prev = kfiou(a, a);
    for (double d : {5.0, 10.0, 20.0, 40.0, 80.0}) {
        const double v = kfiou(a, {d, 0, 10, 6, 20});
        EXPECT_LT(v, prev);
        prev = v;
    }
    EXPECT_LT(prev, 1e-12);
    EXPECT_GT(prev, 0.0);
}

TEST(KfiouTest, CenterFactorCanBeDisabled) {
    const RotatedBox a{0, 0, 10, 6, 20}, b{50, 0, 10, 6, 20};
    EXPECT_NEAR(kfiou(a, b, {.center_factor = false}), 1.0 / 3.0, 1e-12);
    EXPECT_LT(kfiou(a, b), 1e-6);
}

TEST(KfiouTest, OverlapMatchesGaussianProductQuadrature) {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 20; ++i) {
        const RotatedBox a = oracle::random_box(rng, 4.0, 30.0, 10.0);
        const RotatedBox b = oracle::random_box(rng, 4.0, 30.0, 10.0);
        const double quad = oracle::gaussian_product_mass(a, b, 1200);
        const double vf = kfiou_overlap(a, b);
        EXPECT_NEAR(vf / quad, 1.0, 1e-3) << "pair " << i;
    }
}

TEST(KfiouTest, Symmetric) {
    std::mt19937_64 rng(8);
    for (int i = 0; i < 500; ++i) {
        const RotatedBox a = oracle::random_box(rng, 2, 40, 20), b = oracle::random_box(rng, 2, 40, 20);
        EXPECT_NEAR(kfiou(a, b), kfiou(b, a), 1e-12);
    }
}

TEST(KfiouTest, RigidAndScaleInvariant) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> t(-50, 50), rot(-180, 180), sc(0.2, 5.0);
    for (int i = 0; i < 500; ++i) {
        const RotatedBox a = oracle::random_box(rng, 2, 40, 20), b = oracle::random_box(rng, 2, 40, 20);
        const double base = kfiou(a, b);
        const double tx = t(rng), ty = t(rng), r = rot(rng), s = sc(rng);
        EXPECT_NEAR(kfiou(rigid(a, tx, ty, r), rigid(b, tx, ty, r)), base, 1e-9);
        const RotatedBox as{a.cx * s, a.cy * s, a.w * s, a.h * s, a.theta};
        const RotatedBox bs{b.cx * s, b.cy * s, b.w * s, b.h * s, b.theta};
        EXPECT_NEAR(kfiou(as, bs), base, 1e-9);
    }
}

TEST(KfiouLossTest, Examples) {
    const RotatedBox b{12, 30, 8, 3, -17};
    EXPECT_NEAR(kfiou_loss(b, b), kLossFloor, 1e-9);
    EXPECT_NEAR(kLossFloor, 1.947734, 1e-6);
    EXPECT_NEAR(kfiou_loss({0, 0, 4, 4, 0}, {1000, 0, 4, 4, 0}), std::numbers::e, 1e-9);
}

// The upper bound e is strict mathematically; once kfiou drops below machine
// epsilon the loss rounds to e, so sampled pairs stay within overlap range.
TEST(KfiouLossTest, RangeAndMonotoneAlongCenterLine) {
    std::mt19937_64 rng(10);
    for (int i = 0; i < 300; ++i) {
        const RotatedBox gt = oracle::random_box(rng, 4, 40, 12);
        const RotatedBox start = oracle::random_box(rng, 4, 40, 12);
        double prev = std::numbers::e + 1.0;
        for (int k = 0; k <= 20; ++k) {
            const double f = 1.0 - k / 20.0;
            RotatedBox p = start;
            p.cx = gt.cx + f * (start.cx - gt.cx);
            p.cy = gt.cy + f * (start.cy - gt.cy);
            const double l = kfiou_loss(p, gt);
            EXPECT_GE(l, kLossFloor - 1e-12);
            EXPECT_LT(l, std::numbers::e);
            if (f > 0.0 && (start.cx != gt.cx || start.cy != gt.cy)) EXPECT_LT(l, prev);
            prev = l;
        }
    }
}

TEST(KfiouLossTest, GradientMatchesCentralDifferences) {
    std::mt19937_64 rng(11);
    const double h = 1e-4;
    int checked = 0;
    for (int i = 0; i < 200; ++i) {
        const RotatedBox gt = oracle::random_box(rng, 3, 30, 8);
        const RotatedBox pred = oracle::random_box(rng, 3, 30, 8);
        const auto lg = kfiou_loss_with_gradient(pred, gt);
        EXPECT_NEAR(lg.value, kfiou_loss(pred, gt), 1e-14);
        for (int k = 0; k < 5; ++k) {
            RotatedBox plus = pred, minus = pred;
            double* fields_p[5] = {&plus.cx, &plus.cy, &plus.w, &plus.h, &plus.theta};
            double* fields_m[5] = {&minus.cx, &minus.cy, &minus.w, &minus.h, &minus.theta};
            *fields_p[k] += h;
            *fields_m[k] -= h;
            const double fd = (kfiou_loss(plus, gt) - kfiou_loss(minus, gt)) / (2 * h);
            const double scale = std::max(std::abs(fd), std::abs(lg.grad[k]));
            if (scale < 1e-7) continue;  // flat direction; relative error meaningless
            EXPECT_LT(std::abs(fd - lg.grad[k]) / scale, 1e-3) << "pair " << i << " param " << k;
            ++checked;
        }
    }
    EXPECT_GT(checked, 500);
}

TEST(RasterizeBoxTest, AxisAlignedSquare) {
    // Pixel centers 2..5 in both axes lie inside [1.5, 5.5].
    const Mask m = rasterize_box({3.5, 3.5, 4, 4, 0}, 8, 8);
    EXPECT_EQ(m.count(), 16u);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) EXPECT_EQ(m.at(i, j), (i >= 2 && i <= 5 && j >= 2 && j <= 5) ? 1 : 0);
}

TEST(RasterizeBoxTest, OutsideCanvasIsEmpty) {
    EXPECT_EQ(rasterize_box({-50, -50, 10, 10, 30}, 16, 16).count(), 0u);
    EXPECT_EQ(rasterize_box({100, 5, 10, 10, 0}, 16, 16).count(), 0u);
}

TEST(RasterizeBoxTest, PartiallyOutsideIsClipped) {
    const Mask m = rasterize_box({0, 0, 4, 4, 0}, 8, 8);
    EXPECT_EQ(m.count(), 9u);  // centers 0..2 on each axis
}

TEST(RasterizeBoxTest, MatchesHalfPlaneOracle) {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> c(-10, 138), s(1, 90), t(-90, 90);
    for (int i = 0; i < 50; ++i) {
        const RotatedBox b{c(rng), c(rng), s(rng), s(rng), t(rng)};
        const Mask mine = rasterize_box(b, 128, 128);
        const Mask ref = oracle::rasterize_half_planes(b, 128, 128);
        EXPECT_EQ(mine.count(), ref.count()) << "box " << i;
        EXPECT_TRUE(mine == ref) << "box " << i;
    }
}

TEST(MinAreaBoxTest, SinglePixel) {
    Mask m(10, 10);
    m.at(3, 7) = 1;
    const RotatedBox b = min_area_box(m);
    EXPECT_DOUBLE_EQ(b.cx, 7);
    EXPECT_DOUBLE_EQ(b.cy, 3);
    EXPECT_DOUBLE_EQ(b.w, 1);
    EXPECT_DOUBLE_EQ(b.h, 1);
}

TEST(MinAreaBoxTest, FilledAxisAlignedRectangle) {
    Mask m(20, 20);
    for (int i = 4; i < 9; ++i)
        for (int j = 2; j < 14; ++j) m.at(i, j) = 1;
    const RotatedBox b = min_area_box(m);
    EXPECT_NEAR(b.theta, 0.0, 1e-12);
    EXPECT_NEAR(b.cx, 7.5, 1e-9);
    EXPECT_NEAR(b.cy, 6.0, 1e-9);
    EXPECT_NEAR(b.w, 12.0, 1e-9);
    EXPECT_NEAR(b.h, 5.0, 1e-9);
    EXPECT_TRUE(rasterize_box(b, 20, 20) == m);
}

TEST(MinAreaBoxTest, LineSegment) {
    Mask m(20, 20);
    for (int k = 0; k < 8; ++k) m.at(2 + k, 3 + k) = 1;
    const RotatedBox b = min_area_box(m);
    EXPECT_NEAR(std::abs(b.theta), 45.0, 1e-9);
    EXPECT_NEAR(std::max(b.w, b.h), 7 * std::sqrt(2.0) + 1, 1e-9);
    EXPECT_NEAR(std::min(b.w, b.h), 1.0, 1e-9);
}

TEST(MinAreaBoxTest, EmptyMaskThrows) {
    try {
        min_area_box(Mask(5, 5));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyRegion);
    }
}

TEST(MinAreaBoxTest, RandomConvexBlobsBeatAngleGrid) {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> c(20, 44), r(2, 15), t(-90, 90);
    for (int i = 0; i < 60; ++i) {
        // Rotated ellipse, a convex blob.
        const double cx = c(rng), cy = c(rng), a = r(rng), bb = r(rng), th = oracle::deg2rad(t(rng));
        Mask m(64, 64);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const double dx = x - cx, dy = y - cy;
                const double u = std::cos(th) * dx - std::sin(th) * dy, v = std::sin(th) * dx + std::cos(th) * dy;
                if ((u * u) / (a * a) + (v * v) / (bb * bb) <= 1.0) m.at(y, x) = 1;
            }
        if (m.count() < 2) continue;
        const RotatedBox box = min_area_box(m);
        EXPECT_GE(box.theta, -90.0);
        EXPECT_LT(box.theta, 90.0);
        const double tight = (box.w - 1.0) * (box.h - 1.0);
        EXPECT_LE(tight, oracle::brute_force_min_area(m) * 1.01 + 1e-9) << "blob " << i;
        // Every foreground center is covered.
        const Mask cover = rasterize_box(box, 64, 64);
        for (std::size_t k = 0; k < m.data.size(); ++k)
            if (m.data[k]) EXPECT_TRUE(cover.data[k]) << "blob " << i;
    }
}

TEST(MinAreaBoxTest, LabelingIsMirrorConsistent) {
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> c(20, 44), r(2, 15), t(-90, 90);
    for (int i = 0; i < 60; ++i) {
        const double cx = c(rng), cy = c(rng), a = r(rng), bb = r(rng), th = oracle::deg2rad(t(rng));
        Mask m(64, 64), flipped(64, 64);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const double dx = x - cx, dy = y - cy;
                const double u = std::cos(th) * dx - std::sin(th) * dy, v = std::sin(th) * dx + std::cos(th) * dy;
                if ((u * u) / (a * a) + (v * v) / (bb * bb) <= 1.0) m.at(y, x) = flipped.at(63 - y, x) = 1;
            }
        if (m.count() < 2) continue;
        const RotatedBox b = min_area_box(m), f = min_area_box(flipped);
        EXPECT_LE(std::abs(b.theta), 45.0 + 1e-9);
        EXPECT_NEAR(f.cx, b.cx, 1e-9) << "blob " << i;
        EXPECT_NEAR(f.cy, 63.0 - b.cy, 1e-9) << "blob " << i;
        EXPECT_NEAR(f.w * f.h, b.w * b.h, 1e-9) << "blob " << i;
        EXPECT_NEAR(f.w, b.w, 1e-9) << "blob " << i;
    }
}
