// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include "reflgen/geometry.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "reflgen/errors.h"

namespace reflgen::geometry {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

// Forward-mode dual number carrying N partial derivatives.
template <int N>
struct Dual {
    double v = 0.0;
    std::array<double, N> d{};

    Dual() = default;
    Dual(double value) : v(value) {}  // NOLINT(google-explicit-constructor)

    static Dual variable(double value, int index) {
        Dual x(value);
        x.d[index] = 1.0;
        return x;
    }
};

template <int N>
Dual<N> operator+(const Dual<N>& a, const Dual<N>& b) {
    Dual<N> r(a.v + b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
    return r;
}
template <int N>
Dual<N> operator-(const Dual<N>& a, const Dual<N>& b) {
    Dual<N> r(a.v - b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
    return r;
}
template <int N>
Dual<N> operator-(const Dual<N>& a) {
    return Dual<N>(0.0) - a;
}
template <int N>
Dual<N> operator*(const Dual<N>& a, const Dual<N>& b) {
    Dual<N> r(a.v * b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
}
template <int N>
Dual<N> operator/(const Dual<N>& a, const Dual<N>& b) {
    Dual<N> r(a.v / b.v);
    for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
    return r;
}
template <int N>
Dual<N> chain(const Dual<N>& a, double value, double slope) {
    Dual<N> r(value);
    for (int i = 0; i < N; ++i) r.d[i] = slope * a.d[i];
    return r;
}
template <int N>
Dual<N> exp(const Dual<N>& a) {
    const double e = std::exp(a.v);
    return chain(a, e, e);
}
template <int N>
Dual<N> sqrt(const Dual<N>& a) {
    const double s = std::sqrt(a.v);
    return chain(a, s, 0.5 / s);
}
template <int N>
Dual<N> cos(const Dual<N>& a) {
    return chain(a, std::cos(a.v), -std::sin(a.v));
}
template <int N>
Dual<N> sin(const Dual<N>& a) {
    return chain(a, std::sin(a.v), std::cos(a.v));
}
template <int N>
double value_of(const Dual<N>& a) {
    return a.v;
}
double value_of(double a) { return a; }

template <class T>
struct GenericBox {
    T cx, cy, w, h, theta_deg;
};

template <class T>
struct Cov2 {
    T xx, xy, yy;
};

template <class T>
Cov2<T> covariance(const GenericBox<T>& b) {
    using std::cos;
    using std::sin;
    const T t = b.theta_deg * T(kDegToRad);
    const T c = cos(t), s = sin(t);
    const T a2 = b.w * b.w * T(0.25), b2 = b.h * b.h * T(0.25);
    return {a2 * c * c + b2 * s * s, (b2 - a2) * s * c, a2 * s * s + b2 * c * c};
}

// Returns (v_f, v_a, v_b).
template <class T>
std::array<T, 3> fused_volumes(const GenericBox<T>& a, const GenericBox<T>& b, KfiouOptions opts) {
    using std::exp;
    using std::sqrt;
    const Cov2<T> ca = covariance(a), cb = covariance(b);
    const T sxx = ca.xx + cb.xx, sxy = ca.xy + cb.xy, syy = ca.yy + cb.yy;
    const T det_sum = sxx * syy - sxy * sxy;
    if (!(value_of(det_sum) > 0.0) || !std::isfinite(value_of(det_sum)))
        throw Error(ErrorCode::Numeric, "sum of box covariances is not positive definite");
    // |Sigma| = (w h / 4)^2 for the box embedding.
    const T va = a.w * a.h * T(0.25), vb = b.w * b.h * T(0.25);
    T vf = va * vb / sqrt(det_sum);
    if (opts.center_factor) {
        const T dx = a.cx - b.cx, dy = a.cy - b.cy;
        const T maha = (syy * dx * dx - T(2.0) * sxy * dx * dy + sxx * dy * dy) / det_sum;
        vf = vf * exp(T(-0.5) * maha);
    }
    return {vf, va, vb};
}

template <class T>
T kfiou_generic(const GenericBox<T>& a, const GenericBox<T>& b, KfiouOptions opts) {
    const auto [vf, va, vb] = fused_volumes(a, b, opts);
    return vf / (va + vb - vf);
}

template <class T = double>
GenericBox<T> lift(const RotatedBox& b) {
    return {T(b.cx), T(b.cy), T(b.w), T(b.h), T(b.theta)};
}

}  // namespace

Point w_axis(double theta_deg) {
    const double t = theta_deg * kDegToRad;
    return {std::cos(t), -std::sin(t)};
}

Point h_axis(double theta_deg) {
    const double t = theta_deg * kDegToRad;
    return {std::sin(t), std::cos(t)};
}

double canonical_angle(double theta_deg) {
    double t = theta_deg - 180.0 * std::floor((theta_deg + 90.0) / 180.0);
    // Guard the half-open upper edge against rounding.
    if (t >= 90.0) t -= 180.0;
    if (t < -90.0) t += 180.0;
    return t;
}

RotatedBox canonicalize(const RotatedBox& box) {
    RotatedBox out = box;
    out.theta = canonical_angle(box.theta);
    return out;
}

bool is_valid(const RotatedBox& b) {
    return std::isfinite(b.cx) && std::isfinite(b.cy) && std::isfinite(b.w) && std::isfinite(b.h) &&
           std::isfinite(b.theta) && b.w > 0.0 && b.h > 0.0;
}

void validate(const RotatedBox& b) {
    if (!is_valid(b))
        throw Error(ErrorCode::InvalidBox, "box needs finite fields and positive size (w=" + std::to_string(b.w) +
                                               ", h=" + std::to_string(b.h) + ")");
}

std::array<Point, 4> corners(const RotatedBox& b) {
    const Point u = w_axis(b.theta), v = h_axis(b.theta);
    const double hw = 0.5 * b.w, hh = 0.5 * b.h;
    std::array<Point, 4> out;
    const double su[4] = {-1, 1, 1, -1};
    const double sv[4] = {-1, -1, 1, 1};
    for (int k = 0; k < 4; ++k)
        out[k] = {b.cx + su[k] * hw * u.x + sv[k] * hh * v.x, b.cy + su[k] * hw * u.y + sv[k] * hh * v.y};
    return out;
}

BoxRegressionCoeffs encode_regression(const RotatedBox& o, const RotatedBox& r) {
    validate(o);
    validate(r);
    double dtheta = r.theta - o.theta;
    dtheta -= 180.0 * std::ceil((dtheta - 90.0) / 180.0);  // into (-90, 90]
    return {(r.cx - o.cx) / o.w, (r.cy - o.cy) / o.h, std::log(r.w / o.w), std::log(r.h / o.h), dtheta * kDegToRad};
}

RotatedBox decode_regression(const RotatedBox& o, const BoxRegressionCoeffs& t) {
    validate(o);
    if (!std::isfinite(t.tx) || !std::isfinite(t.ty) || !std::isfinite(t.tw) || !std::isfinite(t.th) ||
        !std::isfinite(t.ttheta))
        throw Error(ErrorCode::InvalidCoefficient, "non-finite regression coefficient");
    RotatedBox r;
    r.cx = o.cx + t.tx * o.w;
    r.cy = o.cy + t.ty * o.h;
    r.w = o.w * std::exp(t.tw);
    r.h = o.h * std::exp(t.th);
    r.theta = canonical_angle(o.theta + t.ttheta / kDegToRad);
    if (!is_valid(r)) throw Error(ErrorCode::InvalidCoefficient, "decoded box overflows (tw or th out of range)");
    return r;
}

GaussianBox box_to_gaussian(const RotatedBox& b) {
    validate(b);
    const Cov2<double> c = covariance(lift(b));
    GaussianBox g;
    g.mean << b.cx, b.cy;
    g.cov << c.xx, c.xy, c.xy, c.yy;
    return g;
}

double kfiou_overlap(const RotatedBox& a, const RotatedBox& b, KfiouOptions opts) {
    validate(a);
    validate(b);
    return fused_volumes(lift(a), lift(b), opts)[0];
}

double kfiou(const RotatedBox& a, const RotatedBox& b, KfiouOptions opts) {
    validate(a);
    validate(b);
    return kfiou_generic(lift(a), lift(b), opts);
}

double kfiou_loss(const RotatedBox& pred, const RotatedBox& gt, KfiouOptions opts) {
    return std::exp(1.0 - kfiou(pred, gt, opts));
}

LossWithGradient kfiou_loss_with_gradient(const RotatedBox& pred, const RotatedBox& gt, KfiouOptions opts) {
    validate(pred);
    validate(gt);
    using D = Dual<5>;
    const GenericBox<D> p{D::variable(pred.cx, 0), D::variable(pred.cy, 1), D::variable(pred.w, 2),
                          D::variable(pred.h, 3), D::variable(pred.theta, 4)};
    const D loss = exp(D(1.0) - kfiou_generic(p, lift<D>(gt), opts));
    return {loss.v, loss.d};
}

Mask rasterize_box(const RotatedBox& b, int height, int width) {
    validate(b);
    if (height < 1 || width < 1) throw Error(ErrorCode::InvalidArgument, "raster size must be positive");
    Mask mask(height, width);
    const auto pts = corners(b);
    double xmin = pts[0].x, xmax = pts[0].x, ymin = pts[0].y, ymax = pts[0].y;
    for (const auto& p : pts) {
        xmin = std::min(xmin, p.x);
        xmax = std::max(xmax, p.x);
        ymin = std::min(ymin, p.y);
        ymax = std::max(ymax, p.y);
    }
    constexpr double eps = 1e-9;
    const int c0 = std::max(0, static_cast<int>(std::floor(xmin - eps)));
    const int c1 = std::min(width - 1, static_cast<int>(std::ceil(xmax + eps)));
    const int r0 = std::max(0, static_cast<int>(std::floor(ymin - eps)));
    const int r1 = std::min(height - 1, static_cast<int>(std::ceil(ymax + eps)));
    const Point u = w_axis(b.theta), v = h_axis(b.theta);
    const double hw = 0.5 * b.w + eps, hh = 0.5 * b.h + eps;
    for (int i = r0; i <= r1; ++i) {
        for (int j = c0; j <= c1; ++j) {
            const double dx = j - b.cx, dy = i - b.cy;
            if (std::abs(dx * u.x + dy * u.y) <= hw && std::abs(dx * v.x + dy * v.y) <= hh) mask.at(i, j) = 1;
        }
    }
    return mask;
}

namespace {

struct IPoint {
    long x, y;
    auto operator<=>(const IPoint&) const = default;
};

long cross(const IPoint& o, const IPoint& a, const IPoint& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Andrew's monotone chain; returns the hull without repeated endpoints.
std::vector<IPoint> convex_hull(std::vector<IPoint> pts) {
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) return pts;
    std::vector<IPoint> hull(2 * pts.size());
    std::size_t k = 0;
    for (const auto& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
        const auto& p = pts[i - 1];
        while (k >= t && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    hull.resize(k - 1);
    return hull;
}

// Of the two labelings of a rectangle, keep the one with |theta| <= 45; at
// exactly 45 degrees prefer w >= h so mirror images get the same w.
RotatedBox smallest_angle_form(RotatedBox b) {
    constexpr double eps = 1e-9;
    const bool swap_pos = b.theta > 45.0 + eps || (std::abs(b.theta - 45.0) <= eps && b.w < b.h);
    const bool swap_neg = b.theta < -45.0 - eps || (std::abs(b.theta + 45.0) <= eps && b.w < b.h);
    if (swap_pos || swap_neg) {
        b.theta = canonical_angle(b.theta + (swap_pos ? -90.0 : 90.0));
        std::swap(b.w, b.h);
    }
    return b;
}

}  // namespace

RotatedBox min_area_box(const Mask& mask) {
    std::vector<IPoint> pts;
    // Only boundary pixels can be hull vertices.
    for (int i = 0; i < mask.height; ++i) {
        for (int j = 0; j < mask.width; ++j) {
            if (!mask.at(i, j)) continue;
            const bool interior = i > 0 && j > 0 && i + 1 < mask.height && j + 1 < mask.width && mask.at(i - 1, j) &&
                                  mask.at(i + 1, j) && mask.at(i, j - 1) && mask.at(i, j + 1);
            if (!interior) pts.push_back({j, i});
        }
    }
    if (pts.empty()) throw Error(ErrorCode::EmptyRegion, "min_area_box on an empty mask");

    const std::vector<IPoint> hull = convex_hull(std::move(pts));
    if (hull.size() == 1) return {static_cast<double>(hull[0].x), static_cast<double>(hull[0].y), 1.0, 1.0, 0.0};

    struct Candidate {
        double area, perimeter, abs_theta;
        RotatedBox box;
    };
    std::vector<Candidate> candidates;
    for (std::size_t e = 0; e < hull.size(); ++e) {
        const IPoint& a = hull[e];
        const IPoint& b = hull[(e + 1) % hull.size()];
        const double ex = static_cast<double>(b.x - a.x), ey = static_cast<double>(b.y - a.y);
        const double theta = canonical_angle(std::atan2(-ey, ex) / kDegToRad);
        const Point u = w_axis(theta), v = h_axis(theta);
        double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
        for (const auto& p : hull) {
            const double pu = p.x * u.x + p.y * u.y, pv = p.x * v.x + p.y * v.y;
            umin = std::min(umin, pu);
            umax = std::max(umax, pu);
            vmin = std::min(vmin, pv);
            vmax = std::max(vmax, pv);
        }
        const double w = umax - umin, h = vmax - vmin;
        const double mu = 0.5 * (umin + umax), mv = 0.5 * (vmin + vmax);
        const RotatedBox box =
            smallest_angle_form({mu * u.x + mv * v.x, mu * u.y + mv * v.y, w + 1.0, h + 1.0, theta});
        candidates.push_back({w * h, w + h, std::abs(box.theta), box});
    }
    const double best_area = std::min_element(candidates.begin(), candidates.end(), [](const auto& l, const auto& r) {
                                 return l.area < r.area;
                             })->area;
    const double tol = 1e-9 * std::max(1.0, best_area);
    const Candidate* best = nullptr;
    for (const auto& c : candidates) {
        if (c.area > best_area + tol) continue;
        if (!best || c.perimeter < best->perimeter - 1e-9 ||
            (std::abs(c.perimeter - best->perimeter) <= 1e-9 && c.abs_theta < best->abs_theta - 1e-9))
            best = &c;
    }
    return best->box;
}

}  // namespace reflgen::geometry
