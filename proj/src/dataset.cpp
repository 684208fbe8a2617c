// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include "reflgen/dataset.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <opencv2/imgproc.hpp>

#include "reflgen/errors.h"

namespace reflgen::dataset {

namespace fs = std::filesystem;
using geometry::RotatedBox;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::size_t kMinReflectionPixels = 6;

struct Rgb {
    double r = 0, g = 0, b = 0;
};

Rgb hsv(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s, x = c * (1 - std::abs(std::fmod(h * 6.0, 2.0) - 1)), m = v - c;
    const int sector = static_cast<int>(h * 6.0) % 6;
    const std::array<Rgb, 6> table{{{c, x, 0}, {x, c, 0}, {0, c, x}, {0, x, c}, {x, 0, c}, {c, 0, x}}};
    const Rgb& t = table[sector];
    return {t.r + m, t.g + m, t.b + m};
}

Rgb mix(const Rgb& a, const Rgb& b, double t) {
    return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// Internal scene randomness, drawn in a fixed order from the scene seed.
struct SceneStyle {
    std::array<double, 8> poly_radius{};
    double poly_phase = 0;
    double sprite_side = 1;
    Rgb obj_top, obj_bottom, obj_accent;
    Rgb sky_top, sky_bottom, surface;
    double sky_phase = 0;
    double texture_period = 6;
    double texture_phase = 0;
    double texture_amp = 0.06;
    double ripple_period = 4;
    double ripple_phase = 0;
};

SceneStyle draw_style(const SceneSpec& spec) {
    std::mt19937_64 rng(spec.rng_seed);
    SceneStyle s;
    for (double& r : s.poly_radius) r = uniform(rng, 0.65, 1.0);
    s.poly_phase = uniform(rng, 0, 2 * kPi);
    s.sprite_side = uniform(rng, 0, 1) < 0.5 ? -1.0 : 1.0;
    const double hue = uniform(rng, 0, 1);
    s.obj_top = hsv(hue, uniform(rng, 0.45, 0.9), uniform(rng, 0.8, 1.0));
    s.obj_bottom = hsv(hue + uniform(rng, -0.15, 0.15), uniform(rng, 0.5, 0.95), uniform(rng, 0.7, 0.9));
    s.obj_accent = hsv(hue + 0.5, uniform(rng, 0.5, 0.9), uniform(rng, 0.7, 1.0));
    const double sky_hue = uniform(rng, 0.52, 0.66);
    s.sky_top = hsv(sky_hue, uniform(rng, 0.25, 0.55), uniform(rng, 0.8, 0.95));
    s.sky_bottom = hsv(sky_hue + uniform(rng, -0.05, 0.05), uniform(rng, 0.05, 0.25), uniform(rng, 0.85, 1.0));
    if (spec.surface_kind == SurfaceKind::Water)
        s.surface = hsv(uniform(rng, 0.48, 0.62), uniform(rng, 0.4, 0.75), uniform(rng, 0.2, 0.38));
    else
        s.surface = hsv(uniform(rng, 0.04, 0.12), uniform(rng, 0.05, 0.45), uniform(rng, 0.18, 0.36));
    s.sky_phase = uniform(rng, 0, 2 * kPi);
    s.texture_period = uniform(rng, 5.0, 8.0);
    s.texture_phase = uniform(rng, 0, 2 * kPi);
    s.texture_amp = uniform(rng, 0.04, 0.08);
    s.ripple_period = uniform(rng, 3.0, 6.0);
    s.ripple_phase = uniform(rng, 0, 2 * kPi);
    return s;
}

struct LocalCoord {
    double u, v;  // normalized by rx, ry
};

LocalCoord to_local(const ObjectParams& o, double x, double y) {
    const double r = o.rotation_deg * kPi / 180.0;
    const double dx = x - o.cx, dy = y - o.cy;
    // Object axes follow the box angle convention: u = (cos, -sin), v = (sin, cos).
    return {(dx * std::cos(r) - dy * std::sin(r)) / o.rx, (dx * std::sin(r) + dy * std::cos(r)) / o.ry};
}

bool inside_polygon(const LocalCoord& p, const SceneStyle& st, int vertices) {
    const int n = std::clamp(vertices, 3, 8);
    bool in = false;
    for (int k = 0, m = n - 1; k < n; m = k++) {
        const double ak = st.poly_phase + 2 * kPi * k / n, am = st.poly_phase + 2 * kPi * m / n;
        const double xk = st.poly_radius[k] * std::cos(ak), yk = st.poly_radius[k] * std::sin(ak);
        const double xm = st.poly_radius[m] * std::cos(am), ym = st.poly_radius[m] * std::sin(am);
        if (((yk > p.v) != (ym > p.v)) && (p.u < (xm - xk) * (p.v - yk) / (ym - yk) + xk)) in = !in;
    }
    return in;
}

// 0 outside, 1 body, 2 accent region (sprite head).
int shape_region(const SceneSpec& spec, const SceneStyle& st, double x, double y) {
    const LocalCoord p = to_local(spec.object, x, y);
    switch (spec.object_shape) {
        case ObjectShape::Ellipse:
            return p.u * p.u + p.v * p.v <= 1.0 ? 1 : 0;
        case ObjectShape::Polygon:
            return inside_polygon(p, st, spec.object.vertices) ? 1 : 0;
        case ObjectShape::Sprite: {
            const double bu = p.u, bv = (p.v - 0.35) / 0.65;
            if (bu * bu + bv * bv <= 1.0) return 1;
            const double hu = (p.u - 0.5 * st.sprite_side) / 0.45, hv = (p.v + 0.5) / 0.45;
            if (hu * hu + hv * hv <= 1.0) return 2;
            return 0;
        }
    }
    return 0;
}

Rgb object_color(const SceneSpec& spec, const SceneStyle& st, int region, double x, double y) {
    if (region == 2) return st.obj_accent;
    const ObjectParams& o = spec.object;
    const double t = std::clamp((y - (o.cy - o.ry)) / (2.0 * o.ry), 0.0, 1.0);
    Rgb c = mix(st.obj_top, st.obj_bottom, t);
    if (spec.object_shape == ObjectShape::Polygon) {
        const LocalCoord p = to_local(o, x, y);
        if (std::fmod(std::abs(p.u * o.rx) + 100.0, 4.0) < 1.5) c = mix(c, Rgb{1.0, 1.0, 1.0}, 0.35);
    }
    return c;
}

Rgb background(const SceneSpec& spec, const SceneStyle& st, int row, int col) {
    const double x = col, y = row;
    if (row < spec.surface_y) {
        const double t = y / std::max(1, spec.surface_y - 1);
        Rgb c = mix(st.sky_top, st.sky_bottom, t);
        const double n = 0.015 * std::sin(2 * kPi * x / 23.0 + st.sky_phase) * std::cos(2 * kPi * y / 17.0);
        return {c.r + n, c.g + n, c.b + n};
    }
    const double depth = y - spec.surface_y;
    double mod = 0.0;
    if (spec.surface_kind == SurfaceKind::Water) {
        mod = st.texture_amp *
              std::sin(2 * kPi * depth / (0.6 * st.texture_period) + 0.8 * std::sin(2 * kPi * x / 19.0) +
                       st.texture_phase);
    } else {
        // Floor seams run along the reflection's shear direction (vertical when unsheared).
        const double shear =
            spec.reflection_type == ReflectionType::Others ? std::tan(spec.shear_deg * kPi / 180.0) : 0.0;
        const double q = x - shear * depth;
        mod = 1.6 * st.texture_amp * std::cos(2 * kPi * q / st.texture_period + st.texture_phase);
    }
    const double shade = 1.0 + 0.25 * depth / std::max(1, spec.height - spec.surface_y);
    return {st.surface.r * shade + mod, st.surface.g * shade + mod, st.surface.b * shade + mod};
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

int level(float v) { return static_cast<int>(std::lround(v * 255.0f)); }

}  // namespace

std::string_view to_string(ReflectionType t) { return t == ReflectionType::Vertical ? "vertical" : "others"; }
std::string_view to_string(SurfaceKind k) { return k == SurfaceKind::Water ? "water" : "glossy_floor"; }
std::string_view to_string(ObjectShape s) {
    switch (s) {
        case ObjectShape::Ellipse: return "ellipse";
        case ObjectShape::Polygon: return "polygon";
        case ObjectShape::Sprite: return "sprite";
    }
    return "ellipse";
}
std::string_view to_string(Split s) {
    switch (s) {
        case Split::All: return "all";
        case Split::Train: return "train";
        case Split::Test: return "test";
    }
    return "all";
}

ReflectionType parse_reflection_type(std::string_view s) {
    if (s == "vertical") return ReflectionType::Vertical;
    if (s == "others") return ReflectionType::Others;
    throw Error(ErrorCode::InvalidArgument, "unknown reflection type '" + std::string(s) + "'");
}
SurfaceKind parse_surface_kind(std::string_view s) {
    if (s == "water") return SurfaceKind::Water;
    if (s == "glossy_floor") return SurfaceKind::GlossyFloor;
    throw Error(ErrorCode::InvalidArgument, "unknown surface kind '" + std::string(s) + "'");
}
ObjectShape parse_object_shape(std::string_view s) {
    if (s == "ellipse") return ObjectShape::Ellipse;
    if (s == "polygon") return ObjectShape::Polygon;
    if (s == "sprite") return ObjectShape::Sprite;
    throw Error(ErrorCode::InvalidArgument, "unknown object shape '" + std::string(s) + "'");
}
Split parse_split(std::string_view s) {
    if (s == "all") return Split::All;
    if (s == "train") return Split::Train;
    if (s == "test") return Split::Test;
    throw Error(ErrorCode::InvalidArgument, "unknown split '" + std::string(s) + "'");
}

Mask render_object_mask(const SceneSpec& spec) {
    const SceneStyle st = draw_style(spec);
    Mask m(spec.height, spec.width);
    for (int i = 0; i < spec.height; ++i)
        for (int j = 0; j < spec.width; ++j) m.at(i, j) = shape_region(spec, st, j, i) ? 1 : 0;
    return m;
}

void validate(const SceneSpec& spec) {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, "scene spec: " + what); };
    if (spec.height < 16 || spec.width < 16) fail("canvas must be at least 16x16");
    if (spec.surface_y <= 0 || spec.surface_y >= spec.height) fail("surface_y must lie inside the canvas");
    if (!(spec.attenuation > 0.0 && spec.attenuation <= 1.0)) fail("attenuation must be in (0, 1]");
    if (!(spec.blur_sigma >= 0.0)) fail("blur_sigma must be >= 0");
    if (!(spec.ripple_amp >= 0.0)) fail("ripple_amp must be >= 0");
    if (!std::isfinite(spec.shear_deg) || std::abs(spec.shear_deg) >= 80.0) fail("shear_deg must be in (-80, 80)");
    const ObjectParams& o = spec.object;
    if (!(o.rx > 0.0 && o.ry > 0.0) || !std::isfinite(o.cx) || !std::isfinite(o.cy)) fail("bad object geometry");
    const Mask obj = render_object_mask(spec);
    if (obj.empty()) fail("object covers no pixel");
    for (int i = spec.surface_y; i < spec.height; ++i)
        for (int j = 0; j < spec.width; ++j)
            if (obj.at(i, j)) fail("object must lie strictly above surface_y");
}

DataTuple generate_scene(const SceneSpec& spec) {
    validate(spec);
    const SceneStyle st = draw_style(spec);
    const int H = spec.height, W = spec.width, S = spec.surface_y;

    DataTuple out;
    out.type_label = spec.reflection_type;
    out.composite = Image(H, W, 3);
    out.fg_mask = Mask(H, W);

    // Object layer: hard alpha, per-pixel color.
    std::vector<float> alpha(static_cast<std::size_t>(H) * W, 0.0f);
    Image obj_rgb(H, W, 3);
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            const Rgb bg = background(spec, st, i, j);
            Rgb c = bg;
            const int region = shape_region(spec, st, j, i);
            if (region) {
                c = object_color(spec, st, region, j, i);
                alpha[static_cast<std::size_t>(i) * W + j] = 1.0f;
                out.fg_mask.at(i, j) = 1;
                obj_rgb.at(i, j, 0) = static_cast<float>(c.r);
                obj_rgb.at(i, j, 1) = static_cast<float>(c.g);
                obj_rgb.at(i, j, 2) = static_cast<float>(c.b);
            }
            out.composite.at(i, j, 0) = static_cast<float>(c.r);
            out.composite.at(i, j, 1) = static_cast<float>(c.g);
            out.composite.at(i, j, 2) = static_cast<float>(c.b);
        }
    }

    // Reflection layer below the surface: mirror about the surface line, then
    // shift each row horizontally by shear and ripple.
    const double shear = spec.reflection_type == ReflectionType::Others ? std::tan(spec.shear_deg * kPi / 180.0) : 0.0;
    cv::Mat premult(H, W, CV_32FC3, cv::Scalar::all(0)), refl_alpha(H, W, CV_32FC1, cv::Scalar::all(0));
    auto sample = [&](int row, double x, float* rgb) -> float {
        const int x0 = static_cast<int>(std::floor(x));
        const double f = x - x0;
        float a = 0.0f;
        rgb[0] = rgb[1] = rgb[2] = 0.0f;
        for (int k = 0; k < 2; ++k) {
            const int col = x0 + k;
            const double wgt = k == 0 ? 1.0 - f : f;
            if (col < 0 || col >= W || wgt == 0.0) continue;
            const float al = alpha[static_cast<std::size_t>(row) * W + col];
            a += static_cast<float>(wgt) * al;
            for (int c = 0; c < 3; ++c) rgb[c] += static_cast<float>(wgt) * al * obj_rgb.at(row, col, c);
        }
        return a;
    };
    for (int i = S; i < H; ++i) {
        const int depth = i - S;
        const int src_row = S - 1 - depth;
        if (src_row < 0) break;
        const double shift = shear * (depth + 0.5) +
                             spec.ripple_amp * std::sin(2 * kPi * depth / st.ripple_period + st.ripple_phase);
        for (int j = 0; j < W; ++j) {
            float rgb[3];
            const float a = sample(src_row, j - shift, rgb);
            if (a <= 0.0f) continue;
            auto& p = premult.at<cv::Vec3f>(i, j);
            p = cv::Vec3f(rgb[0], rgb[1], rgb[2]);
            refl_alpha.at<float>(i, j) = a;
        }
    }
    // Separate buffers: cv::Mat assignment shares data and the blur would leak into the footprint.
    cv::Mat blurred_premult = premult.clone(), blurred_alpha = refl_alpha.clone();
    if (spec.blur_sigma > 0.0) {
        // Blur the appearance only; the reflection footprint stays sharp.
        cv::GaussianBlur(premult, blurred_premult, cv::Size(0, 0), spec.blur_sigma);
        cv::GaussianBlur(refl_alpha, blurred_alpha, cv::Size(0, 0), spec.blur_sigma);
    }

    out.target = out.composite;
    for (int i = S; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            const float a = refl_alpha.at<float>(i, j);
            if (a <= 0.0f) continue;
            const float ba = std::max(blurred_alpha.at<float>(i, j), 1e-6f);
            const auto& bp = blurred_premult.at<cv::Vec3f>(i, j);
            const float k = static_cast<float>(spec.attenuation) * a;
            for (int c = 0; c < 3; ++c) {
                const float col = bp[c] / ba;
                out.target.at(i, j, c) = (1.0f - k) * out.composite.at(i, j, c) + k * col;
            }
        }
    }

    quantize_8bit(out.composite);
    quantize_8bit(out.target);

    // Reflection mask from image differencing; snap sub-threshold differences
    // so that composite and target agree exactly outside the mask.
    out.refl_mask = Mask(H, W);
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            int diff = 0;
            for (int c = 0; c < 3; ++c)
                diff = std::max(diff, std::abs(level(out.target.at(i, j, c)) - level(out.composite.at(i, j, c))));
            if (diff > 1) {
                out.refl_mask.at(i, j) = 1;
            } else {
                for (int c = 0; c < 3; ++c) out.target.at(i, j, c) = out.composite.at(i, j, c);
            }
        }
    }
    if (out.refl_mask.count() < kMinReflectionPixels)
        throw Error(ErrorCode::DegenerateScene, "reflection covers only " + std::to_string(out.refl_mask.count()) +
                                                    " pixels on the canvas");

    out.box_o = geometry::min_area_box(out.fg_mask);
    out.box_r = geometry::min_area_box(out.refl_mask);
    return out;
}

SceneSpec random_scene_spec(std::mt19937_64& rng, ReflectionType type, int height, int width) {
    SceneSpec s;
    s.height = height;
    s.width = width;
    s.reflection_type = type;
    s.surface_y = uniform_int(rng, static_cast<int>(0.42 * height), static_cast<int>(0.58 * height));
    s.surface_kind = type == ReflectionType::Others
                         ? SurfaceKind::GlossyFloor
                         : (uniform(rng, 0, 1) < 0.65 ? SurfaceKind::Water : SurfaceKind::GlossyFloor);
    s.object_shape = static_cast<ObjectShape>(uniform_int(rng, 0, 2));
    const int gap = uniform_int(rng, 0, 3);
    const double max_ry = std::min({0.2 * height, 0.5 * (height - s.surface_y - 3), 0.5 * (s.surface_y - gap - 3)});
    ObjectParams& o = s.object;
    o.ry = uniform(rng, std::min(4.0, max_ry), max_ry);
    o.rx = uniform(rng, 3.5, 0.16 * width);
    o.rotation_deg = s.object_shape == ObjectShape::Sprite ? uniform(rng, -8, 8) : uniform(rng, -25, 25);
    o.vertices = uniform_int(rng, 5, 8);
    s.attenuation = uniform(rng, 0.45, 0.9);
    s.blur_sigma = uniform(rng, 0.0, 1.2);
    s.ripple_amp = s.surface_kind == SurfaceKind::Water ? uniform(rng, 0.0, 1.5) : 0.0;
    if (type == ReflectionType::Others) {
        const double mag = uniform(rng, 15.0, 40.0);
        s.shear_deg = uniform(rng, 0, 1) < 0.5 ? -mag : mag;
    }
    // Keep the sheared reflection mostly on the canvas.
    const double drift = std::tan(s.shear_deg * kPi / 180.0) * 2.0 * o.ry;
    const double margin = std::max(o.rx, o.ry) + 2.0;
    const double lo = std::max(margin, margin - drift), hi = std::min(width - 1 - margin, width - 1 - margin - drift);
    o.cx = lo < hi ? uniform(rng, lo, hi) : 0.5 * (width - 1);
    o.cy = std::round(0.5 * s.surface_y);
    s.rng_seed = rng();

    // Rest the object `gap` rows above the surface. An integer shift of cy moves
    // the rasterized mask by whole rows, so one measurement suffices.
    const Mask m = render_object_mask(s);
    int bottom = -1;
    for (int i = 0; i < height; ++i)
        for (int j = 0; j < width; ++j)
            if (m.at(i, j)) bottom = std::max(bottom, i);
    if (bottom >= 0) o.cy += (s.surface_y - 1 - gap) - bottom;
    return s;
}

void validate_tuple(const DataTuple& t) {
    auto corrupt = [](const std::string& what) { throw Error(ErrorCode::CorruptData, what); };
    const int H = t.composite.height, W = t.composite.width;
    if (t.composite.channels != 3 || !t.composite.same_shape(t.target)) corrupt("composite/target shape mismatch");
    if (t.fg_mask.height != H || t.fg_mask.width != W || t.refl_mask.height != H || t.refl_mask.width != W)
        corrupt("mask shape mismatch");
    if (t.fg_mask.empty()) corrupt("empty foreground mask");
    if (t.refl_mask.empty()) corrupt("empty reflection mask");
    if (!geometry::is_valid(t.box_o) || !geometry::is_valid(t.box_r)) corrupt("invalid box");
    const Mask cover_o = geometry::rasterize_box(t.box_o, H, W);
    const Mask cover_r = geometry::rasterize_box(t.box_r, H, W);
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
            if (t.fg_mask.at(i, j) && t.refl_mask.at(i, j)) corrupt("foreground and reflection masks overlap");
            if (t.fg_mask.at(i, j) && !cover_o.at(i, j)) corrupt("box_o does not enclose the foreground");
            if (t.refl_mask.at(i, j) && !cover_r.at(i, j)) corrupt("box_r does not enclose the reflection");
            if (!t.refl_mask.at(i, j))
                for (int c = 0; c < 3; ++c)
                    if (t.composite.at(i, j, c) != t.target.at(i, j, c))
                        corrupt("composite differs from target outside the reflection mask");
        }
    }
}

ManifestEntry write_tuple(const fs::path& root, const std::string& tuple_id, const DataTuple& t) {
    ManifestEntry e;
    e.tuple_id = tuple_id;
    e.composite = "composite/" + tuple_id + ".png";
    e.fg_mask = "fg_mask/" + tuple_id + ".png";
    e.refl_mask = "refl_mask/" + tuple_id + ".png";
    e.target = "target/" + tuple_id + ".png";
    e.box_o = t.box_o;
    e.box_r = t.box_r;
    e.type_label = t.type_label;
    std::error_code ec;
    for (const char* dir : {"composite", "fg_mask", "refl_mask", "target"}) {
        fs::create_directories(root / dir, ec);
        if (ec) throw Error(ErrorCode::Io, "cannot create " + (root / dir).string() + ": " + ec.message());
    }
    write_png(root / e.composite, t.composite);
    write_png(root / e.fg_mask, t.fg_mask);
    write_png(root / e.refl_mask, t.refl_mask);
    write_png(root / e.target, t.target);
    return e;
}

DatasetManifest sample_dataset(const SampleOptions& opts) {
    if (opts.n < 1) throw Error(ErrorCode::InvalidArgument, "n must be >= 1");
    if (!(opts.type_ratio >= 0.0 && opts.type_ratio <= 1.0))
        throw Error(ErrorCode::InvalidArgument, "type_ratio must be in [0, 1]");
    std::error_code ec;
    fs::create_directories(opts.out_dir, ec);
    if (ec || !fs::is_directory(opts.out_dir))
        throw Error(ErrorCode::Io, "cannot create output directory " + opts.out_dir.string());

    DatasetManifest manifest;
    manifest.root = opts.out_dir;
    manifest.entries.reserve(static_cast<std::size_t>(opts.n));
    for (int i = 0; i < opts.n; ++i) {
        std::mt19937_64 rng(splitmix64(opts.seed * 0x100000001b3ULL + static_cast<std::uint64_t>(i)));
        const ReflectionType type =
            std::bernoulli_distribution(opts.type_ratio)(rng) ? ReflectionType::Vertical : ReflectionType::Others;
        for (int attempt = 0;; ++attempt) {
            const SceneSpec spec = random_scene_spec(rng, type, opts.height, opts.width);
            try {
                const DataTuple t = generate_scene(spec);
                char id[32];
                std::snprintf(id, sizeof id, "t%06d", i);
                ManifestEntry e = write_tuple(opts.out_dir, id, t);
                e.rng_seed = spec.rng_seed;
                e.scene = spec;
                manifest.entries.push_back(std::move(e));
                break;
            } catch (const Error& err) {
                if (err.code() != ErrorCode::DegenerateScene && err.code() != ErrorCode::InvalidArgument) throw;
                if (attempt >= 50) throw;
            }
        }
    }
    write_manifest(manifest, opts.out_dir / "manifest.json");
    return manifest;
}

std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest, double test_fraction,
                                                          std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw Error(ErrorCode::Split, "test_fraction must be in (0, 1)");
    const std::size_t n = manifest.entries.size();
    const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
    if (n_test == 0 || n_test >= n)
        throw Error(ErrorCode::Split, "fraction " + std::to_string(test_fraction) + " of " + std::to_string(n) +
                                          " tuples leaves an empty split");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> is_test(n, false);
    for (std::size_t k = 0; k < n_test; ++k) is_test[order[k]] = true;

    DatasetManifest train, test;
    train.root = test.root = manifest.root;
    train.split = Split::Train;
    test.split = Split::Test;
    for (std::size_t i = 0; i < n; ++i) (is_test[i] ? test : train).entries.push_back(manifest.entries[i]);
    return {std::move(train), std::move(test)};
}

DataTuple load_tuple(const DatasetManifest& manifest, const ManifestEntry& e) {
    DataTuple t;
    t.composite = read_png_image(manifest.root / e.composite);
    t.fg_mask = read_png_mask(manifest.root / e.fg_mask);
    t.refl_mask = read_png_mask(manifest.root / e.refl_mask);
    t.target = read_png_image(manifest.root / e.target);
    t.box_o = e.box_o;
    t.box_r = e.box_r;
    t.type_label = e.type_label;
    try {
        validate_tuple(t);
    } catch (const Error& err) {
        throw Error(err.code(), "tuple " + e.tuple_id + ": " + err.what());
    }
    return t;
}

std::vector<DataTuple> load_all(const DatasetManifest& manifest) {
    std::vector<DataTuple> out;
    out.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) out.push_back(load_tuple(manifest, e));
    return out;
}

nlohmann::json box_to_json(const RotatedBox& b) {
    return {{"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}, {"theta", b.theta}};
}

RotatedBox box_from_json(const nlohmann::json& j) {
    return {j.at("cx").get<double>(), j.at("cy").get<double>(), j.at("w").get<double>(), j.at("h").get<double>(),
            j.at("theta").get<double>()};
}

namespace {

nlohmann::json scene_to_json(const SceneSpec& s) {
    return {{"height", s.height},
            {"width", s.width},
            {"surface_y", s.surface_y},
            {"surface_kind", to_string(s.surface_kind)},
            {"object_shape", to_string(s.object_shape)},
            {"object",
             {{"cx", s.object.cx},
              {"cy", s.object.cy},
              {"rx", s.object.rx},
              {"ry", s.object.ry},
              {"rotation_deg", s.object.rotation_deg},
              {"vertices", s.object.vertices}}},
            {"reflection_type", to_string(s.reflection_type)},
            {"attenuation", s.attenuation},
            {"blur_sigma", s.blur_sigma},
            {"ripple_amp", s.ripple_amp},
            {"shear_deg", s.shear_deg},
            {"rng_seed", s.rng_seed}};
}

SceneSpec scene_from_json(const nlohmann::json& j) {
    SceneSpec s;
    s.height = j.at("height").get<int>();
    s.width = j.at("width").get<int>();
    s.surface_y = j.at("surface_y").get<int>();
    s.surface_kind = parse_surface_kind(j.at("surface_kind").get<std::string>());
    s.object_shape = parse_object_shape(j.at("object_shape").get<std::string>());
    const auto& o = j.at("object");
    s.object = {o.at("cx").get<double>(),           o.at("cy").get<double>(), o.at("rx").get<double>(),
                o.at("ry").get<double>(),           o.at("rotation_deg").get<double>(),
                o.at("vertices").get<int>()};
    s.reflection_type = parse_reflection_type(j.at("reflection_type").get<std::string>());
    s.attenuation = j.at("attenuation").get<double>();
    s.blur_sigma = j.at("blur_sigma").get<double>();
    s.ripple_amp = j.at("ripple_amp").get<double>();
    s.shear_deg = j.at("shear_deg").get<double>();
    s.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    return s;
}

}  // namespace

nlohmann::json to_json(const DatasetManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        entries.push_back({{"tuple_id", e.tuple_id},
                           {"composite", e.composite},
                           {"fg_mask", e.fg_mask},
                           {"refl_mask", e.refl_mask},
                           {"target", e.target},
                           {"box_o", box_to_json(e.box_o)},
                           {"box_r", box_to_json(e.box_r)},
                           {"type_label", to_string(e.type_label)},
                           {"rng_seed", e.rng_seed},
                           {"scene", scene_to_json(e.scene)}});
    }
    return {{"format_version", m.format_version}, {"split", to_string(m.split)}, {"entries", std::move(entries)}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != DatasetManifest::kFormatVersion)
            throw Error(ErrorCode::CorruptData, "unsupported manifest format_version " + std::to_string(m.format_version));
        m.split = parse_split(j.at("split").get<std::string>());
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.tuple_id = je.at("tuple_id").get<std::string>();
            e.composite = je.at("composite").get<std::string>();
            e.fg_mask = je.at("fg_mask").get<std::string>();
            e.refl_mask = je.at("refl_mask").get<std::string>();
            e.target = je.at("target").get<std::string>();
            e.box_o = box_from_json(je.at("box_o"));
            e.box_r = box_from_json(je.at("box_r"));
            e.type_label = parse_reflection_type(je.at("type_label").get<std::string>());
            e.rng_seed = je.at("rng_seed").get<std::uint64_t>();
            if (je.contains("scene")) e.scene = scene_from_json(je.at("scene"));
            m.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorCode::CorruptData, std::string("malformed manifest: ") + ex.what());
    }
    std::vector<std::string> ids;
    for (const auto& e : m.entries) ids.push_back(e.tuple_id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
        throw Error(ErrorCode::CorruptData, "duplicate tuple_id in manifest");
    return m;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << to_json(m).dump(2) << '\n';
    if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

DatasetManifest read_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
    std::ifstream in(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorCode::CorruptData, "manifest " + path.string() + ": " + ex.what());
    }
    DatasetManifest m = manifest_from_json(j);
    m.root = path.parent_path();
    for (const auto& e : m.entries)
        for (const auto* rel : {&e.composite, &e.fg_mask, &e.refl_mask, &e.target})
            if (!fs::exists(m.root / *rel))
                throw Error(ErrorCode::MissingFile, "tuple " + e.tuple_id + ": " + (m.root / *rel).string());
    return m;
}

}  // namespace reflgen::dataset
