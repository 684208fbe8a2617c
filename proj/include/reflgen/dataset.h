// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "reflgen/geometry.h"
#include "reflgen/image.h"

namespace reflgen::dataset {

enum class ReflectionType { Vertical = 0, Others = 1 };
enum class SurfaceKind { Water, GlossyFloor };
enum class ObjectShape { Ellipse, Polygon, Sprite };
enum class Split { All, Train, Test };

std::string_view to_string(ReflectionType t);
std::string_view to_string(SurfaceKind k);
std::string_view to_string(ObjectShape s);
std::string_view to_string(Split s);
ReflectionType parse_reflection_type(std::string_view s);
SurfaceKind parse_surface_kind(std::string_view s);
ObjectShape parse_object_shape(std::string_view s);
Split parse_split(std::string_view s);

struct ObjectParams {
    double cx = 32.0;
    double cy = 20.0;
    double rx = 6.0;  // half extent along the object's own x-axis
    double ry = 8.0;
    double rotation_deg = 0.0;
    int vertices = 6;  // polygon only
};

/// Everything needed to render one tuple. Rendering is a pure function of the SceneSpec.
struct SceneSpec {
    int height = 64;
    int width = 64;
    int surface_y = 32;  // first row of the reflective surface
    SurfaceKind surface_kind = SurfaceKind::Water;
    ObjectShape object_shape = ObjectShape::Ellipse;
    ObjectParams object;
    ReflectionType reflection_type = ReflectionType::Vertical;
    double attenuation = 0.8;
    double blur_sigma = 0.0;
    double ripple_amp = 0.0;
    double shear_deg = 0.0;  // only used for ReflectionType::Others
    std::uint64_t rng_seed = 0;
};

struct DataTuple {
    Image composite;  // reflection-free input
    Mask fg_mask;
    Mask refl_mask;
    Image target;  // composite with the reflection
    geometry::RotatedBox box_o;
    geometry::RotatedBox box_r;
    ReflectionType type_label = ReflectionType::Vertical;
};

struct ManifestEntry {
    std::string tuple_id;
    std::string composite;  // paths relative to the dataset root
    std::string fg_mask;
    std::string refl_mask;
    std::string target;
    geometry::RotatedBox box_o;
    geometry::RotatedBox box_r;
    ReflectionType type_label = ReflectionType::Vertical;
    std::uint64_t rng_seed = 0;
    SceneSpec scene;
};

struct DatasetManifest {
    static constexpr int kFormatVersion = 1;

    int format_version = kFormatVersion;
    Split split = Split::All;
    std::vector<ManifestEntry> entries;
    std::filesystem::path root;  // not serialized; set on load
};

void validate(const SceneSpec& spec);

/// Object alpha (hard edged) for the scene, before any placement checks.
Mask render_object_mask(const SceneSpec& spec);

/// Throws DegenerateScene when no reflection pixels land on the canvas.
DataTuple generate_scene(const SceneSpec& spec);

/// Draws a random, valid spec of the given type.
SceneSpec random_scene_spec(std::mt19937_64& rng, ReflectionType type, int height = 64, int width = 64);

/// Checks the tuple invariants; throws CorruptData naming the first violation.
void validate_tuple(const DataTuple& t);

struct SampleOptions {
    int n = 100;
    double type_ratio = 0.9;  // fraction of vertical reflections
    std::uint64_t seed = 0;
    int height = 64;
    int width = 64;
    std::filesystem::path out_dir;
};

/// Generates `n` tuples under `out_dir` and writes `out_dir/manifest.json`.
DatasetManifest sample_dataset(const SampleOptions& opts);

/// Disjoint, exhaustive, seed-deterministic split; the test side gets round(n * test_fraction).
std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest, double test_fraction,
                                                          std::uint64_t seed);

DataTuple load_tuple(const DatasetManifest& manifest, const ManifestEntry& entry);
std::vector<DataTuple> load_all(const DatasetManifest& manifest);

ManifestEntry write_tuple(const std::filesystem::path& root, const std::string& tuple_id, const DataTuple& t);

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

nlohmann::json box_to_json(const geometry::RotatedBox& b);
geometry::RotatedBox box_from_json(const nlohmann::json& j);

}  // namespace reflgen::dataset
