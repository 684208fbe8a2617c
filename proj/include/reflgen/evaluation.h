// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "reflgen/aux_encoder.h"
#include "reflgen/dataset.h"
#include "reflgen/diffusion.h"
#include "reflgen/image.h"

namespace reflgen::evaluation {

/// Root mean squared per-channel difference on the 0-255 scale, over the region
/// pixels or the whole image. Throws ShapeMismatch, or EmptyRegion for an empty region.
double rmse(const Image& pred, const Image& gt, const Mask* region = nullptr);

enum class LocalRegion { Mask, BoundingBox };
std::string_view to_string(LocalRegion r);
LocalRegion parse_local_region(std::string_view s);

struct SsimResult {
    double value = 0.0;
    bool uniform_fallback = false;  // region too small for the 11x11 window
};

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), k1 = 0.01,
/// k2 = 0.03, dynamic range 255, valid windows only, averaged over channels.
/// With a region, BoundingBox mode scores the crop of the region's bounding box;
/// Mask mode averages the full-image map over windows centred on region pixels.
/// When no window fits, one uniform window spanning the region's box is used.
SsimResult ssim(const Image& pred, const Image& gt, const Mask* region = nullptr,
                LocalRegion mode = LocalRegion::BoundingBox);

struct EvalOptions {
    double strength = 0.5;
    int steps = 50;
    std::uint64_t seed = 0;  // tuple i uses seed + i
    LocalRegion local_rmse = LocalRegion::Mask;
    LocalRegion local_ssim = LocalRegion::BoundingBox;
    int batch_size = 16;

    nlohmann::json to_json() const;
};

struct TupleMetrics {
    double gr = 0.0;
    double lr = 0.0;
    double gs = 0.0;
    double ls = 0.0;
    double gr_outside = 0.0;  // global RMSE restricted to pixels outside the reflection mask
    bool ssim_fallback = false;
};

/// Scores one output against the tuple's target; local metrics use the tuple's reflection mask.
TupleMetrics score(const Image& pred, const dataset::DataTuple& tuple, const EvalOptions& opts);

struct TupleRecord {
    std::string tuple_id;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    TupleMetrics metrics;
    TupleMetrics baseline;  // composite scored as the prediction
};

struct MetricsReport {
    std::string label;
    double gr = 0.0;
    double lr = 0.0;
    double gs = 0.0;
    double ls = 0.0;
    double gr_outside = 0.0;
    double type_accuracy = -1.0;  // negative when not measured
    double mean_kfiou = -1.0;
    std::size_t n = 0;
    std::size_t n_failed = 0;
    std::size_t ssim_fallbacks = 0;
    bool reference_only = false;  // static published numbers, not produced by this run

    nlohmann::json to_json() const;
};

struct EvaluationResult {
    MetricsReport model;
    MetricsReport baseline;             // no-edit: composite as the output
    std::vector<TupleRecord> records;   // includes failures
    double win_rate = 0.0;              // fraction of scored tuples with LR below the baseline LR
    EvalOptions options;

    std::vector<std::string> failed_ids() const;
    nlohmann::json to_json() const;
};

struct EvalSample {
    std::string tuple_id;
    dataset::DataTuple tuple;
    std::string load_error;  // non-empty when the tuple could not be read
};

/// Loads every manifest entry; unreadable tuples become samples carrying load_error.
std::vector<EvalSample> load_samples(const dataset::DatasetManifest& manifest);

struct GeneratedImage {
    Image image;
    std::string error;  // non-empty on failure
};

/// Produces one output per tuple, in order.
using Generator = std::function<std::vector<GeneratedImage>(const std::vector<const dataset::DataTuple*>& tuples,
                                                            const std::vector<std::uint64_t>& seeds)>;

/// Runs the generator over every readable sample, scores successes, records failures
/// and adds the no-edit baseline. Aggregates are plain means over successful tuples.
EvaluationResult evaluate(const std::vector<EvalSample>& samples, const Generator& generator, const EvalOptions& opts,
                          const std::string& label = "model");

/// Generator backed by the aux and diffusion checkpoints.
Generator checkpoint_generator(aux_encoder::AuxModel& aux, diffusion::DiffusionModel& model, const EvalOptions& opts);

/// Full pipeline evaluation; also fills type accuracy and mean KFIoU from the aux model.
EvaluationResult evaluate_models(const std::vector<EvalSample>& samples, aux_encoder::AuxModel& aux,
                                 diffusion::DiffusionModel& model, const EvalOptions& opts,
                                 const std::string& label = "model");

MetricsReport aggregate(const std::string& label, const std::vector<TupleRecord>& records, bool baseline);

/// Published full-scale numbers, shown for orientation only.
MetricsReport published_reference();

/// Aligned-column table with GR/LR/GS/LS plus the extra columns, one row per report.
std::string format_table(const std::vector<MetricsReport>& rows, const EvalOptions& opts);

}  // namespace reflgen::evaluation
