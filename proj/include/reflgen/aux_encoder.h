// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "reflgen/checkpoint.h"
#include "reflgen/dataset.h"
#include "reflgen/geometry.h"

namespace reflgen::aux_encoder {

using dataset::ReflectionType;
using geometry::RotatedBox;

struct AuxConfig {
    std::string backbone = "residual";  // or "resnet18"
    int64_t backbone_width = 16;
    int64_t depth = 2;  // residual blocks per stage
    std::string activation = "relu";  // "silu" gives a smooth network for gradient checks
    double learning_rate = 1e-3;
    int epochs = 20;
    int batch_size = 32;
    std::uint64_t seed = 0;
    bool augment = true;  // random horizontal flips
    int64_t height = 64;
    int64_t width = 64;

    void validate() const;
    nlohmann::json to_json() const;
    static AuxConfig from_json(const nlohmann::json& j);
};

struct AuxPrediction {
    std::array<double, 2> type_logits{};  // {vertical, others}
    geometry::BoxRegressionCoeffs coeffs;

    /// Argmax; exact ties go to vertical.
    ReflectionType type() const;
};

class BasicBlockImpl : public torch::nn::Module {
public:
    BasicBlockImpl(int64_t in, int64_t out, int64_t stride, bool silu = false);
    torch::Tensor forward(torch::Tensor x);

private:
    torch::Tensor act(const torch::Tensor& x) const;

    bool silu_ = false;
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, shortcut{nullptr};
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr}, norm_sc{nullptr};
};
TORCH_MODULE(BasicBlock);

/// [B, 4, H, W] (image in [-1, 1] + mask) -> [B, 7]: two type logits then five coefficients.
class AuxNetImpl : public torch::nn::Module {
public:
    explicit AuxNetImpl(const AuxConfig& cfg);
    torch::Tensor forward(torch::Tensor x);

private:
    int64_t forward_features_probe(int64_t height, int64_t width);

    torch::nn::Conv2d stem{nullptr};
    torch::nn::GroupNorm stem_norm{nullptr};
    torch::nn::Sequential stages{nullptr};
    torch::nn::Linear head{nullptr};
    bool maxpool_ = false;
    bool silu_ = false;
};
TORCH_MODULE(AuxNet);

/// Composite [B, 3, H, W] in [0, 1] and mask [B, 1, H, W] -> network input.
torch::Tensor make_input(const torch::Tensor& composite, const torch::Tensor& fg_mask);

struct AuxModel {
    AuxConfig config;
    AuxNet net{nullptr};

    explicit AuxModel(const AuxConfig& cfg);
    checkpoint::Checkpoint to_checkpoint(const nlohmann::json& metadata = nlohmann::json::object()) const;
    static AuxModel from_checkpoint(const checkpoint::Checkpoint& ckpt);
};

/// Throws ShapeMismatch when image, mask and network size disagree.
AuxPrediction aux_forward(AuxModel& model, const Image& composite, const Mask& fg_mask);

struct AuxLoss {
    double l_cls = 0.0;
    double l_rbbox = 0.0;
    double l_en = 0.0;
};

/// Scalar reference: cross-entropy on the logits plus kfiou_loss of the decoded box.
AuxLoss aux_loss(const AuxPrediction& pred, ReflectionType gt_type, const RotatedBox& b_o, const RotatedBox& b_r_gt);

// Batched tensor route used for training. Boxes are [B, 5] rows (cx, cy, w, h, theta_deg).
torch::Tensor boxes_to_tensor(const std::vector<RotatedBox>& boxes);
torch::Tensor decode_regression_batch(const torch::Tensor& box_o, const torch::Tensor& coeffs);
torch::Tensor kfiou_batch(const torch::Tensor& a, const torch::Tensor& b);

struct AuxBatchLoss {
    torch::Tensor l_cls;   // mean over the batch
    torch::Tensor l_rbbox;
    torch::Tensor l_en;
    torch::Tensor kfiou;   // [B], detached
};
AuxBatchLoss aux_loss_batch(const torch::Tensor& outputs, const torch::Tensor& types, const torch::Tensor& box_o,
                            const torch::Tensor& box_r);

struct AuxEvaluation {
    double type_accuracy = 0.0;
    double mean_kfiou = 0.0;
    double mean_loss = 0.0;
    std::size_t n = 0;
};

struct AuxEpochMetrics {
    int epoch = 0;  // 0 = before training
    double train_loss = 0.0;
    AuxEvaluation train;
    AuxEvaluation val;
};

struct AuxTrainResult {
    checkpoint::Checkpoint checkpoint;
    std::vector<AuxEpochMetrics> history;
};

using AuxProgress = std::function<void(const AuxEpochMetrics&)>;

/// Trains from scratch. Non-finite losses abort with a Divergence error.
AuxTrainResult train_aux(const std::vector<dataset::DataTuple>& train, const std::vector<dataset::DataTuple>& val,
                         const AuxConfig& cfg, const AuxProgress& progress = {});

AuxEvaluation evaluate_aux(AuxModel& model, const std::vector<dataset::DataTuple>& tuples);

struct BoxPrediction {
    ReflectionType type = ReflectionType::Vertical;
    RotatedBox box_o;
    RotatedBox box_r;
    Mask box_mask;
    AuxPrediction raw;
};

/// Throws EmptyRegion for an empty foreground mask.
BoxPrediction predict_reflection_box(AuxModel& model, const Image& composite, const Mask& fg_mask);
std::vector<BoxPrediction> predict_reflection_boxes(AuxModel& model, const std::vector<Image>& composites,
                                                    const std::vector<Mask>& fg_masks);

}  // namespace reflgen::aux_encoder
