// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "reflgen/aux_encoder.h"
#include "reflgen/checkpoint.h"
#include "reflgen/conditioning.h"
#include "reflgen/dataset.h"

namespace reflgen::diffusion {

/// Linear beta schedule. alpha_bar is kept in double on the host.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bar;

    static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);
};

/// z_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps. Throws InvalidArgument for t outside [0, T).
torch::Tensor add_noise(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& schedule);
/// Per-sample timesteps t: [B] int64.
torch::Tensor add_noise(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                        const NoiseSchedule& schedule);

struct DenoiserConfig {
    int64_t base_channels = 16;
    std::vector<int64_t> channel_multipliers{1, 2, 2};
    std::vector<int64_t> attention_resolutions{16};
    int64_t image_size = 64;
    int64_t context_dim = 64;
    int64_t heads = 4;
    int64_t reference_size = 32;
    int T = 1000;
    int sampler_steps = 50;
    double strength = 0.5;
    bool use_box_mask = true;
    bool use_ref_features = true;
    bool use_type_embedding = true;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);
};

struct ResBlockImpl : torch::nn::Module {
    ResBlockImpl(int64_t in, int64_t out, int64_t temb_dim);
    torch::Tensor forward(torch::Tensor x, const torch::Tensor& temb);

    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    torch::nn::Linear temb_proj{nullptr};
};
TORCH_MODULE(ResBlock);

/// GroupNorm, decoupled cross-attention over the bundle, zero-initialized output projection, residual.
struct CrossAttentionBlockImpl : torch::nn::Module {
    CrossAttentionBlockImpl(int64_t channels, int64_t context_dim, int64_t heads);
    torch::Tensor forward(torch::Tensor x, const conditioning::ConditioningBundle& bundle, bool use_type,
                          bool use_ref);

    torch::nn::GroupNorm norm{nullptr};
    conditioning::DecoupledCrossAttention attn{nullptr};
    torch::nn::Linear out{nullptr};
};
TORCH_MODULE(CrossAttentionBlock);

/// One encoder stage: a resblock, optional cross-attention, optional stride-2 downsample.
struct EncoderLevel {
    ResBlock res{nullptr};
    CrossAttentionBlock attn{nullptr};
    torch::nn::Conv2d down{nullptr};
};

/// Control branch: a copy of the main encoder (no cross-attention) reading
/// cat(z_t, composite, fg_mask, box_mask). Every output goes through a
/// zero-initialized 1x1 convolution before it is added to the main skips.
struct ControlBranchImpl : torch::nn::Module {
    explicit ControlBranchImpl(const DenoiserConfig& cfg);
    /// Returns the residuals for every skip followed by the one for the middle block.
    std::vector<torch::Tensor> forward(torch::Tensor z_t, torch::Tensor control, const torch::Tensor& temb);

    torch::nn::Conv2d conv_in{nullptr};
    std::vector<EncoderLevel> levels;
    ResBlock mid{nullptr};
    torch::nn::ModuleList zero_convs{nullptr};
};
TORCH_MODULE(ControlBranch);

/// Epsilon-prediction U-Net with the control branch and the conditioner that builds its bundle.
class DenoiserImpl : public torch::nn::Module {
public:
    explicit DenoiserImpl(const DenoiserConfig& cfg);

    /// z_t: [B, 3, H, W] in the [-1, 1] pixel domain; t: [B] int64; control: [B, 5, H, W]
    /// (composite in [0, 1], fg mask, box mask). Inputs switched off by the config flags
    /// are zeroed or their attention stream is dropped. An undefined control tensor
    /// bypasses the control branch.
    torch::Tensor forward(torch::Tensor z_t, torch::Tensor t, torch::Tensor control,
                          const conditioning::ConditioningBundle& bundle);

    /// Reference crops [B, 3, S, S] in [0, 1] and types [B] -> bundle.
    conditioning::ConditioningBundle condition(const torch::Tensor& references, const torch::Tensor& types);

    const DenoiserConfig& config() const { return cfg_; }

    conditioning::Conditioner conditioner{nullptr};
    ControlBranch control{nullptr};

private:
    torch::Tensor time_embedding(const torch::Tensor& t);

    DenoiserConfig cfg_;
    torch::nn::Sequential time_mlp{nullptr};
    torch::nn::Conv2d conv_in{nullptr};
    std::vector<EncoderLevel> down_levels_;
    ResBlock mid1{nullptr}, mid2{nullptr};
    CrossAttentionBlock mid_attn{nullptr};
    struct DecoderBlock {
        ResBlock res{nullptr};
        CrossAttentionBlock attn{nullptr};
        torch::nn::Conv2d up{nullptr};
    };
    std::vector<DecoderBlock> up_blocks_;
    torch::nn::GroupNorm norm_out{nullptr};
    torch::nn::Conv2d conv_out{nullptr};
};
TORCH_MODULE(Denoiser);

/// Stacks composite [B, 3, H, W], fg mask and box mask [B, 1, H, W] into the control input.
torch::Tensor make_control(const torch::Tensor& composite, const torch::Tensor& fg_mask, const torch::Tensor& box_mask);

/// Mean squared error over all elements.
torch::Tensor diffusion_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat);

struct DiffusionModel {
    DenoiserConfig config;
    NoiseSchedule schedule;
    Denoiser net{nullptr};

    explicit DiffusionModel(const DenoiserConfig& cfg);
    checkpoint::Checkpoint to_checkpoint(const nlohmann::json& metadata = nlohmann::json::object()) const;
    static DiffusionModel from_checkpoint(const checkpoint::Checkpoint& ckpt);
};

struct DiffusionTrainConfig {
    int steps = 20000;
    int batch_size = 8;
    double learning_rate = 5e-4;
    int warmup_steps = 200;
    double ema_decay = 0.999;  // 0 disables the average
    double grad_clip = 1.0;
    bool augment = true;       // random horizontal flips
    bool use_gt_boxes = false;  // rasterize ground-truth reflection boxes instead of aux predictions
    int log_every = 100;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static DiffusionTrainConfig from_json(const nlohmann::json& j);
};

struct LossPoint {
    int step = 0;
    double loss = 0.0;  // mean over the logging window
};

struct DiffusionTrainResult {
    checkpoint::Checkpoint checkpoint;
    std::vector<LossPoint> loss_curve;
    double initial_loss = 0.0;  // first minibatch, before any update
};

using DiffusionProgress = std::function<void(const LossPoint&)>;

/// Everything the denoiser needs for one tuple, precomputed once.
struct PreparedSample {
    torch::Tensor composite;  // [3, H, W] in [0, 1]
    torch::Tensor fg_mask;    // [1, H, W]
    torch::Tensor box_mask;   // [1, H, W]
    torch::Tensor reference;  // [3, S, S] in [0, 1]
    int64_t type = 0;
    torch::Tensor target;     // [3, H, W], undefined at inference
};

/// Uses the aux model for type and box unless use_gt_boxes (then aux may be null).
std::vector<PreparedSample> prepare_samples(const std::vector<dataset::DataTuple>& tuples,
                                            aux_encoder::AuxModel* aux, bool use_gt_boxes,
                                            int64_t reference_size);
PreparedSample prepare_inference(const Image& composite, const Mask& fg_mask, aux_encoder::AuxModel& aux,
                                 int64_t reference_size);

/// Throws Divergence on a non-finite loss, InvalidArgument without data or without an aux model
/// outside ground-truth-box mode.
DiffusionTrainResult train_diffusion(const std::vector<dataset::DataTuple>& train, aux_encoder::AuxModel* aux,
                                     const DenoiserConfig& model_cfg, const DiffusionTrainConfig& train_cfg,
                                     const DiffusionProgress& progress = {});

/// Timesteps visited by the sampler: `steps` values evenly spaced from t_start down towards 0.
std::vector<int> sampler_timesteps(int t_start, int steps);
int start_timestep(double strength, int T);

/// Noises each composite to t_start with its own seeded generator, then runs the
/// deterministic sampler. Output images are clipped to [0, 1].
std::vector<Image> infer_prepared(DiffusionModel& model, const std::vector<PreparedSample>& samples,
                                  const std::vector<std::uint64_t>& seeds, double strength, int steps);

Image infer(DiffusionModel& model, aux_encoder::AuxModel& aux, const Image& composite, const Mask& fg_mask,
            double strength, int steps, std::uint64_t seed);

}  // namespace reflgen::diffusion
