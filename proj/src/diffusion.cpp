// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include "reflgen/diffusion.h"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "reflgen/errors.h"
#include "reflgen/geometry.h"
#include "reflgen/tensor_util.h"

namespace reflgen::diffusion {

namespace F = torch::nn::functional;

namespace {

int64_t groups_for(int64_t ch) { return ch % 8 == 0 ? 8 : (ch % 4 == 0 ? 4 : 1); }

torch::nn::Conv2d conv3(int64_t in, int64_t out, int64_t stride = 1) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::nn::Conv2d zero_conv(int64_t ch) {
    torch::nn::Conv2d c(torch::nn::Conv2dOptions(ch, ch, 1));
    torch::NoGradGuard g;
    c->weight.zero_();
    c->bias.zero_();
    return c;
}

torch::Tensor schedule_column(const std::vector<double>& values, const torch::Tensor& t, const torch::Tensor& like) {
    const auto table = torch::tensor(values, torch::kFloat64);
    return table.index_select(0, t.to(torch::kInt64)).to(like.dtype()).view({-1, 1, 1, 1});
}

bool attention_at(const DenoiserConfig& cfg, int64_t resolution) {
    for (auto r : cfg.attention_resolutions)
        if (r == resolution) return true;
    return false;
}

std::string rng_state(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

}  // namespace

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
    if (T < 2 || !(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start < beta_end))
        throw Error(ErrorCode::InvalidArgument, "linear schedule needs T >= 2 and 0 < beta_start < beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double beta = beta_start + (beta_end - beta_start) * t / (T - 1);
        s.betas.push_back(beta);
        s.alphas.push_back(1.0 - beta);
        prod *= 1.0 - beta;
        s.alpha_bar.push_back(prod);
    }
    return s;
}

torch::Tensor add_noise(const torch::Tensor& x0, int t, const torch::Tensor& eps, const NoiseSchedule& schedule) {
    if (t < 0 || t >= schedule.T) throw Error(ErrorCode::InvalidArgument, "timestep outside [0, T)");
    if (!x0.sizes().equals(eps.sizes())) throw Error(ErrorCode::ShapeMismatch, "add_noise: x0 and eps differ in shape");
    const double ab = schedule.alpha_bar[static_cast<std::size_t>(t)];
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor add_noise(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                        const NoiseSchedule& schedule) {
    if (!x0.sizes().equals(eps.sizes())) throw Error(ErrorCode::ShapeMismatch, "add_noise: x0 and eps differ in shape");
    if (t.dim() != 1 || t.size(0) != x0.size(0)) throw Error(ErrorCode::ShapeMismatch, "add_noise: one t per sample");
    if (t.numel() > 0 && (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() >= schedule.T))
        throw Error(ErrorCode::InvalidArgument, "timestep outside [0, T)");
    const auto ab = schedule_column(schedule.alpha_bar, t, x0);
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
}

// ---------------------------------------------------------------------------
// Config

void DenoiserConfig::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidArgument, "denoiser config: " + m); };
    if (base_channels < 1 || channel_multipliers.empty()) fail("base_channels and channel_multipliers are required");
    for (auto m : channel_multipliers)
        if (m < 1) fail("channel multipliers must be positive");
    if (image_size % (int64_t{1} << (channel_multipliers.size() - 1)) != 0)
        fail("image_size must be divisible by the total downsampling factor");
    if (context_dim < 1 || heads < 1 || context_dim % heads != 0) fail("context_dim must be a multiple of heads");
    if (T < 2) fail("T must be at least 2");
    if (sampler_steps < 1 || sampler_steps > T) fail("sampler_steps must lie in [1, T]");
    if (!(strength > 0.0 && strength <= 1.0)) fail("strength must lie in (0, 1]");
    if (reference_size < 8 || reference_size % 8 != 0) fail("reference_size must be a positive multiple of 8");
}

nlohmann::json DenoiserConfig::to_json() const {
    return {{"base_channels", base_channels},
            {"channel_multipliers", channel_multipliers},
            {"attention_resolutions", attention_resolutions},
            {"image_size", image_size},
            {"context_dim", context_dim},
            {"heads", heads},
            {"reference_size", reference_size},
            {"T", T},
            {"sampler_steps", sampler_steps},
            {"strength", strength},
            {"use_box_mask", use_box_mask},
            {"use_ref_features", use_ref_features},
            {"use_type_embedding", use_type_embedding},
            {"seed", seed}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    try {
        c.base_channels = j.at("base_channels").get<int64_t>();
        c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int64_t>>();
        c.attention_resolutions = j.at("attention_resolutions").get<std::vector<int64_t>>();
        c.image_size = j.at("image_size").get<int64_t>();
        c.context_dim = j.at("context_dim").get<int64_t>();
        c.heads = j.at("heads").get<int64_t>();
        c.reference_size = j.at("reference_size").get<int64_t>();
        c.T = j.at("T").get<int>();
        c.sampler_steps = j.at("sampler_steps").get<int>();
        c.strength = j.at("strength").get<double>();
        c.use_box_mask = j.at("use_box_mask").get<bool>();
        c.use_ref_features = j.at("use_ref_features").get<bool>();
        c.use_type_embedding = j.at("use_type_embedding").get<bool>();
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::CorruptData, std::string("denoiser config: ") + e.what());
    }
    c.validate();
    return c;
}

void DiffusionTrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidArgument, "diffusion training: " + m); };
    if (steps < 0) fail("steps must be non-negative");
    if (batch_size < 1) fail("batch_size must be positive");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (warmup_steps < 0) fail("warmup_steps must be non-negative");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) fail("ema_decay must lie in [0, 1)");
    if (!(grad_clip > 0.0)) fail("grad_clip must be positive");
    if (log_every < 1) fail("log_every must be positive");
}

nlohmann::json DiffusionTrainConfig::to_json() const {
    return {{"steps", steps},           {"batch_size", batch_size}, {"learning_rate", learning_rate},
            {"warmup_steps", warmup_steps}, {"ema_decay", ema_decay}, {"grad_clip", grad_clip},
            {"augment", augment},       {"use_gt_boxes", use_gt_boxes}, {"log_every", log_every},
            {"seed", seed}};
}

DiffusionTrainConfig DiffusionTrainConfig::from_json(const nlohmann::json& j) {
    DiffusionTrainConfig c;
    try {
        c.steps = j.at("steps").get<int>();
        c.batch_size = j.at("batch_size").get<int>();
        c.learning_rate = j.at("learning_rate").get<double>();
        c.warmup_steps = j.at("warmup_steps").get<int>();
        c.ema_decay = j.at("ema_decay").get<double>();
        c.grad_clip = j.at("grad_clip").get<double>();
        c.augment = j.at("augment").get<bool>();
        c.use_gt_boxes = j.at("use_gt_boxes").get<bool>();
        c.log_every = j.at("log_every").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::CorruptData, std::string("diffusion training config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Network

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out, int64_t temb_dim) {
    norm1 = register_module("norm1", torch::nn::GroupNorm(groups_for(in), in));
    conv1 = register_module("conv1", conv3(in, out));
    temb_proj = register_module("temb_proj", torch::nn::Linear(temb_dim, out));
    norm2 = register_module("norm2", torch::nn::GroupNorm(groups_for(out), out));
    conv2 = register_module("conv2", conv3(out, out));
    if (in != out) skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(torch::Tensor x, const torch::Tensor& temb) {
    auto h = conv1(torch::silu(norm1(x)));
    h = h + temb_proj(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2(torch::silu(norm2(h)));
    return h + (skip ? skip(x) : x);
}

CrossAttentionBlockImpl::CrossAttentionBlockImpl(int64_t channels, int64_t context_dim, int64_t heads) {
    norm = register_module("norm", torch::nn::GroupNorm(groups_for(channels), channels));
    attn = register_module("attn", conditioning::DecoupledCrossAttention(channels, context_dim, heads));
    out = register_module("out", torch::nn::Linear(channels, channels));
    torch::NoGradGuard g;
    out->weight.zero_();
    out->bias.zero_();
}

torch::Tensor CrossAttentionBlockImpl::forward(torch::Tensor x, const conditioning::ConditioningBundle& bundle,
                                               bool use_type, bool use_ref) {
    if (!use_type && !use_ref) return x;
    const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    auto q = norm(x).flatten(2).transpose(1, 2);  // [B, HW, C]
    auto a = out(attn(q, bundle, use_type, use_ref));
    return x + a.transpose(1, 2).reshape({B, C, H, W});
}

namespace {

// Shared layout of the main encoder and its control copy.
struct EncoderPlan {
    std::vector<int64_t> level_channels;
    std::vector<int64_t> skip_channels;
};

EncoderPlan plan_encoder(const DenoiserConfig& cfg) {
    EncoderPlan p;
    p.skip_channels.push_back(cfg.base_channels);
    for (std::size_t l = 0; l < cfg.channel_multipliers.size(); ++l) {
        const int64_t ch = cfg.base_channels * cfg.channel_multipliers[l];
        p.level_channels.push_back(ch);
        p.skip_channels.push_back(ch);
        if (l + 1 < cfg.channel_multipliers.size()) p.skip_channels.push_back(ch);
    }
    return p;
}

int64_t temb_dim(const DenoiserConfig& cfg) { return 4 * cfg.base_channels; }

std::vector<EncoderLevel> build_encoder(torch::nn::Module& owner, const DenoiserConfig& cfg, bool with_attention) {
    std::vector<EncoderLevel> levels;
    const auto plan = plan_encoder(cfg);
    int64_t ch = cfg.base_channels;
    int64_t res = cfg.image_size;
    for (std::size_t l = 0; l < plan.level_channels.size(); ++l) {
        const std::string tag = "down" + std::to_string(l);
        EncoderLevel lv;
        lv.res = owner.register_module(tag + "_res", ResBlock(ch, plan.level_channels[l], temb_dim(cfg)));
        ch = plan.level_channels[l];
        if (with_attention && attention_at(cfg, res))
            lv.attn = owner.register_module(tag + "_attn", CrossAttentionBlock(ch, cfg.context_dim, cfg.heads));
        if (l + 1 < plan.level_channels.size()) {
            lv.down = owner.register_module(tag + "_down", conv3(ch, ch, 2));
            res /= 2;
        }
        levels.push_back(lv);
    }
    return levels;
}

}  // namespace

ControlBranchImpl::ControlBranchImpl(const DenoiserConfig& cfg) {
    conv_in = register_module("conv_in", conv3(3 + 5, cfg.base_channels));
    levels = build_encoder(*this, cfg, false);
    const int64_t top = plan_encoder(cfg).level_channels.back();
    mid = register_module("mid", ResBlock(top, top, temb_dim(cfg)));
    zero_convs = register_module("zero_convs", torch::nn::ModuleList());
    for (auto ch : plan_encoder(cfg).skip_channels) zero_convs->push_back(zero_conv(ch));
    zero_convs->push_back(zero_conv(top));
}

std::vector<torch::Tensor> ControlBranchImpl::forward(torch::Tensor z_t, torch::Tensor control,
                                                      const torch::Tensor& temb) {
    std::vector<torch::Tensor> feats;
    auto h = conv_in(torch::cat({z_t, control}, 1));
    feats.push_back(h);
    for (auto& lv : levels) {
        h = lv.res(h, temb);
        feats.push_back(h);
        if (lv.down) {
            h = lv.down(h);
            feats.push_back(h);
        }
    }
    feats.push_back(mid(h, temb));
    for (std::size_t i = 0; i < feats.size(); ++i) feats[i] = zero_convs[i]->as<torch::nn::Conv2d>()->forward(feats[i]);
    return feats;
}

DenoiserImpl::DenoiserImpl(const DenoiserConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    const int64_t td = temb_dim(cfg);
    time_mlp = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(cfg.base_channels, td),
                                                                 torch::nn::SiLU(), torch::nn::Linear(td, td)));
    conv_in = register_module("conv_in", conv3(3, cfg.base_channels));
    down_levels_ = build_encoder(*this, cfg, true);

    const auto plan = plan_encoder(cfg);
    const int64_t top = plan.level_channels.back();
    const int64_t bottom_res = cfg.image_size >> (plan.level_channels.size() - 1);
    mid1 = register_module("mid1", ResBlock(top, top, td));
    if (attention_at(cfg, bottom_res))
        mid_attn = register_module("mid_attn", CrossAttentionBlock(top, cfg.context_dim, cfg.heads));
    mid2 = register_module("mid2", ResBlock(top, top, td));

    auto skips = plan.skip_channels;
    int64_t ch = top;
    int64_t res = bottom_res;
    for (int l = static_cast<int>(plan.level_channels.size()) - 1; l >= 0; --l) {
        for (int i = 0; i < 2; ++i) {
            const std::string tag = "up" + std::to_string(l) + "_" + std::to_string(i);
            DecoderBlock b;
            const int64_t skip_ch = skips.back();
            skips.pop_back();
            b.res = register_module(tag + "_res", ResBlock(ch + skip_ch, plan.level_channels[l], td));
            ch = plan.level_channels[l];
            if (attention_at(cfg, res))
                b.attn = register_module(tag + "_attn", CrossAttentionBlock(ch, cfg.context_dim, cfg.heads));
            if (l > 0 && i == 1) {
                b.up = register_module(tag + "_up", conv3(ch, ch));
                res *= 2;
            }
            up_blocks_.push_back(b);
        }
    }
    norm_out = register_module("norm_out", torch::nn::GroupNorm(groups_for(ch), ch));
    conv_out = register_module("conv_out", conv3(ch, 3));
    {
        torch::NoGradGuard g;
        conv_out->weight.zero_();
        conv_out->bias.zero_();
    }

    conditioning::ConditionerOptions copts;
    copts.context_dim = cfg.context_dim;
    copts.encoder.image_size = cfg.reference_size;
    conditioner = register_module("conditioner", conditioning::Conditioner(copts));
    control = register_module("control", ControlBranch(cfg));
}

torch::Tensor DenoiserImpl::time_embedding(const torch::Tensor& t) {
    const int64_t half = cfg_.base_channels / 2;
    const auto freqs =
        torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / static_cast<double>(half));
    const auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
    auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
    if (emb.size(1) < cfg_.base_channels) emb = F::pad(emb, F::PadFuncOptions({0, 1}));
    return time_mlp->forward(emb);
}

conditioning::ConditioningBundle DenoiserImpl::condition(const torch::Tensor& references, const torch::Tensor& types) {
    return conditioner(references, types);
}

torch::Tensor DenoiserImpl::forward(torch::Tensor z_t, torch::Tensor t, torch::Tensor control_in,
                                    const conditioning::ConditioningBundle& bundle) {
    const int64_t S = cfg_.image_size;
    if (z_t.dim() != 4 || z_t.size(1) != 3 || z_t.size(2) != S || z_t.size(3) != S)
        throw Error(ErrorCode::ShapeMismatch, "denoiser expects z_t of shape [B, 3, S, S]");
    if (t.dim() != 1 || t.size(0) != z_t.size(0)) throw Error(ErrorCode::ShapeMismatch, "one timestep per sample");
    const bool use_type = cfg_.use_type_embedding, use_ref = cfg_.use_ref_features;
    if ((use_type && !bundle.type_token.defined()) || (use_ref && !bundle.ref_tokens.defined()))
        throw Error(ErrorCode::InvalidArgument, "the enabled conditioning streams need a bundle");
    auto check_ctx = [&](const torch::Tensor& c) {
        if (c.defined() && c.size(0) != z_t.size(0))
            throw Error(ErrorCode::ShapeMismatch, "conditioning batch differs from z_t");
    };
    if (use_type) check_ctx(bundle.type_token);
    if (use_ref) check_ctx(bundle.ref_tokens);

    const auto temb = time_embedding(t);
    std::vector<torch::Tensor> residuals;
    if (control_in.defined()) {
        if (control_in.dim() != 4 || control_in.size(0) != z_t.size(0) || control_in.size(1) != 5 ||
            control_in.size(2) != S || control_in.size(3) != S)
            throw Error(ErrorCode::ShapeMismatch, "control input must be [B, 5, S, S]");
        auto c = torch::cat({control_in.slice(1, 0, 3) * 2.0 - 1.0, control_in.slice(1, 3, 4),
                             cfg_.use_box_mask ? control_in.slice(1, 4, 5) : torch::zeros_like(control_in.slice(1, 4, 5))},
                            1);
        residuals = control(z_t, c, temb);
    }
    auto with_control = [&](torch::Tensor h, std::size_t i) { return residuals.empty() ? h : h + residuals[i]; };

    std::vector<torch::Tensor> skips;
    auto h = conv_in(z_t);
    skips.push_back(h);
    for (auto& lv : down_levels_) {
        h = lv.res(h, temb);
        if (lv.attn) h = lv.attn(h, bundle, use_type, use_ref);
        skips.push_back(h);
        if (lv.down) {
            h = lv.down(h);
            skips.push_back(h);
        }
    }
    for (std::size_t i = 0; i < skips.size(); ++i) skips[i] = with_control(skips[i], i);

    h = mid1(h, temb);
    if (mid_attn) h = mid_attn(h, bundle, use_type, use_ref);
    h = mid2(h, temb);
    h = with_control(h, skips.size());

    for (auto& b : up_blocks_) {
        h = b.res(torch::cat({h, skips.back()}, 1), temb);
        skips.pop_back();
        if (b.attn) h = b.attn(h, bundle, use_type, use_ref);
        if (b.up) h = b.up(F::interpolate(h, F::InterpolateFuncOptions()
                                                 .scale_factor(std::vector<double>{2.0, 2.0})
                                                 .mode(torch::kNearest)));
    }
    return conv_out(torch::silu(norm_out(h)));
}

torch::Tensor make_control(const torch::Tensor& composite, const torch::Tensor& fg_mask, const torch::Tensor& box_mask) {
    if (composite.dim() != 4 || composite.size(1) != 3 || fg_mask.dim() != 4 || fg_mask.size(1) != 1 ||
        box_mask.dim() != 4 || box_mask.size(1) != 1 || composite.size(0) != fg_mask.size(0) ||
        composite.size(0) != box_mask.size(0) || composite.size(2) != fg_mask.size(2) ||
        composite.size(3) != fg_mask.size(3) || composite.size(2) != box_mask.size(2) ||
        composite.size(3) != box_mask.size(3))
        throw Error(ErrorCode::ShapeMismatch, "control parts must be [B, 3, H, W], [B, 1, H, W], [B, 1, H, W]");
    return torch::cat({composite, fg_mask.to(composite.dtype()), box_mask.to(composite.dtype())}, 1);
}

torch::Tensor diffusion_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat) {
    if (!eps.sizes().equals(eps_hat.sizes())) throw Error(ErrorCode::ShapeMismatch, "diffusion_loss: shapes differ");
    return (eps_hat - eps).pow(2).mean();
}

// ---------------------------------------------------------------------------
// Model container

DiffusionModel::DiffusionModel(const DenoiserConfig& cfg)
    : config(cfg), schedule(NoiseSchedule::linear(cfg.T)), net(Denoiser(cfg)) {}

checkpoint::Checkpoint DiffusionModel::to_checkpoint(const nlohmann::json& metadata) const {
    checkpoint::Checkpoint c;
    c.kind = "diffusion";
    c.config = config.to_json();
    c.metadata = metadata;
    c.tensors = checkpoint::state_of(*net);
    return c;
}

DiffusionModel DiffusionModel::from_checkpoint(const checkpoint::Checkpoint& ckpt) {
    if (ckpt.kind != "diffusion") throw Error(ErrorCode::CorruptData, "not a diffusion checkpoint: " + ckpt.kind);
    DiffusionModel m(DenoiserConfig::from_json(ckpt.config));
    checkpoint::load_state(*m.net, ckpt.tensors);
    m.net->eval();
    return m;
}

// ---------------------------------------------------------------------------
// Data preparation

namespace {

PreparedSample prepare_one(const Image& composite, const Mask& fg_mask, dataset::ReflectionType type, const Mask& box_mask,
                           int64_t reference_size) {
    PreparedSample s;
    s.composite = to_tensor(composite);
    s.fg_mask = to_tensor(fg_mask);
    s.box_mask = to_tensor(box_mask);
    s.type = static_cast<int64_t>(type);
    s.reference = to_tensor(
        conditioning::extract_reference(composite, fg_mask, type, static_cast<int>(reference_size)).pixels);
    return s;
}

struct Batch {
    torch::Tensor composite, fg_mask, box_mask, reference, types, target;
};

Batch gather(const std::vector<PreparedSample>& samples, const std::vector<std::size_t>& idx,
             const std::vector<bool>& flip) {
    std::vector<torch::Tensor> comp, fg, box, ref, tgt;
    std::vector<int64_t> types;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& s = samples[idx[k]];
        auto f = [&](const torch::Tensor& x) { return flip.empty() || !flip[k] ? x : x.flip({2}); };
        comp.push_back(f(s.composite));
        fg.push_back(f(s.fg_mask));
        box.push_back(f(s.box_mask));
        ref.push_back(f(s.reference));
        if (s.target.defined()) tgt.push_back(f(s.target));
        types.push_back(s.type);
    }
    Batch b;
    b.composite = torch::stack(comp);
    b.fg_mask = torch::stack(fg);
    b.box_mask = torch::stack(box);
    b.reference = torch::stack(ref);
    b.types = torch::tensor(types, torch::kInt64);
    if (!tgt.empty()) b.target = torch::stack(tgt);
    return b;
}

conditioning::ConditioningBundle bundle_for(Denoiser& net, const Batch& b) {
    const auto& cfg = net->config();
    if (!cfg.use_ref_features && !cfg.use_type_embedding) return {};
    return net->condition(b.reference, b.types);
}

}  // namespace

std::vector<PreparedSample> prepare_samples(const std::vector<dataset::DataTuple>& tuples, aux_encoder::AuxModel* aux,
                                            bool use_gt_boxes, int64_t reference_size) {
    std::vector<PreparedSample> out;
    out.reserve(tuples.size());
    if (use_gt_boxes) {
        for (const auto& t : tuples) {
            auto s = prepare_one(t.composite, t.fg_mask, t.type_label,
                                 geometry::rasterize_box(t.box_r, t.composite.height, t.composite.width),
                                 reference_size);
            s.target = to_tensor(t.target);
            out.push_back(std::move(s));
        }
        return out;
    }
    if (!aux) throw Error(ErrorCode::InvalidArgument, "an aux model is required unless ground-truth boxes are used");
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < tuples.size(); start += kChunk) {
        std::vector<Image> imgs;
        std::vector<Mask> masks;
        for (std::size_t i = start; i < std::min(tuples.size(), start + kChunk); ++i) {
            imgs.push_back(tuples[i].composite);
            masks.push_back(tuples[i].fg_mask);
        }
        const auto preds = aux_encoder::predict_reflection_boxes(*aux, imgs, masks);
        for (std::size_t k = 0; k < preds.size(); ++k) {
            auto s = prepare_one(imgs[k], masks[k], preds[k].type, preds[k].box_mask, reference_size);
            s.target = to_tensor(tuples[start + k].target);
            out.push_back(std::move(s));
        }
    }
    return out;
}

PreparedSample prepare_inference(const Image& composite, const Mask& fg_mask, aux_encoder::AuxModel& aux,
                                 int64_t reference_size) {
    const auto p = aux_encoder::predict_reflection_box(aux, composite, fg_mask);
    return prepare_one(composite, fg_mask, p.type, p.box_mask, reference_size);
}

// ---------------------------------------------------------------------------
// Training

DiffusionTrainResult train_diffusion(const std::vector<dataset::DataTuple>& train, aux_encoder::AuxModel* aux,
                                     const DenoiserConfig& model_cfg, const DiffusionTrainConfig& cfg,
                                     const DiffusionProgress& progress) {
    model_cfg.validate();
    cfg.validate();
    if (train.empty()) throw Error(ErrorCode::InvalidArgument, "train_diffusion needs at least one tuple");
    for (const auto& t : train)
        if (t.composite.height != model_cfg.image_size || t.composite.width != model_cfg.image_size)
            throw Error(ErrorCode::ShapeMismatch, "training images do not match the configured image_size");

    const auto samples = prepare_samples(train, aux, cfg.use_gt_boxes, model_cfg.reference_size);

    torch::manual_seed(cfg.seed);
    std::mt19937_64 rng(cfg.seed);
    DiffusionModel model(model_cfg);
    model.net->train();
    auto params = model.net->parameters();
    std::vector<torch::Tensor> ema;
    if (cfg.ema_decay > 0.0)
        for (const auto& p : params) ema.push_back(p.detach().clone());

    torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.learning_rate));
    std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
    std::bernoulli_distribution coin(0.5);

    DiffusionTrainResult result;
    double window = 0.0;
    int window_n = 0;
    for (int step = 1; step <= cfg.steps; ++step) {
        const double progress_frac = static_cast<double>(step - 1) / std::max(1, cfg.steps);
        double lr = cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress_frac)));
        if (step <= cfg.warmup_steps) lr = cfg.learning_rate * step / cfg.warmup_steps;
        for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);

        std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch_size));
        std::vector<bool> flip(idx.size(), false);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            idx[k] = pick(rng);
            if (cfg.augment) flip[k] = coin(rng);
        }
        const Batch b = gather(samples, idx, flip);
        const auto x0 = b.target * 2.0 - 1.0;
        const auto t = torch::randint(0, model_cfg.T, {cfg.batch_size}, torch::kInt64);
        const auto eps = torch::randn_like(x0);
        const auto z = add_noise(x0, t, eps, model.schedule);

        const auto bundle = bundle_for(model.net, b);
        const auto eps_hat = model.net->forward(z, t, make_control(b.composite, b.fg_mask, b.box_mask), bundle);
        const auto loss = diffusion_loss(eps, eps_hat);
        const double lv = loss.item<double>();
        if (!std::isfinite(lv))
            throw Error(ErrorCode::Divergence, "non-finite diffusion loss at step " + std::to_string(step));
        if (step == 1) result.initial_loss = lv;

        opt.zero_grad();
        loss.backward();
        torch::nn::utils::clip_grad_norm_(params, cfg.grad_clip);
        opt.step();
        if (!ema.empty()) {
            torch::NoGradGuard g;
            // Short warm start so early checkpoints are not dominated by the initialization.
            const double d = std::min(cfg.ema_decay, (1.0 + step) / (10.0 + step));
            for (std::size_t i = 0; i < params.size(); ++i) ema[i].mul_(d).add_(params[i].detach(), 1.0 - d);
        }

        window += lv;
        ++window_n;
        if (step % cfg.log_every == 0 || step == cfg.steps) {
            LossPoint pt{step, window / window_n};
            result.loss_curve.push_back(pt);
            if (progress) progress(pt);
            window = 0.0;
            window_n = 0;
        }
    }

    if (!ema.empty() && cfg.steps > 0) {
        torch::NoGradGuard g;
        for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(ema[i]);
    }
    model.net->eval();

    nlohmann::json curve = nlohmann::json::array();
    for (const auto& p : result.loss_curve) curve.push_back({{"step", p.step}, {"loss", p.loss}});
    result.checkpoint = model.to_checkpoint({{"train", cfg.to_json()},
                                             {"steps_trained", cfg.steps},
                                             {"n_train", train.size()},
                                             {"initial_loss", result.initial_loss},
                                             {"loss_curve", curve}});
    result.checkpoint.rng_state = rng_state(rng);
    return result;
}

// ---------------------------------------------------------------------------
// Inference

int start_timestep(double strength, int T) {
    if (!(strength > 0.0 && strength <= 1.0)) throw Error(ErrorCode::InvalidArgument, "strength must lie in (0, 1]");
    return static_cast<int>(std::lround(strength * (T - 1)));
}

std::vector<int> sampler_timesteps(int t_start, int steps) {
    if (t_start < 0) throw Error(ErrorCode::InvalidArgument, "t_start must be non-negative");
    if (steps < 1) throw Error(ErrorCode::InvalidArgument, "the sampler needs at least one step");
    // Spacing of at least one keeps the rounded timesteps distinct.
    const int n = std::max(1, std::min(steps, t_start));
    std::vector<int> ts;
    for (int k = 0; k < n; ++k)
        ts.push_back(static_cast<int>(std::lround(static_cast<double>(t_start) * (n - k) / n)));
    return ts;
}

std::vector<Image> infer_prepared(DiffusionModel& model, const std::vector<PreparedSample>& samples,
                                  const std::vector<std::uint64_t>& seeds, double strength, int steps) {
    if (seeds.size() != samples.size()) throw Error(ErrorCode::InvalidArgument, "one seed per sample expected");
    const int t_start = start_timestep(strength, model.config.T);
    const auto ts = sampler_timesteps(t_start, steps);
    const auto& ab = model.schedule.alpha_bar;
    torch::NoGradGuard ng;
    model.net->eval();

    std::vector<Image> out;
    constexpr std::size_t kChunk = 16;
    for (std::size_t start = 0; start < samples.size(); start += kChunk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(samples.size(), start + kChunk); ++i) idx.push_back(i);
        const Batch b = gather(samples, idx, {});
        const auto S = b.composite.size(2);
        std::vector<torch::Tensor> noise;
        for (auto i : idx) {
            auto gen = at::make_generator<at::CPUGeneratorImpl>(seeds[i]);
            noise.push_back(torch::randn({3, S, b.composite.size(3)}, gen, torch::kFloat32));
        }
        auto z = add_noise(b.composite * 2.0 - 1.0, t_start, torch::stack(noise), model.schedule);
        const auto control = make_control(b.composite, b.fg_mask, b.box_mask);
        const auto bundle = bundle_for(model.net, b);
        const auto B = static_cast<int64_t>(idx.size());
        torch::Tensor x0;
        for (std::size_t k = 0; k < ts.size(); ++k) {
            const int t = ts[k];
            const double a_t = ab[static_cast<std::size_t>(t)];
            const double a_prev = k + 1 < ts.size() ? ab[static_cast<std::size_t>(ts[k + 1])] : 1.0;
            const auto eps_hat = model.net->forward(z, torch::full({B}, t, torch::kInt64), control, bundle);
            x0 = ((z - std::sqrt(1.0 - a_t) * eps_hat) / std::sqrt(a_t)).clamp(-1.0, 1.0);
            const auto eps_dir = (z - std::sqrt(a_t) * x0) / std::sqrt(1.0 - a_t);
            z = std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * eps_dir;
        }
        const auto img = ((x0 + 1.0) * 0.5).clamp(0.0, 1.0);
        for (int64_t i = 0; i < B; ++i) out.push_back(to_image(img[i]));
    }
    return out;
}

Image infer(DiffusionModel& model, aux_encoder::AuxModel& aux, const Image& composite, const Mask& fg_mask,
            double strength, int steps, std::uint64_t seed) {
    const auto s = prepare_inference(composite, fg_mask, aux, model.config.reference_size);
    return infer_prepared(model, {s}, {seed}, strength, steps).front();
}

}  // namespace reflgen::diffusion
