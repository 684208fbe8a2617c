// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include "reflgen/aux_encoder.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "reflgen/errors.h"
#include "reflgen/tensor_util.h"

namespace reflgen::aux_encoder {

namespace F = torch::nn::functional;

namespace {

constexpr double kPi = std::numbers::pi;
// Guard for exp() in the batched decode during training; far beyond any real target.
constexpr double kLogScaleClamp = 8.0;

int64_t groups_for(int64_t ch) { return ch % 8 == 0 ? 8 : (ch % 4 == 0 ? 4 : 1); }

torch::nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).bias(false));
}

torch::Tensor activate(const torch::Tensor& x, bool silu) {
    return silu ? torch::silu(x) : torch::relu(x);
}

}  // namespace

void AuxConfig::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidArgument, "aux config: " + m); };
    if (backbone != "residual" && backbone != "resnet18") fail("backbone must be 'residual' or 'resnet18'");
    if (backbone_width < 1 || depth < 1) fail("backbone_width and depth must be positive");
    if (activation != "relu" && activation != "silu") fail("activation must be 'relu' or 'silu'");
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (epochs < 0) fail("epochs must be >= 0");
    if (batch_size < 1) fail("batch_size must be positive");
    if (height < 16 || width < 16) fail("input must be at least 16x16");
}

nlohmann::json AuxConfig::to_json() const {
    return {{"backbone", backbone}, {"backbone_width", backbone_width}, {"depth", depth}, {"activation", activation},
            {"learning_rate", learning_rate}, {"epochs", epochs}, {"batch_size", batch_size},
            {"seed", seed}, {"augment", augment}, {"height", height}, {"width", width}};
}

AuxConfig AuxConfig::from_json(const nlohmann::json& j) {
    AuxConfig c;
    try {
        c.backbone = j.at("backbone").get<std::string>();
        c.backbone_width = j.at("backbone_width").get<int64_t>();
        c.activation = j.value("activation", std::string("relu"));
        c.depth = j.at("depth").get<int64_t>();
        c.learning_rate = j.at("learning_rate").get<double>();
        c.epochs = j.at("epochs").get<int>();
        c.batch_size = j.at("batch_size").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.augment = j.at("augment").get<bool>();
        c.height = j.at("height").get<int64_t>();
        c.width = j.at("width").get<int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::CorruptData, std::string("aux config: ") + e.what());
    }
    return c;
}

ReflectionType AuxPrediction::type() const {
    return type_logits[1] > type_logits[0] ? ReflectionType::Others : ReflectionType::Vertical;
}

BasicBlockImpl::BasicBlockImpl(int64_t in, int64_t out, int64_t stride, bool silu) : silu_(silu) {
    conv1 = register_module("conv1", conv(in, out, 3, stride));
    norm1 = register_module("norm1", torch::nn::GroupNorm(groups_for(out), out));
    conv2 = register_module("conv2", conv(out, out, 3, 1));
    norm2 = register_module("norm2", torch::nn::GroupNorm(groups_for(out), out));
    if (stride != 1 || in != out) {
        shortcut = register_module("shortcut", conv(in, out, 1, stride));
        norm_sc = register_module("norm_sc", torch::nn::GroupNorm(groups_for(out), out));
    }
}

torch::Tensor BasicBlockImpl::act(const torch::Tensor& x) const { return activate(x, silu_); }

torch::Tensor BasicBlockImpl::forward(torch::Tensor x) {
    auto h = act(norm1(conv1(x)));
    h = norm2(conv2(h));
    return act(h + (shortcut ? norm_sc(shortcut(x)) : x));
}

AuxNetImpl::AuxNetImpl(const AuxConfig& cfg) {
    cfg.validate();
    const bool r18 = cfg.backbone == "resnet18";
    const int64_t w = r18 ? 64 : cfg.backbone_width;
    maxpool_ = r18;
    silu_ = cfg.activation == "silu";
    // 4 input channels plus two coordinate maps.
    stem = register_module("stem", conv(6, w, r18 ? 7 : 3, 2));
    stem_norm = register_module("stem_norm", torch::nn::GroupNorm(groups_for(w), w));
    stages = register_module("stages", torch::nn::Sequential());
    int64_t ch = w;
    for (int s = 0; s < 4; ++s) {
        const int64_t out = w << s;
        for (int64_t b = 0; b < cfg.depth; ++b) {
            stages->push_back(BasicBlock(ch, out, (b == 0 && s > 0) ? 2 : 1, silu_));
            ch = out;
        }
    }
    torch::NoGradGuard g;
    const auto probe = forward_features_probe(cfg.height, cfg.width);
    head = register_module("head", torch::nn::Linear(probe, 7));
    head->weight.normal_(0.0, 1e-3);
    head->bias.zero_();
}

int64_t AuxNetImpl::forward_features_probe(int64_t height, int64_t width) {
    auto x = torch::zeros({1, 6, height, width});
    x = activate(stem_norm(stem(x)), silu_);
    if (maxpool_) x = F::max_pool2d(x, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
    return stages->forward(x).numel();
}

torch::Tensor AuxNetImpl::forward(torch::Tensor x) {
    if (x.dim() != 4 || x.size(1) != 4) throw Error(ErrorCode::ShapeMismatch, "aux input must be [B, 4, H, W]");
    const auto B = x.size(0), H = x.size(2), W = x.size(3);
    auto opts = x.options();
    const auto yy = torch::linspace(-1.0, 1.0, H, opts).view({1, 1, H, 1}).expand({B, 1, H, W});
    const auto xx = torch::linspace(-1.0, 1.0, W, opts).view({1, 1, 1, W}).expand({B, 1, H, W});
    auto h = activate(stem_norm(stem(torch::cat({x, yy, xx}, 1))), silu_);
    if (maxpool_) h = F::max_pool2d(h, F::MaxPool2dFuncOptions(3).stride(2).padding(1));
    h = stages->forward(h).flatten(1);
    if (h.size(1) != head->weight.size(1))
        throw Error(ErrorCode::ShapeMismatch, "aux input size differs from the configured height/width");
    return head(h);
}

torch::Tensor make_input(const torch::Tensor& composite, const torch::Tensor& fg_mask) {
    if (composite.dim() != 4 || fg_mask.dim() != 4 || composite.size(1) != 3 || fg_mask.size(1) != 1 ||
        composite.size(0) != fg_mask.size(0) || composite.size(2) != fg_mask.size(2) ||
        composite.size(3) != fg_mask.size(3))
        throw Error(ErrorCode::ShapeMismatch, "composite [B,3,H,W] and mask [B,1,H,W] must agree");
    return torch::cat({composite * 2.0 - 1.0, fg_mask}, 1);
}

AuxModel::AuxModel(const AuxConfig& cfg) : config(cfg), net(cfg) {}

checkpoint::Checkpoint AuxModel::to_checkpoint(const nlohmann::json& metadata) const {
    checkpoint::Checkpoint c;
    c.kind = "aux";
    c.config = config.to_json();
    c.metadata = metadata;
    c.tensors = checkpoint::state_of(*net);
    return c;
}

AuxModel AuxModel::from_checkpoint(const checkpoint::Checkpoint& ckpt) {
    if (ckpt.kind != "aux") throw Error(ErrorCode::CorruptData, "not an aux checkpoint: " + ckpt.kind);
    AuxModel m(AuxConfig::from_json(ckpt.config));
    checkpoint::load_state(*m.net, ckpt.tensors);
    m.net->eval();
    return m;
}

namespace {

AuxPrediction row_to_prediction(const torch::Tensor& row) {
    const auto r = row.to(torch::kFloat64).contiguous();
    const double* p = r.data_ptr<double>();
    AuxPrediction out;
    out.type_logits = {p[0], p[1]};
    out.coeffs = {p[2], p[3], p[4], p[5], p[6]};
    return out;
}

torch::Tensor forward_batch(AuxModel& model, const torch::Tensor& input) {
    torch::NoGradGuard g;
    model.net->eval();
    std::vector<torch::Tensor> outs;
    for (int64_t s = 0; s < input.size(0); s += 128)
        outs.push_back(model.net(input.slice(0, s, std::min<int64_t>(s + 128, input.size(0)))));
    return torch::cat(outs);
}

void check_pair(const AuxModel& model, const Image& composite, const Mask& fg_mask) {
    if (composite.channels != 3 || composite.height != fg_mask.height || composite.width != fg_mask.width)
        throw Error(ErrorCode::ShapeMismatch, "composite and foreground mask sizes differ");
    if (composite.height != model.config.height || composite.width != model.config.width)
        throw Error(ErrorCode::ShapeMismatch, "image size " + std::to_string(composite.height) + "x" +
                                                  std::to_string(composite.width) + " does not match the aux model");
}

}  // namespace

AuxPrediction aux_forward(AuxModel& model, const Image& composite, const Mask& fg_mask) {
    check_pair(model, composite, fg_mask);
    const auto in = make_input(to_tensor(composite).unsqueeze(0), to_tensor(fg_mask).unsqueeze(0));
    return row_to_prediction(forward_batch(model, in)[0]);
}

AuxLoss aux_loss(const AuxPrediction& pred, ReflectionType gt_type, const RotatedBox& b_o, const RotatedBox& b_r_gt) {
    const double a = pred.type_logits[0], b = pred.type_logits[1];
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    AuxLoss out;
    out.l_cls = lse - (gt_type == ReflectionType::Vertical ? a : b);
    out.l_rbbox = geometry::kfiou_loss(geometry::decode_regression(b_o, pred.coeffs), b_r_gt);
    out.l_en = out.l_cls + out.l_rbbox;
    return out;
}

torch::Tensor boxes_to_tensor(const std::vector<RotatedBox>& boxes) {
    auto t = torch::empty({static_cast<int64_t>(boxes.size()), 5}, torch::kFloat64);
    auto a = t.accessor<double, 2>();
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const auto& b = boxes[i];
        const auto k = static_cast<int64_t>(i);
        a[k][0] = b.cx;
        a[k][1] = b.cy;
        a[k][2] = b.w;
        a[k][3] = b.h;
        a[k][4] = b.theta;
    }
    return t;
}

torch::Tensor decode_regression_batch(const torch::Tensor& box_o, const torch::Tensor& coeffs) {
    if (box_o.sizes() != coeffs.sizes() || box_o.dim() != 2 || box_o.size(1) != 5)
        throw Error(ErrorCode::ShapeMismatch, "boxes and coefficients must both be [B, 5]");
    const auto w = box_o.select(1, 2), h = box_o.select(1, 3);
    return torch::stack({box_o.select(1, 0) + coeffs.select(1, 0) * w, box_o.select(1, 1) + coeffs.select(1, 1) * h,
                         w * torch::exp(coeffs.select(1, 2)), h * torch::exp(coeffs.select(1, 3)),
                         box_o.select(1, 4) + coeffs.select(1, 4) * (180.0 / kPi)},
                        1);
}

torch::Tensor kfiou_batch(const torch::Tensor& a, const torch::Tensor& b) {
    if (a.sizes() != b.sizes() || a.dim() != 2 || a.size(1) != 5)
        throw Error(ErrorCode::ShapeMismatch, "kfiou_batch expects two [B, 5] box tensors");
    struct Cov {
        torch::Tensor xx, xy, yy;
    };
    auto cov = [](const torch::Tensor& box) {
        const auto t = box.select(1, 4) * (kPi / 180.0);
        const auto c = torch::cos(t), s = torch::sin(t);
        const auto p = box.select(1, 2).square() / 4.0, q = box.select(1, 3).square() / 4.0;
        return Cov{p * c * c + q * s * s, (q - p) * s * c, p * s * s + q * c * c};
    };
    const Cov ca = cov(a), cb = cov(b);
    const auto sxx = ca.xx + cb.xx, sxy = ca.xy + cb.xy, syy = ca.yy + cb.yy;
    const auto det = sxx * syy - sxy * sxy;
    const auto dx = a.select(1, 0) - b.select(1, 0), dy = a.select(1, 1) - b.select(1, 1);
    const auto quad = (syy * dx * dx - 2.0 * sxy * dx * dy + sxx * dy * dy) / det;
    const auto va = a.select(1, 2) * a.select(1, 3) / 4.0, vb = b.select(1, 2) * b.select(1, 3) / 4.0;
    const auto vf = torch::exp(-0.5 * quad) * va * vb / torch::sqrt(det);
    return vf / (va + vb - vf);
}

AuxBatchLoss aux_loss_batch(const torch::Tensor& outputs, const torch::Tensor& types, const torch::Tensor& box_o,
                            const torch::Tensor& box_r) {
    if (outputs.dim() != 2 || outputs.size(1) != 7 || types.size(0) != outputs.size(0))
        throw Error(ErrorCode::ShapeMismatch, "aux outputs must be [B, 7] with one label per row");
    auto coeffs = outputs.slice(1, 2, 7).to(torch::kFloat64);
    coeffs = torch::cat({coeffs.slice(1, 0, 2), coeffs.slice(1, 2, 4).clamp(-kLogScaleClamp, kLogScaleClamp),
                         coeffs.slice(1, 4, 5)},
                        1);
    const auto pred = decode_regression_batch(box_o.to(torch::kFloat64), coeffs);
    const auto kf = kfiou_batch(pred, box_r.to(torch::kFloat64));
    AuxBatchLoss out;
    out.l_cls = F::cross_entropy(outputs.slice(1, 0, 2).to(torch::kFloat64), types);
    out.l_rbbox = torch::exp(1.0 - kf).mean();
    out.l_en = out.l_cls + out.l_rbbox;
    out.kfiou = kf.detach();
    return out;
}

namespace {

struct TensorSet {
    torch::Tensor input;  // [N, 4, H, W]
    torch::Tensor types;  // [N]
    torch::Tensor box_o;  // [N, 5] double
    torch::Tensor box_r;
};

TensorSet to_tensors(const std::vector<dataset::DataTuple>& tuples) {
    if (tuples.empty()) return {torch::empty({0, 4, 0, 0}), torch::empty({0}, torch::kInt64), {}, {}};
    std::vector<Image> imgs;
    std::vector<Mask> masks;
    std::vector<RotatedBox> bo, br;
    std::vector<int64_t> types;
    for (const auto& t : tuples) {
        imgs.push_back(t.composite);
        masks.push_back(t.fg_mask);
        bo.push_back(t.box_o);
        br.push_back(t.box_r);
        types.push_back(static_cast<int64_t>(t.type_label));
    }
    return {make_input(stack_images(imgs), stack_masks(masks)), torch::tensor(types, torch::kInt64),
            boxes_to_tensor(bo), boxes_to_tensor(br)};
}

AuxEvaluation evaluate_tensors(AuxModel& model, const TensorSet& data) {
    AuxEvaluation ev;
    ev.n = static_cast<std::size_t>(data.input.size(0));
    if (ev.n == 0) return ev;
    const auto out = forward_batch(model, data.input);
    const auto loss = aux_loss_batch(out, data.types, data.box_o, data.box_r);
    const auto pred_type = (out.select(1, 1) > out.select(1, 0)).to(torch::kInt64);
    ev.type_accuracy = (pred_type == data.types).to(torch::kFloat64).mean().item<double>();
    ev.mean_kfiou = loss.kfiou.mean().item<double>();
    ev.mean_loss = loss.l_en.item<double>();
    return ev;
}

std::string rng_state(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

}  // namespace

AuxEvaluation evaluate_aux(AuxModel& model, const std::vector<dataset::DataTuple>& tuples) {
    return evaluate_tensors(model, to_tensors(tuples));
}

AuxTrainResult train_aux(const std::vector<dataset::DataTuple>& train, const std::vector<dataset::DataTuple>& val,
                         const AuxConfig& cfg, const AuxProgress& progress) {
    cfg.validate();
    if (train.empty()) throw Error(ErrorCode::InvalidArgument, "train_aux needs at least one training tuple");
    torch::manual_seed(cfg.seed);
    std::mt19937_64 rng(cfg.seed);
    AuxModel model(cfg);
    const TensorSet tr = to_tensors(train);
    const TensorSet va = to_tensors(val);
    if (tr.input.size(2) != cfg.height || tr.input.size(3) != cfg.width)
        throw Error(ErrorCode::ShapeMismatch, "training images do not match the configured size");

    AuxTrainResult result;
    auto record = [&](int epoch, double loss) {
        AuxEpochMetrics m;
        m.epoch = epoch;
        m.train_loss = loss;
        m.train = evaluate_tensors(model, tr);
        m.val = evaluate_tensors(model, va);
        result.history.push_back(m);
        if (progress) progress(m);
    };
    record(0, std::nan(""));

    torch::optim::Adam opt(model.net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
    const int64_t n = tr.input.size(0);
    const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total = steps_per_epoch * cfg.epochs;
    int64_t step = 0;
    std::vector<int64_t> order(static_cast<std::size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    const double W1 = static_cast<double>(cfg.width - 1);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        model.net->train();
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (int64_t s = 0; s < n; s += cfg.batch_size) {
            const int64_t e = std::min<int64_t>(s + cfg.batch_size, n);
            const auto idx = torch::tensor(std::vector<int64_t>(order.begin() + s, order.begin() + e), torch::kInt64);
            auto x = tr.input.index_select(0, idx);
            auto bo = tr.box_o.index_select(0, idx);
            auto br = tr.box_r.index_select(0, idx);
            if (cfg.augment) {
                std::vector<uint8_t> flips(static_cast<std::size_t>(e - s));
                for (auto& f : flips) f = static_cast<uint8_t>(rng() & 1u);
                const auto fl = torch::tensor(std::vector<int64_t>(flips.begin(), flips.end())).to(torch::kBool);
                x = torch::where(fl.view({-1, 1, 1, 1}), x.flip({3}), x);
                // Mirror in x: cx -> W-1-cx, theta -> -theta; the regression target flips tx and ttheta.
                auto mirror = [&](const torch::Tensor& b) {
                    auto m = b.clone();
                    m.select(1, 0).copy_(W1 - b.select(1, 0));
                    m.select(1, 4).copy_(-b.select(1, 4));
                    return torch::where(fl.view({-1, 1}), m, b);
                };
                bo = mirror(bo);
                br = mirror(br);
            }
            const double lr = cfg.learning_rate * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(step) / total));
            for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
            const auto loss = aux_loss_batch(model.net(x), tr.types.index_select(0, idx), bo, br);
            const double lv = loss.l_en.item<double>();
            if (!std::isfinite(lv))
                throw Error(ErrorCode::Divergence, "aux loss became non-finite at epoch " + std::to_string(epoch) +
                                                       ", step " + std::to_string(step));
            opt.zero_grad();
            loss.l_en.backward();
            opt.step();
            loss_sum += lv * static_cast<double>(e - s);
            ++step;
        }
        record(epoch, loss_sum / static_cast<double>(n));
    }

    nlohmann::json hist = nlohmann::json::array();
    for (const auto& m : result.history)
        hist.push_back({{"epoch", m.epoch},
                        {"train_loss", std::isfinite(m.train_loss) ? nlohmann::json(m.train_loss) : nlohmann::json()},
                        {"train_type_accuracy", m.train.type_accuracy},
                        {"train_mean_kfiou", m.train.mean_kfiou},
                        {"val_type_accuracy", m.val.type_accuracy},
                        {"val_mean_kfiou", m.val.mean_kfiou}});
    result.checkpoint = model.to_checkpoint({{"epochs_trained", cfg.epochs}, {"history", hist},
                                             {"n_train", train.size()}, {"n_val", val.size()}});
    result.checkpoint.rng_state = rng_state(rng);
    return result;
}

BoxPrediction predict_reflection_box(AuxModel& model, const Image& composite, const Mask& fg_mask) {
    return predict_reflection_boxes(model, {composite}, {fg_mask}).front();
}

std::vector<BoxPrediction> predict_reflection_boxes(AuxModel& model, const std::vector<Image>& composites,
                                                    const std::vector<Mask>& fg_masks) {
    if (composites.size() != fg_masks.size())
        throw Error(ErrorCode::ShapeMismatch, "one foreground mask per composite expected");
    for (std::size_t i = 0; i < composites.size(); ++i) {
        check_pair(model, composites[i], fg_masks[i]);
        if (fg_masks[i].empty()) throw Error(ErrorCode::EmptyRegion, "foreground mask is empty");
    }
    if (composites.empty()) return {};
    const auto out = forward_batch(model, make_input(stack_images(composites), stack_masks(fg_masks)));
    std::vector<BoxPrediction> preds;
    preds.reserve(composites.size());
    for (std::size_t i = 0; i < composites.size(); ++i) {
        BoxPrediction p;
        p.raw = row_to_prediction(out[static_cast<int64_t>(i)]);
        p.type = p.raw.type();
        p.box_o = geometry::min_area_box(fg_masks[i]);
        p.box_r = geometry::decode_regression(p.box_o, p.raw.coeffs);
        p.box_mask = geometry::rasterize_box(p.box_r, composites[i].height, composites[i].width);
        preds.push_back(std::move(p));
    }
    return preds;
}

}  // namespace reflgen::aux_encoder
