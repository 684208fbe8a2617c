// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include "reflgen/conditioning.h"

#include <cmath>

#include "reflgen/errors.h"

namespace reflgen::conditioning {

ReferenceImage extract_reference(const Image& composite, const Mask& fg_mask, ReflectionType type, int size) {
    if (fg_mask.height != composite.height || fg_mask.width != composite.width)
        throw Error(ErrorCode::ShapeMismatch, "extract_reference: mask and image sizes differ");
    if (size < 1) throw Error(ErrorCode::InvalidArgument, "extract_reference: size must be positive");
    const PixelRect r = mask_bounds(fg_mask);
    Image cut = crop(composite, r);
    for (int i = 0; i < cut.height; ++i)
        for (int j = 0; j < cut.width; ++j)
            if (!fg_mask.at(r.row0 + i, r.col0 + j))
                for (int c = 0; c < cut.channels; ++c) cut.at(i, j, c) = 0.0f;
    ReferenceImage ref;
    ref.pixels = resize_bilinear(cut, size, size);
    ref.flipped = type == ReflectionType::Vertical;
    if (ref.flipped) ref.pixels = flip_vertical(ref.pixels);
    return ref;
}

MixerBlockImpl::MixerBlockImpl(int64_t dim, int64_t heads) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", torch::nn::MultiheadAttention(torch::nn::MultiheadAttentionOptions(dim, heads)));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    mlp = register_module("mlp", torch::nn::Sequential(torch::nn::Linear(dim, 2 * dim), torch::nn::GELU(),
                                                       torch::nn::Linear(2 * dim, dim)));
}

torch::Tensor MixerBlockImpl::forward(torch::Tensor x) {
    // nn::MultiheadAttention is sequence-first.
    auto h = norm1(x).transpose(0, 1);
    x = x + std::get<0>(attn(h, h, h)).transpose(0, 1);
    return x + mlp->forward(norm2(x));
}

ReferenceEncoderImpl::ReferenceEncoderImpl(const ReferenceEncoderOptions& opts) : opts_(opts) {
    if (opts.image_size % opts.patch != 0)
        throw Error(ErrorCode::InvalidArgument, "reference image size must be a multiple of the patch size");
    patchify = register_module(
        "patchify", torch::nn::Conv2d(torch::nn::Conv2dOptions(3, opts.dim, opts.patch).stride(opts.patch)));
    pos_embed = register_parameter("pos_embed", torch::randn({1, opts.num_tokens() - 1, opts.dim}) * 0.02);
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < opts.blocks; ++i) blocks->push_back(MixerBlock(opts.dim, opts.heads));
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({opts.dim})));
}

torch::Tensor ReferenceEncoderImpl::forward(torch::Tensor images) {
    if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != opts_.image_size ||
        images.size(3) != opts_.image_size)
        throw Error(ErrorCode::ShapeMismatch, "reference encoder expects [B, 3, S, S]");
    auto x = patchify(images * 2.0 - 1.0).flatten(2).transpose(1, 2) + pos_embed;
    for (const auto& b : *blocks) x = b->as<MixerBlock>()->forward(x);
    x = norm(x);
    return torch::cat({x, x.mean(1, true)}, 1);
}

AdapterImpl::AdapterImpl(int64_t in_dim, int64_t out_dim) {
    proj = register_module("proj", torch::nn::Linear(in_dim, out_dim));
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({out_dim}).eps(1e-5)));
}

torch::Tensor AdapterImpl::forward(torch::Tensor tokens) { return norm(proj(tokens)); }

ConditionerImpl::ConditionerImpl(const ConditionerOptions& opts) : opts_(opts) {
    encoder = register_module("encoder", ReferenceEncoder(opts.encoder));
    type_embeddings = register_module("type_embeddings", torch::nn::Embedding(2, opts.encoder.dim));
    adapter = register_module("adapter", Adapter(opts.encoder.dim, opts.context_dim));
}

ConditioningBundle ConditionerImpl::forward(torch::Tensor references, torch::Tensor types) {
    if (types.dim() != 1 || types.size(0) != references.size(0))
        throw Error(ErrorCode::ShapeMismatch, "one type label per reference image expected");
    ConditioningBundle b;
    b.types = types;
    b.ref_tokens = adapter(encoder(references));
    // Hard selection: only the chosen embedding enters the graph.
    b.type_token = adapter(type_embeddings(types).unsqueeze(1));
    return b;
}

namespace {

// [B, T, H * dh] -> [B, H, T, dh]
torch::Tensor split_heads(const torch::Tensor& x, int64_t heads) {
    return x.view({x.size(0), x.size(1), heads, x.size(2) / heads}).transpose(1, 2);
}

torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v, int64_t heads,
                     torch::Tensor* probs) {
    const auto qh = split_heads(q, heads), kh = split_heads(k, heads), vh = split_heads(v, heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(qh.size(-1)));
    const auto p = torch::softmax(torch::matmul(qh, kh.transpose(-1, -2)) * scale, -1);
    if (probs) *probs = p;
    const auto o = torch::matmul(p, vh).transpose(1, 2);
    return o.reshape({o.size(0), o.size(1), -1});
}

}  // namespace

torch::Tensor decoupled_cross_attention(const torch::Tensor& f_q, const torch::Tensor& type_token,
                                        const torch::Tensor& ref_tokens, const DecoupledWeights& w, int64_t heads,
                                        AttentionProbs* probs) {
    if (f_q.dim() != 3 || w.w_q.dim() != 2 || f_q.size(2) != w.w_q.size(0))
        throw Error(ErrorCode::ShapeMismatch, "query tokens do not match W_q");
    const int64_t d = w.w_q.size(1), c_out = w.w_v.size(1);
    if (d % heads != 0 || c_out % heads != 0)
        throw Error(ErrorCode::ShapeMismatch, "projection widths must divide evenly into heads");
    const auto q = torch::matmul(f_q, w.w_q);
    torch::Tensor out = torch::zeros({f_q.size(0), f_q.size(1), c_out}, f_q.options());
    auto stream = [&](const torch::Tensor& ctx, const torch::Tensor& wk, const torch::Tensor& wv, torch::Tensor* p) {
        if (ctx.dim() != 3 || ctx.size(0) != f_q.size(0) || ctx.size(2) != wk.size(0) || wk.size(1) != d ||
            wv.size(0) != ctx.size(2) || wv.size(1) != c_out)
            throw Error(ErrorCode::ShapeMismatch, "context tokens do not match their K/V projections");
        return attend(q, torch::matmul(ctx, wk), torch::matmul(ctx, wv), heads, p);
    };
    if (type_token.defined()) out = out + stream(type_token, w.w_k, w.w_v, probs ? &probs->type_stream : nullptr);
    if (ref_tokens.defined()) out = out + stream(ref_tokens, w.w_k2, w.w_v2, probs ? &probs->ref_stream : nullptr);
    return out;
}

DecoupledCrossAttentionImpl::DecoupledCrossAttentionImpl(int64_t query_dim, int64_t context_dim, int64_t heads)
    : heads_(heads) {
    auto lin = [](int64_t i, int64_t o) { return torch::nn::Linear(torch::nn::LinearOptions(i, o).bias(false)); };
    to_q = register_module("to_q", lin(query_dim, context_dim));
    to_k = register_module("to_k", lin(context_dim, context_dim));
    to_v = register_module("to_v", lin(context_dim, query_dim));
    to_k2 = register_module("to_k2", lin(context_dim, context_dim));
    to_v2 = register_module("to_v2", lin(context_dim, query_dim));
}

DecoupledWeights DecoupledCrossAttentionImpl::weights() const {
    // nn::Linear stores [out, in]; the functional form multiplies on the right.
    return {to_q->weight.t(), to_k->weight.t(), to_v->weight.t(), to_k2->weight.t(), to_v2->weight.t()};
}

torch::Tensor DecoupledCrossAttentionImpl::forward(torch::Tensor f_q, const ConditioningBundle& bundle, bool use_type,
                                                   bool use_ref) {
    if ((use_type && !bundle.type_token.defined()) || (use_ref && !bundle.ref_tokens.defined()))
        throw Error(ErrorCode::InvalidArgument, "conditioning bundle lacks a stream the flags require");
    return decoupled_cross_attention(f_q, use_type ? bundle.type_token : torch::Tensor(),
                                     use_ref ? bundle.ref_tokens : torch::Tensor(), weights(), heads_);
}

}  // namespace reflgen::conditioning
