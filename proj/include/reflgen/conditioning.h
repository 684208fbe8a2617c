// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include "reflgen/dataset.h"
#include "reflgen/image.h"

namespace reflgen::conditioning {

using dataset::ReflectionType;

struct ReferenceImage {
    Image pixels;  // S x S x 3
    bool flipped = false;
};

/// Tight crop of the foreground with the background zeroed, resized to
/// size x size, flipped upside down for vertical reflections.
ReferenceImage extract_reference(const Image& composite, const Mask& fg_mask, ReflectionType type, int size = 32);

struct ReferenceEncoderOptions {
    int64_t image_size = 32;
    int64_t patch = 8;
    int64_t dim = 64;
    int64_t blocks = 2;
    int64_t heads = 4;

    int64_t num_tokens() const { return (image_size / patch) * (image_size / patch) + 1; }
};

// Pre-norm transformer block.
class MixerBlockImpl : public torch::nn::Module {
public:
    MixerBlockImpl(int64_t dim, int64_t heads);
    torch::Tensor forward(torch::Tensor x);

private:
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::MultiheadAttention attn{nullptr};
    torch::nn::Sequential mlp{nullptr};
};
TORCH_MODULE(MixerBlock);

/// Patch tokens plus one mean-pooled token: [B, 3, S, S] in [0, 1] -> [B, N + 1, dim].
class ReferenceEncoderImpl : public torch::nn::Module {
public:
    explicit ReferenceEncoderImpl(const ReferenceEncoderOptions& opts = {});
    torch::Tensor forward(torch::Tensor images);

    const ReferenceEncoderOptions& options() const { return opts_; }

private:
    ReferenceEncoderOptions opts_;
    torch::nn::Conv2d patchify{nullptr};
    torch::Tensor pos_embed;
    torch::nn::ModuleList blocks{nullptr};
    torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(ReferenceEncoder);

/// Shared linear map followed by LayerNorm (eps 1e-5).
class AdapterImpl : public torch::nn::Module {
public:
    AdapterImpl(int64_t in_dim, int64_t out_dim);
    torch::Tensor forward(torch::Tensor tokens);

    torch::nn::Linear proj{nullptr};
    torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(Adapter);

struct ConditioningBundle {
    torch::Tensor ref_tokens;  // [B, N, d]
    torch::Tensor type_token;  // [B, 1, d]
    torch::Tensor types;       // [B] int64, 0 = vertical, 1 = others
};

struct ConditionerOptions {
    ReferenceEncoderOptions encoder;
    int64_t context_dim = 64;
};

/// Reference encoder, the two type embeddings and the adapter they share.
class ConditionerImpl : public torch::nn::Module {
public:
    explicit ConditionerImpl(const ConditionerOptions& opts = {});
    /// references: [B, 3, S, S] in [0, 1]; types: [B] int64.
    ConditioningBundle forward(torch::Tensor references, torch::Tensor types);

    const ConditionerOptions& options() const { return opts_; }

    ReferenceEncoder encoder{nullptr};
    torch::nn::Embedding type_embeddings{nullptr};
    Adapter adapter{nullptr};

private:
    ConditionerOptions opts_;
};
TORCH_MODULE(Conditioner);

/// Projection matrices applied as x @ W.
struct DecoupledWeights {
    torch::Tensor w_q;   // [C, d]
    torch::Tensor w_k;   // [d, d], type stream
    torch::Tensor w_v;   // [d, C]
    torch::Tensor w_k2;  // [d, d], reference stream
    torch::Tensor w_v2;  // [d, C]
};

struct AttentionProbs {
    torch::Tensor type_stream;  // [B, heads, L, 1]
    torch::Tensor ref_stream;   // [B, heads, L, N]
};

/// softmax(Q K^T / sqrt(d_head)) V over the type token plus the same with K', V'
/// over the reference tokens, sharing Q. An undefined context tensor drops its stream.
torch::Tensor decoupled_cross_attention(const torch::Tensor& f_q, const torch::Tensor& type_token,
                                        const torch::Tensor& ref_tokens, const DecoupledWeights& w, int64_t heads,
                                        AttentionProbs* probs = nullptr);

class DecoupledCrossAttentionImpl : public torch::nn::Module {
public:
    DecoupledCrossAttentionImpl(int64_t query_dim, int64_t context_dim, int64_t heads);
    torch::Tensor forward(torch::Tensor f_q, const ConditioningBundle& bundle, bool use_type, bool use_ref);

    DecoupledWeights weights() const;

    torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_k2{nullptr}, to_v2{nullptr};

private:
    int64_t heads_;
};
TORCH_MODULE(DecoupledCrossAttention);

}  // namespace reflgen::conditioning
