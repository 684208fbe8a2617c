// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

// Loop-based attention reference, independent of the batched tensor code.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <torch/torch.h>

namespace reflgen::oracle {

/// Multi-head single-stream attention with explicit loops, double precision.
/// q: [L, d], k: [N, d], v: [N, C]; heads split d and C evenly.
inline torch::Tensor loop_attention(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                                    int64_t heads) {
    const auto qa = q.to(torch::kFloat64).contiguous(), ka = k.to(torch::kFloat64).contiguous(),
               va = v.to(torch::kFloat64).contiguous();
    const int64_t L = qa.size(0), N = ka.size(0), d = qa.size(1), C = va.size(1);
    const int64_t dh = d / heads, ch = C / heads;
    auto Q = qa.accessor<double, 2>();
    auto K = ka.accessor<double, 2>();
    auto V = va.accessor<double, 2>();
    torch::Tensor out = torch::zeros({L, C}, torch::kFloat64);
    auto O = out.accessor<double, 2>();
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < L; ++i) {
            std::vector<double> s(N);
            double mx = -1e300;
            for (int64_t n = 0; n < N; ++n) {
                double dot = 0.0;
                for (int64_t e = 0; e < dh; ++e) dot += Q[i][h * dh + e] * K[n][h * dh + e];
                s[n] = dot / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[n]);
            }
            double z = 0.0;
            for (auto& x : s) z += (x = std::exp(x - mx));
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < ch; ++c) O[i][h * ch + c] += s[n] / z * V[n][h * ch + c];
        }
    }
    return out;
}

}  // namespace reflgen::oracle
