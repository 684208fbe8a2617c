// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include <torch/torch.h>

#include "reflgen/image.h"

namespace reflgen {

/// HWC float image -> [C, H, W] float32 tensor, values unchanged.
torch::Tensor to_tensor(const Image& img);
/// Binary mask -> [1, H, W] float32 tensor of {0, 1}.
torch::Tensor to_tensor(const Mask& mask);
/// [C, H, W] tensor -> HWC image (values copied as-is).
Image to_image(const torch::Tensor& chw);

torch::Tensor stack_images(const std::vector<Image>& imgs);
torch::Tensor stack_masks(const std::vector<Mask>& masks);

}  // namespace reflgen
