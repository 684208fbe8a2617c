// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include "reflgen/tensor_util.h"

#include "reflgen/errors.h"

namespace reflgen {

torch::Tensor to_tensor(const Image& img) {
    auto t = torch::from_blob(const_cast<float*>(img.data.data()), {img.height, img.width, img.channels},
                              torch::kFloat32);
    return t.permute({2, 0, 1}).contiguous();
}

torch::Tensor to_tensor(const Mask& mask) {
    auto t = torch::from_blob(const_cast<std::uint8_t*>(mask.data.data()), {1, mask.height, mask.width}, torch::kUInt8);
    return t.to(torch::kFloat32);
}

Image to_image(const torch::Tensor& chw) {
    if (chw.dim() != 3) throw Error(ErrorCode::ShapeMismatch, "to_image expects a [C, H, W] tensor");
    const auto hwc = chw.detach().to(torch::kCPU, torch::kFloat32).permute({1, 2, 0}).contiguous();
    Image img(static_cast<int>(chw.size(1)), static_cast<int>(chw.size(2)), static_cast<int>(chw.size(0)));
    std::copy_n(hwc.data_ptr<float>(), img.data.size(), img.data.begin());
    return img;
}

torch::Tensor stack_images(const std::vector<Image>& imgs) {
    std::vector<torch::Tensor> ts;
    ts.reserve(imgs.size());
    for (const auto& im : imgs) ts.push_back(to_tensor(im));
    return torch::stack(ts);
}

torch::Tensor stack_masks(const std::vector<Mask>& masks) {
    std::vector<torch::Tensor> ts;
    ts.reserve(masks.size());
    for (const auto& m : masks) ts.push_back(to_tensor(m));
    return torch::stack(ts);
}

}  // namespace reflgen
