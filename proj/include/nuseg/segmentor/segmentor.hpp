/* Copyright 2026 The nuseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <utility>
#include <vector>

#include "nuseg/core/tensor.hpp"
#include "nuseg/nn/layers.hpp"

namespace nuseg {

/// Per-cell mask kernel: E reals gathered from the kernel map at one cell.
using DynamicKernel = std::vector<float>;

/// Bookkeeping for the dynamic-vs-standard memory comparison: number of
/// floats allocated for mask activations.
struct MaskAllocStats {
  size_t mask_floats = 0;
};

/// Applies each kernel as a 1x1 convolution over the shared feature map and
/// squashes through a sigmoid: mask_i[u,v] = sigmoid(sum_e k_i[e] F[e,u,v]).
/// Kernels are processed in chunks to bound the live activation footprint.
inline std::vector<Tensor> dynamic_masks(const Tensor& feature,
                                         const std::vector<DynamicKernel>& kernels,
                                         int chunk = 256, MaskAllocStats* stats = nullptr) {
  const int e = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (const DynamicKernel& k : kernels)
    if (static_cast<int>(k.size()) != e)
      throw std::invalid_argument("dynamic_masks: kernel length " + std::to_string(k.size()) +
                                  " != feature channels " + std::to_string(e));
  std::vector<Tensor> out;
  out.reserve(kernels.size());
  if (chunk < 1) chunk = 1;
  nn::ConstMatMap fm(feature.ptr(), e, plane);
  const int n = static_cast<int>(kernels.size());
  for (int begin = 0; begin < n; begin += chunk) {
    const int len = std::min(chunk, n - begin);
    Tensor kmat({len, e});
    for (int i = 0; i < len; ++i)
      std::copy(kernels[static_cast<size_t>(begin + i)].begin(),
                kernels[static_cast<size_t>(begin + i)].end(), kmat.ptr() + static_cast<int64_t>(i) * e);
    Tensor logits({len, static_cast<int>(plane)});
    nn::ConstMatMap km(kmat.ptr(), len, e);
    nn::MatMap lm(logits.ptr(), len, plane);
    lm.noalias() = km * fm;
    for (int i = 0; i < len; ++i) {
      Tensor m({h, w});
      const float* lp = logits.ptr() + static_cast<int64_t>(i) * plane;
      for (int64_t j = 0; j < plane; ++j) m[j] = nn::sigmoid(lp[j]);
      if (stats) stats->mask_floats += static_cast<size_t>(plane);
      out.push_back(std::move(m));
    }
  }
  return out;
}

/// Ablation branch: one static head predicting a mask channel for every
/// heatmap cell, materialized at full resolution. Far more activation
/// memory than the dynamic route when only a few cells matter.
class StandardSegmentor {
 public:
  StandardSegmentor() = default;
  StandardSegmentor(int in_ch, int mid_ch, int grid_h, int grid_w, int stride, Rng& rng)
      : grid_h_(grid_h), grid_w_(grid_w), stride_(stride), block_(in_ch, mid_ch, rng),
        out_(nn::Conv2d::pointwise(mid_ch, grid_h * grid_w, rng)) {}

  int grid_h() const { return grid_h_; }
  int grid_w() const { return grid_w_; }
  int stride() const { return stride_; }

  /// Stride-R logit stack {grid_h*grid_w, H/R, W/R}.
  Tensor forward(const Tensor& x) {
    check_spatial(x);
    return out_.forward(block_.forward(x));
  }
  Tensor forward_infer(const Tensor& x) const {
    check_spatial(x);
    return out_.forward_infer(block_.forward_infer(x));
  }
  Tensor backward(const Tensor& dstack) { return block_.backward(out_.backward(dstack)); }

  void collect(const std::string& prefix, nn::ParamList& out) {
    block_.collect(prefix + ".block", out);
    out_.collect(prefix + ".out", out);
  }

 private:
  void check_spatial(const Tensor& x) const {
    if (x.dim(1) != grid_h_ || x.dim(2) != grid_w_)
      throw std::invalid_argument(
          "standard segmentor is bound to a fixed grid " + std::to_string(grid_w_) + "x" +
          std::to_string(grid_h_) + ", got input " + x.shape_str());
  }

  int grid_h_ = 0, grid_w_ = 0, stride_ = 4;
  nn::ConvBlock block_;
  nn::Conv2d out_;
};

/// Masks of the standard branch at the requested cells. The whole stack is
/// brought to full resolution first (one channel per cell), then the
/// requested channels are returned; positions are (x, y) on the stride-R grid.
inline std::vector<Tensor> standard_masks(const Tensor& stack_logits, int stride,
                                          const std::vector<std::pair<int, int>>& positions,
                                          MaskAllocStats* stats = nullptr) {
  const int g = stack_logits.dim(0), hc = stack_logits.dim(1), wc = stack_logits.dim(2);
  const int h = hc * stride, w = wc * stride;
  for (const auto& [x, y] : positions)
    if (x < 0 || x >= wc || y < 0 || y >= hc)
      throw std::invalid_argument("standard_masks: position (" + std::to_string(x) + "," +
                                  std::to_string(y) + ") outside " + std::to_string(wc) + "x" +
                                  std::to_string(hc) + " grid");
  std::vector<Tensor> full(static_cast<size_t>(g));
  for (int c = 0; c < g; ++c) {
    Tensor coarse({1, hc, wc});
    std::copy(stack_logits.ptr() + static_cast<int64_t>(c) * hc * wc,
              stack_logits.ptr() + static_cast<int64_t>(c + 1) * hc * wc, coarse.ptr());
    Tensor up = nn::upsample_bilinear(coarse, stride);
    Tensor m({h, w});
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = nn::sigmoid(up[i]);
    if (stats) stats->mask_floats += static_cast<size_t>(m.numel());
    full[static_cast<size_t>(c)] = std::move(m);
  }
  std::vector<Tensor> out;
  out.reserve(positions.size());
  for (const auto& [x, y] : positions) {
    out.push_back(full[static_cast<size_t>(y * wc + x)]);
    if (stats) stats->mask_floats += out.back().numel();
  }
  return out;
}

/// Lazy single-cell variant used at decode time (no full materialization).
inline Tensor standard_mask_at(const Tensor& stack_logits, int stride, int x, int y) {
  const int hc = stack_logits.dim(1), wc = stack_logits.dim(2);
  const int channel = y * wc + x;
  Tensor coarse({1, hc, wc});
  std::copy(stack_logits.ptr() + static_cast<int64_t>(channel) * hc * wc,
            stack_logits.ptr() + static_cast<int64_t>(channel + 1) * hc * wc, coarse.ptr());
  Tensor up = nn::upsample_bilinear(coarse, stride);
  Tensor m({hc * stride, wc * stride});
  for (int64_t i = 0; i < m.numel(); ++i) m[i] = nn::sigmoid(up[i]);
  return m;
}

}  // namespace nuseg
