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

#include <cmath>
#include <map>
#include <vector>

#include "nuseg/core/tensor.hpp"
#include "nuseg/data/types.hpp"
#include "nuseg/model/output.hpp"
#include "nuseg/nn/layers.hpp"
#include "nuseg/targets/heatmap.hpp"

namespace nuseg {

enum class DetectorLoss { kFocal, kBce };

struct LossBreakdown {
  double keypoint_loss = 0.0;
  double mask_loss = 0.0;
  double total = 0.0;
  int n_pos_k = 0;
  int n_pos_m = 0;
};

namespace detail {
constexpr float kPredClamp = 1e-6f;

inline float clamp_pred(float p) {
  return std::min(std::max(p, kPredClamp), 1.0f - kPredClamp);
}
}  // namespace detail

/// Penalty-reduced pixel-wise focal loss over the keypoint heatmap.
/// Positive cells are those with target exactly 1; the sum is normalized by
/// their count (floored at 1 for pure-background crops). If dpred is given,
/// the gradient with respect to pred is accumulated into it.
inline double focal_keypoint_loss(const Tensor& pred, const Tensor& target, double alpha = 2.0,
                                  double beta = 4.0, Tensor* dpred = nullptr) {
  require_same_shape(pred, target, "focal_keypoint_loss");
  int64_t n_pos = 0;
  for (int64_t i = 0; i < target.numel(); ++i)
    if (target[i] == 1.0f) ++n_pos;
  const double norm = static_cast<double>(std::max<int64_t>(n_pos, 1));
  double sum = 0.0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const double p = detail::clamp_pred(pred[i]);
    const double y = target[i];
    if (y == 1.0f) {
      const double w = std::pow(1.0 - p, alpha);
      sum += w * std::log(p);
      if (dpred)
        (*dpred)[i] += static_cast<float>(
            -(-alpha * std::pow(1.0 - p, alpha - 1.0) * std::log(p) + w / p) / norm);
    } else {
      const double w = std::pow(1.0 - y, beta) * std::pow(p, alpha);
      sum += w * std::log(1.0 - p);
      if (dpred)
        (*dpred)[i] += static_cast<float>(
            -std::pow(1.0 - y, beta) *
            (alpha * std::pow(p, alpha - 1.0) * std::log(1.0 - p) - std::pow(p, alpha) / (1.0 - p)) /
            norm);
    }
  }
  return -sum / norm;
}

/// Plain binary cross entropy averaged over all cells and classes; the
/// ablation baseline for the focal objective.
inline double bce_keypoint_loss(const Tensor& pred, const Tensor& target,
                                Tensor* dpred = nullptr) {
  require_same_shape(pred, target, "bce_keypoint_loss");
  const double norm = static_cast<double>(pred.numel());
  double sum = 0.0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const double p = detail::clamp_pred(pred[i]);
    const double y = target[i];
    sum += y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    if (dpred) (*dpred)[i] += static_cast<float>(-(y / p - (1.0 - y) / (1.0 - p)) / norm);
  }
  return -sum / norm;
}

inline double keypoint_loss(DetectorLoss kind, const Tensor& pred, const Tensor& target,
                            Tensor* dpred = nullptr) {
  return kind == DetectorLoss::kFocal ? focal_keypoint_loss(pred, target, 2.0, 4.0, dpred)
                                      : bce_keypoint_loss(pred, target, dpred);
}

/// Soft Dice loss in the squared-denominator form:
/// 1 - 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps).
inline double soft_dice_loss(const Tensor& pred, const Tensor& gt, Tensor* dpred = nullptr) {
  require_same_shape(pred, gt, "soft_dice_loss");
  constexpr double eps = 1e-6;
  double inter = 0.0, psq = 0.0, gsq = 0.0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    inter += static_cast<double>(pred[i]) * gt[i];
    psq += static_cast<double>(pred[i]) * pred[i];
    gsq += static_cast<double>(gt[i]) * gt[i];
  }
  const double denom = psq + gsq + eps;
  if (dpred) {
    const double scale = 2.0 / (denom * denom);
    for (int64_t i = 0; i < pred.numel(); ++i)
      (*dpred)[i] += static_cast<float>(-scale * (gt[i] * denom - inter * 2.0 * pred[i]));
  }
  return 1.0 - 2.0 * inter / denom;
}

namespace detail {

/// Per-positive soft masks for the dynamic route, one at a time.
/// visit(positive_index, kernel_ptr, logit, mask) is called for each positive.
template <typename Visit>
void for_each_dynamic_mask(const Tensor& kernels, const Tensor& feature,
                           const std::vector<PositiveCell>& positives, Visit&& visit) {
  const int e = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
  const int hc = kernels.dim(1), wc = kernels.dim(2);
  const int64_t plane = static_cast<int64_t>(h) * w;
  Tensor logit({h, w});
  Tensor mask({h, w});
  std::vector<float> kvec(static_cast<size_t>(e));
  for (size_t pi = 0; pi < positives.size(); ++pi) {
    const PositiveCell& pc = positives[pi];
    for (int c = 0; c < e; ++c)
      kvec[static_cast<size_t>(c)] = kernels[(static_cast<int64_t>(c) * hc + pc.y) * wc + pc.x];
    logit.zero();
    for (int c = 0; c < e; ++c) {
      const float k = kvec[static_cast<size_t>(c)];
      if (k == 0.0f) continue;
      const float* fc = feature.ptr() + static_cast<int64_t>(c) * plane;
      float* lp = logit.ptr();
      for (int64_t i = 0; i < plane; ++i) lp[i] += k * fc[i];
    }
    for (int64_t i = 0; i < plane; ++i) mask[i] = nn::sigmoid(logit[i]);
    visit(pi, kvec.data(), logit, mask);
  }
}

inline std::map<int, Tensor> gt_masks_for_positives(const InstanceAnnotation& ann,
                                                    const std::vector<PositiveCell>& positives) {
  std::map<int, Tensor> masks;
  for (const PositiveCell& pc : positives)
    if (!masks.count(pc.instance)) masks.emplace(pc.instance, ann.mask_of(pc.instance));
  return masks;
}

}  // namespace detail

/// Soft dice averaged over positive cells, masks generated dynamically from
/// the kernel map and shared feature. Gradients (optional) are accumulated
/// into dkernels/dfeature.
inline double mask_loss_dynamic(const Tensor& kernels, const Tensor& feature,
                                const HeatmapTarget& target, const InstanceAnnotation& ann,
                                Tensor* dkernels = nullptr, Tensor* dfeature = nullptr) {
  if (target.positives.empty()) return 0.0;
  const auto gt = detail::gt_masks_for_positives(ann, target.positives);
  const int e = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
  const int hc = kernels.dim(1), wc = kernels.dim(2);
  const int64_t plane = static_cast<int64_t>(h) * w;
  const double inv_p = 1.0 / static_cast<double>(target.positives.size());
  double total = 0.0;
  Tensor dmask({h, w});
  detail::for_each_dynamic_mask(
      kernels, feature, target.positives, [&](size_t pi, const float* kvec, const Tensor& logit,
                                              const Tensor& mask) {
        const PositiveCell& pc = target.positives[pi];
        const Tensor& g = gt.at(pc.instance);
        if (!dkernels) {
          total += soft_dice_loss(mask, g);
          return;
        }
        dmask.zero();
        total += soft_dice_loss(mask, g, &dmask);
        // d/dlogit = dmask * m * (1 - m), scaled by the positive average
        for (int64_t i = 0; i < plane; ++i)
          dmask[i] = static_cast<float>(dmask[i] * mask[i] * (1.0f - mask[i]) * inv_p);
        for (int c = 0; c < e; ++c) {
          const float* fc = feature.ptr() + static_cast<int64_t>(c) * plane;
          float* dfc = dfeature->ptr() + static_cast<int64_t>(c) * plane;
          const float kv = kvec[c];
          double dk = 0.0;
          for (int64_t i = 0; i < plane; ++i) {
            dk += static_cast<double>(dmask[i]) * fc[i];
            dfc[i] += dmask[i] * kv;
          }
          (*dkernels)[(static_cast<int64_t>(c) * hc + pc.y) * wc + pc.x] +=
              static_cast<float>(dk);
        }
        (void)logit;
      });
  return total * inv_p;
}

/// Mask loss for the standard (all-positions) segmentation branch: per
/// positive, the matching stride-R logit channel is upsampled to full
/// resolution and scored with soft dice. Gradients go into dstack.
inline double mask_loss_standard(const Tensor& stack, int stride, const HeatmapTarget& target,
                                 const InstanceAnnotation& ann, Tensor* dstack = nullptr) {
  if (target.positives.empty()) return 0.0;
  const auto gt = detail::gt_masks_for_positives(ann, target.positives);
  const int hc = stack.dim(1), wc = stack.dim(2);
  const int h = hc * stride, w = wc * stride;
  const double inv_p = 1.0 / static_cast<double>(target.positives.size());
  double total = 0.0;
  for (const PositiveCell& pc : target.positives) {
    const int channel = pc.y * wc + pc.x;
    Tensor logit_coarse({1, hc, wc});
    std::copy(stack.ptr() + static_cast<int64_t>(channel) * hc * wc,
              stack.ptr() + static_cast<int64_t>(channel + 1) * hc * wc, logit_coarse.ptr());
    Tensor logit = nn::upsample_bilinear(logit_coarse, stride);
    Tensor mask({h, w});
    for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = nn::sigmoid(logit[i]);
    const Tensor& g = gt.at(pc.instance);
    if (!dstack) {
      total += soft_dice_loss(mask, g);
      continue;
    }
    Tensor dmask({h, w});
    total += soft_dice_loss(mask, g, &dmask);
    Tensor dlogit({1, h, w});
    for (int64_t i = 0; i < mask.numel(); ++i)
      dlogit[i] = static_cast<float>(dmask[i] * mask[i] * (1.0f - mask[i]) * inv_p);
    Tensor dcoarse = nn::upsample_bilinear_backward(dlogit, hc, wc, stride);
    float* dst = dstack->ptr() + static_cast<int64_t>(channel) * hc * wc;
    for (int64_t i = 0; i < dcoarse.numel(); ++i) dst[i] += dcoarse[i];
  }
  return total * inv_p;
}

/// Mask loss routed through whichever segmentation branch the network ran.
inline double mask_loss(const NetworkOutput& outputs, const HeatmapTarget& target,
                        const InstanceAnnotation& ann) {
  if (outputs.uses_dynamic_masks())
    return mask_loss_dynamic(outputs.kernels, outputs.feature, target, ann);
  return mask_loss_standard(outputs.standard_logits, outputs.stride, target, ann);
}

inline LossBreakdown total_loss(const NetworkOutput& outputs, const HeatmapTarget& target,
                                const InstanceAnnotation& ann, double lambda_mask = 1.0,
                                DetectorLoss detector_loss = DetectorLoss::kFocal) {
  LossBreakdown out;
  out.keypoint_loss = keypoint_loss(detector_loss, outputs.heatmap, target.y);
  out.mask_loss = mask_loss(outputs, target, ann);
  out.total = out.keypoint_loss + lambda_mask * out.mask_loss;
  for (int64_t i = 0; i < target.y.numel(); ++i)
    if (target.y[i] == 1.0f) ++out.n_pos_k;
  out.n_pos_m = static_cast<int>(target.positives.size());
  return out;
}

}  // namespace nuseg
