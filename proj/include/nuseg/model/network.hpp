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

#include <memory>
#include <string>
#include <vector>

#include "nuseg/core/tensor.hpp"
#include "nuseg/model/backbone.hpp"
#include "nuseg/model/necks.hpp"
#include "nuseg/model/output.hpp"
#include "nuseg/segmentor/segmentor.hpp"

namespace nuseg {

enum class NeckKind { kJpfmUnshared, kJpfmShared, kFpn, kAspp };
enum class SegmentorKind { kDynamic, kStandard };

struct ModelConfig {
  int num_classes = 2;   // C
  int embed_dim = 64;    // E
  int stride = 4;        // R
  int head_depth = 7;    // stacked conv blocks in heatmap/kernel branches
  int head_channels = 256;
  std::string backbone = "hr-small";  // hr-small | hr-large
  int backbone_width = 0;             // 0 -> 16 (small) / 64 (large)
  int backbone_blocks = 0;            // 0 -> 1 (small) / 2 (large)
  std::string neck = "jpfm-unshared";  // jpfm-unshared | jpfm-shared | fpn | aspp
  int jpfm_branch_channels = 128;
  int jpfm_out_channels = 256;
  std::string segmentor = "dynamic";  // dynamic | standard
  int standard_grid = 64;             // cells per side bound by the standard branch
  uint64_t init_seed = 1;

  int resolved_width() const { return backbone_width > 0 ? backbone_width : (backbone == "hr-large" ? 64 : 16); }
  int resolved_blocks() const { return backbone_blocks > 0 ? backbone_blocks : (backbone == "hr-large" ? 2 : 1); }

  NeckKind neck_kind() const {
    if (neck == "jpfm-unshared") return NeckKind::kJpfmUnshared;
    if (neck == "jpfm-shared") return NeckKind::kJpfmShared;
    if (neck == "fpn") return NeckKind::kFpn;
    if (neck == "aspp") return NeckKind::kAspp;
    throw ConfigError("unknown neck '" + neck + "' (jpfm-unshared|jpfm-shared|fpn|aspp)");
  }
  SegmentorKind segmentor_kind() const {
    if (segmentor == "dynamic") return SegmentorKind::kDynamic;
    if (segmentor == "standard") return SegmentorKind::kStandard;
    throw ConfigError("unknown segmentor '" + segmentor + "' (dynamic|standard)");
  }

  void validate() const {
    if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
    if (embed_dim < 1) throw ConfigError("model: embed_dim must be >= 1");
    if (stride != 2 && stride != 4 && stride != 8 && stride != 16 && stride != 32)
      throw ConfigError("model: stride must be one of 2,4,8,16,32");
    if (head_depth < 1) throw ConfigError("model: head_depth must be >= 1");
    if (head_channels < 1 || jpfm_branch_channels < 1 || jpfm_out_channels < 1)
      throw ConfigError("model: channel counts must be >= 1");
    if (backbone != "hr-small" && backbone != "hr-large")
      throw ConfigError("unknown backbone '" + backbone + "' (hr-small|hr-large)");
    neck_kind();
    segmentor_kind();
  }
};

namespace detail {

/// Conv block followed by a fixed 2x bilinear upsample.
class UpBlock {
 public:
  UpBlock() = default;
  UpBlock(int in_ch, int out_ch, Rng& rng) : cb_(in_ch, out_ch, rng) {}
  Tensor forward(const Tensor& x) {
    Tensor y = cb_.forward(x);
    in_h_ = y.dim(1);
    in_w_ = y.dim(2);
    return nn::upsample_bilinear(y, 2);
  }
  Tensor forward_infer(const Tensor& x) const {
    return nn::upsample_bilinear(cb_.forward_infer(x), 2);
  }
  Tensor backward(const Tensor& gy) {
    return cb_.backward(nn::upsample_bilinear_backward(gy, in_h_, in_w_, 2));
  }
  void collect(const std::string& prefix, nn::ParamList& out) { cb_.collect(prefix, out); }

 private:
  nn::ConvBlock cb_;
  int in_h_ = 0, in_w_ = 0;
};

/// Moves a stride-4 task feature to the configured output stride R:
/// stride-2 conv blocks for R > 4, one upsample block for R = 2.
class StrideAdapter {
 public:
  StrideAdapter() = default;
  StrideAdapter(int channels, int stride, Rng& rng) {
    for (int s = 4; s < stride; s *= 2) downs_.emplace_back(channels, channels, 2, rng);
    if (stride == 2) up_ = std::make_unique<UpBlock>(channels, channels, rng);
  }
  StrideAdapter(const StrideAdapter&) = delete;
  StrideAdapter& operator=(const StrideAdapter&) = delete;
  StrideAdapter(StrideAdapter&&) = default;
  StrideAdapter& operator=(StrideAdapter&&) = default;

  Tensor forward(Tensor x) {
    if (up_) return up_->forward(x);
    for (auto& d : downs_) x = d.forward(x);
    return x;
  }
  Tensor forward_infer(Tensor x) const {
    if (up_) return up_->forward_infer(x);
    for (const auto& d : downs_) x = d.forward_infer(x);
    return x;
  }
  Tensor backward(Tensor gy) {
    if (up_) return up_->backward(gy);
    for (auto it = downs_.rbegin(); it != downs_.rend(); ++it) gy = it->backward(gy);
    return gy;
  }
  void collect(const std::string& prefix, nn::ParamList& out) {
    for (size_t i = 0; i < downs_.size(); ++i)
      downs_[i].collect(prefix + ".d" + std::to_string(i), out);
    if (up_) up_->collect(prefix + ".up", out);
  }

 private:
  std::vector<nn::ConvBlock> downs_;
  std::unique_ptr<UpBlock> up_;
};

}  // namespace detail

/// The full predictor: multi-resolution backbone, per-branch necks, and the
/// heatmap / kernel / feature (or standard mask) heads.
class Network {
 public:
  explicit Network(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    const int c = cfg_.resolved_width();
    backbone_ = HrBackbone(c, cfg_.resolved_blocks(), rng);
    widths_ = {c, 2 * c, 4 * c, 8 * c};
    const int fused_ch = 15 * c;
    const int task_ch = cfg_.jpfm_out_channels;

    JpfmConfig jcfg;
    jcfg.branch_channels = cfg_.jpfm_branch_channels;
    jcfg.out_channels = cfg_.jpfm_out_channels;
    const bool standard = cfg_.segmentor_kind() == SegmentorKind::kStandard;
    switch (cfg_.neck_kind()) {
      case NeckKind::kJpfmUnshared:
        jpfm_heat_ = Jpfm(fused_ch, jcfg, rng);
        jpfm_kernel_ = Jpfm(fused_ch, jcfg, rng);  // mask branch in standard mode
        if (!standard) jpfm_feat_ = Jpfm(fused_ch, jcfg, rng);
        break;
      case NeckKind::kJpfmShared:
        jpfm_heat_ = Jpfm(fused_ch, jcfg, rng);
        break;
      case NeckKind::kFpn:
        fpn_ = FpnNeck(widths_, task_ch, rng);
        break;
      case NeckKind::kAspp:
        aspp_ = AsppNeck(widths_[3], cfg_.jpfm_branch_channels, task_ch, rng);
        break;
    }

    heat_adapt_ = detail::StrideAdapter(task_ch, cfg_.stride, rng);
    int in_ch = task_ch;
    for (int i = 0; i < cfg_.head_depth; ++i) {
      heat_blocks_.emplace_back(in_ch, cfg_.head_channels, rng);
      in_ch = cfg_.head_channels;
    }
    heat_out_ = nn::Conv2d::pointwise(cfg_.head_channels, cfg_.num_classes, rng);
    // Start near-background so early focal loss is not dominated by the
    // easy-negative sea.
    for (int64_t i = 0; i < heat_out_.bias().numel(); ++i) heat_out_.bias()[i] = -2.19f;

    if (standard) {
      standard_seg_ = std::make_unique<StandardSegmentor>(
          task_ch, cfg_.head_channels, cfg_.standard_grid, cfg_.standard_grid, cfg_.stride, rng);
    } else {
      kern_adapt_ = detail::StrideAdapter(task_ch, cfg_.stride, rng);
      in_ch = task_ch + 2;  // normalized coordinate channels
      for (int i = 0; i < cfg_.head_depth; ++i) {
        kern_blocks_.emplace_back(in_ch, cfg_.head_channels, rng);
        in_ch = cfg_.head_channels;
      }
      kern_out_ = nn::Conv2d::pointwise(cfg_.head_channels, cfg_.embed_dim, rng);
      feat_up1_ = detail::UpBlock(task_ch, cfg_.head_channels, rng);
      feat_up2_ = detail::UpBlock(cfg_.head_channels, cfg_.head_channels, rng);
      feat_out_ = nn::Conv2d::pointwise(cfg_.head_channels, cfg_.embed_dim, rng);
    }
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<Tensor> extract_features(const Tensor& img) const {
    return backbone_.forward_infer(img);
  }

  NetworkOutput forward(const Tensor& img) { return run<true>(img); }
  NetworkOutput forward_infer(const Tensor& img) const {
    return const_cast<Network*>(this)->run<false>(img);
  }

  /// Backpropagates the loss gradients (with respect to the sigmoid heatmap,
  /// raw kernel map, raw feature map, and/or standard logit stack) through
  /// the whole network, accumulating parameter gradients.
  void backward(const NetworkOutput& out, const Tensor& dheatmap, const Tensor& dkernels,
                const Tensor& dfeature, const Tensor& dstandard = Tensor()) {
    // through the output sigmoid
    Tensor dlogits(dheatmap.shape());
    for (int64_t i = 0; i < dlogits.numel(); ++i) {
      const float s = out.heatmap[i];
      dlogits[i] = dheatmap[i] * s * (1.0f - s);
    }
    Tensor gh = heat_out_.backward(dlogits);
    for (auto it = heat_blocks_.rbegin(); it != heat_blocks_.rend(); ++it) gh = it->backward(gh);
    Tensor gt_heat = heat_adapt_.backward(std::move(gh));

    Tensor gt_kern, gt_feat, gt_mask;
    if (standard_seg_) {
      gt_mask = standard_seg_->backward(dstandard);
    } else {
      Tensor gk = kern_out_.backward(dkernels);
      for (auto it = kern_blocks_.rbegin(); it != kern_blocks_.rend(); ++it)
        gk = it->backward(gk);
      // drop the coordinate-channel gradients
      std::vector<Tensor> parts =
          nn::split_channels(gk, {gk.dim(0) - 2, 2});
      gt_kern = kern_adapt_.backward(std::move(parts[0]));

      Tensor gf = feat_out_.backward(dfeature);
      gt_feat = feat_up1_.backward(feat_up2_.backward(gf));
    }

    switch (cfg_.neck_kind()) {
      case NeckKind::kJpfmUnshared: {
        Tensor gfused = jpfm_heat_.backward(gt_heat);
        if (standard_seg_) {
          add_inplace(gfused, jpfm_kernel_.backward(gt_mask));
        } else {
          add_inplace(gfused, jpfm_kernel_.backward(gt_kern));
          add_inplace(gfused, jpfm_feat_.backward(gt_feat));
        }
        backbone_.backward(fuse_multiscale_backward(gfused, widths_));
        break;
      }
      case NeckKind::kJpfmShared: {
        Tensor gt = sum_task_grads(gt_heat, gt_kern, gt_feat, gt_mask);
        backbone_.backward(fuse_multiscale_backward(jpfm_heat_.backward(gt), widths_));
        break;
      }
      case NeckKind::kFpn: {
        Tensor gt = sum_task_grads(gt_heat, gt_kern, gt_feat, gt_mask);
        backbone_.backward(fpn_.backward(gt));
        break;
      }
      case NeckKind::kAspp: {
        Tensor gt = sum_task_grads(gt_heat, gt_kern, gt_feat, gt_mask);
        backbone_.backward(aspp_.backward(gt, widths_));
        break;
      }
    }
  }

  nn::ParamList params() {
    nn::ParamList out;
    backbone_.collect("backbone", out);
    switch (cfg_.neck_kind()) {
      case NeckKind::kJpfmUnshared:
        jpfm_heat_.collect("neck.heat", out);
        jpfm_kernel_.collect(standard_seg_ ? "neck.mask" : "neck.kernel", out);
        if (!standard_seg_) jpfm_feat_.collect("neck.feature", out);
        break;
      case NeckKind::kJpfmShared:
        jpfm_heat_.collect("neck.shared", out);
        break;
      case NeckKind::kFpn:
        fpn_.collect("neck.fpn", out);
        break;
      case NeckKind::kAspp:
        aspp_.collect("neck.aspp", out);
        break;
    }
    heat_adapt_.collect("head.heat.adapt", out);
    for (size_t i = 0; i < heat_blocks_.size(); ++i)
      heat_blocks_[i].collect("head.heat.b" + std::to_string(i), out);
    heat_out_.collect("head.heat.out", out);
    if (standard_seg_) {
      standard_seg_->collect("head.standard", out);
    } else {
      kern_adapt_.collect("head.kernel.adapt", out);
      for (size_t i = 0; i < kern_blocks_.size(); ++i)
        kern_blocks_[i].collect("head.kernel.b" + std::to_string(i), out);
      kern_out_.collect("head.kernel.out", out);
      feat_up1_.collect("head.feature.up1", out);
      feat_up2_.collect("head.feature.up2", out);
      feat_out_.collect("head.feature.out", out);
    }
    return out;
  }

  int64_t param_count() {
    int64_t n = 0;
    for (const auto& p : params()) n += p.value->numel();
    return n;
  }

  /// Gradient of the final kernel-branch conv; used to verify that the mask
  /// objective alone feeds the kernel head.
  const Tensor* kernel_head_out_grad() {
    if (standard_seg_) return nullptr;
    nn::ParamList l;
    kern_out_.collect("k", l);
    return l[0].grad;
  }

 private:
  static Tensor sum_task_grads(const Tensor& a, const Tensor& b, const Tensor& c,
                               const Tensor& d) {
    Tensor out = a;
    if (!b.empty()) add_inplace(out, b);
    if (!c.empty()) add_inplace(out, c);
    if (!d.empty()) add_inplace(out, d);
    return out;
  }

  template <bool kTrain>
  NetworkOutput run(const Tensor& img) {
    HrBackbone::check_input(img);
    auto bb = [&](const Tensor& x) {
      return kTrain ? backbone_.forward(x) : backbone_.forward_infer(x);
    };
    std::vector<Tensor> feats = bb(img);

    Tensor tf_heat, tf_kern, tf_feat;  // task features (stride 4)
    switch (cfg_.neck_kind()) {
      case NeckKind::kJpfmUnshared: {
        Tensor fused = fuse_multiscale(feats);
        tf_heat = kTrain ? jpfm_heat_.forward(fused) : jpfm_heat_.forward_infer(fused);
        tf_kern = kTrain ? jpfm_kernel_.forward(fused) : jpfm_kernel_.forward_infer(fused);
        if (!standard_seg_)
          tf_feat = kTrain ? jpfm_feat_.forward(fused) : jpfm_feat_.forward_infer(fused);
        break;
      }
      case NeckKind::kJpfmShared: {
        Tensor fused = fuse_multiscale(feats);
        tf_heat = kTrain ? jpfm_heat_.forward(fused) : jpfm_heat_.forward_infer(fused);
        tf_kern = tf_heat;
        tf_feat = tf_heat;
        break;
      }
      case NeckKind::kFpn:
        tf_heat = kTrain ? fpn_.forward(feats) : fpn_.forward_infer(feats);
        tf_kern = tf_heat;
        tf_feat = tf_heat;
        break;
      case NeckKind::kAspp:
        tf_heat = kTrain ? aspp_.forward(feats) : aspp_.forward_infer(feats);
        tf_kern = tf_heat;
        tf_feat = tf_heat;
        break;
    }

    NetworkOutput out;
    out.stride = cfg_.stride;

    Tensor h = kTrain ? heat_adapt_.forward(tf_heat) : heat_adapt_.forward_infer(tf_heat);
    for (auto& blk : heat_blocks_) h = kTrain ? blk.forward(h) : blk.forward_infer(h);
    Tensor logits = kTrain ? heat_out_.forward(h) : heat_out_.forward_infer(h);
    out.heatmap = Tensor(logits.shape());
    for (int64_t i = 0; i < logits.numel(); ++i) {
      const float s = nn::sigmoid(logits[i]);
      out.heatmap[i] = std::min(std::max(s, 1e-6f), 1.0f - 1e-6f);
    }

    if (standard_seg_) {
      out.standard_logits =
          kTrain ? standard_seg_->forward(tf_kern) : standard_seg_->forward_infer(tf_kern);
      return out;
    }

    Tensor k = kTrain ? kern_adapt_.forward(tf_kern) : kern_adapt_.forward_infer(tf_kern);
    Tensor coords = nn::coord_channels(k.dim(1), k.dim(2));
    Tensor kc = nn::concat_channels({&k, &coords});
    for (auto& blk : kern_blocks_) kc = kTrain ? blk.forward(kc) : blk.forward_infer(kc);
    out.kernels = kTrain ? kern_out_.forward(kc) : kern_out_.forward_infer(kc);

    Tensor f = kTrain ? feat_up1_.forward(tf_feat) : feat_up1_.forward_infer(tf_feat);
    f = kTrain ? feat_up2_.forward(f) : feat_up2_.forward_infer(f);
    out.feature = kTrain ? feat_out_.forward(f) : feat_out_.forward_infer(f);
    return out;
  }

  ModelConfig cfg_;
  HrBackbone backbone_;
  std::vector<int> widths_;
  Jpfm jpfm_heat_, jpfm_kernel_, jpfm_feat_;
  FpnNeck fpn_;
  AsppNeck aspp_;
  detail::StrideAdapter heat_adapt_, kern_adapt_;
  std::vector<nn::ConvBlock> heat_blocks_, kern_blocks_;
  nn::Conv2d heat_out_, kern_out_, feat_out_;
  detail::UpBlock feat_up1_, feat_up2_;
  std::unique_ptr<StandardSegmentor> standard_seg_;
};

}  // namespace nuseg
