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

#include <string>
#include <vector>

#include "nuseg/core/tensor.hpp"
#include "nuseg/model/backbone.hpp"
#include "nuseg/nn/layers.hpp"

namespace nuseg {

struct JpfmConfig {
  std::vector<int> dilations{1, 2, 4, 8};
  int branch_channels = 128;
  int out_channels = 256;

  void validate() const {
    if (branch_channels <= 0 || out_channels <= 0)
      throw ConfigError("jpfm: channel counts must be positive");
    for (size_t i = 1; i < dilations.size(); ++i)
      if (dilations[i] <= dilations[i - 1])
        throw ConfigError("jpfm: dilations must be strictly increasing");
    if (dilations.empty()) throw ConfigError("jpfm: at least one dilation required");
  }
};

/// Parallel 3x3 convolutions over densely increasing dilations, channel
/// concatenation, then a 1x1 fuse. Spatial size is preserved.
class Jpfm {
 public:
  Jpfm() = default;
  Jpfm(int in_ch, const JpfmConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    for (int d : cfg_.dilations) {
      convs_.push_back(nn::Conv2d::same3x3(in_ch, cfg_.branch_channels, d, rng));
      relus_.emplace_back();
    }
    fuse_ = nn::Conv2d::pointwise(static_cast<int>(cfg_.dilations.size()) * cfg_.branch_channels,
                                  cfg_.out_channels, rng);
  }

  int out_channels() const { return cfg_.out_channels; }

  Tensor forward(const Tensor& x) {
    std::vector<Tensor> parts(convs_.size());
    for (size_t i = 0; i < convs_.size(); ++i)
      parts[i] = relus_[i].forward(convs_[i].forward(x));
    std::vector<const Tensor*> views;
    for (const Tensor& p : parts) views.push_back(&p);
    return fuse_.forward(nn::concat_channels(views));
  }

  Tensor forward_infer(const Tensor& x) const {
    std::vector<Tensor> parts(convs_.size());
    for (size_t i = 0; i < convs_.size(); ++i)
      parts[i] = relus_[i].forward_infer(convs_[i].forward_infer(x));
    std::vector<const Tensor*> views;
    for (const Tensor& p : parts) views.push_back(&p);
    return fuse_.forward_infer(nn::concat_channels(views));
  }

  Tensor backward(const Tensor& gy) {
    Tensor gcat = fuse_.backward(gy);
    std::vector<int> sizes(convs_.size(), cfg_.branch_channels);
    std::vector<Tensor> parts = nn::split_channels(gcat, sizes);
    Tensor gx;
    for (size_t i = 0; i < convs_.size(); ++i) {
      Tensor g = convs_[i].backward(relus_[i].backward(parts[i]));
      if (gx.empty())
        gx = std::move(g);
      else
        add_inplace(gx, g);
    }
    return gx;
  }

  void collect(const std::string& prefix, nn::ParamList& out) {
    for (size_t i = 0; i < convs_.size(); ++i)
      convs_[i].collect(prefix + ".d" + std::to_string(cfg_.dilations[i]), out);
    fuse_.collect(prefix + ".fuse", out);
  }

 private:
  JpfmConfig cfg_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::ReLU> relus_;
  nn::Conv2d fuse_;
};

/// Classic top-down pyramid with lateral 1x1 projections; the stride-4 level
/// (after a 3x3 smoothing conv) is the task feature.
class FpnNeck {
 public:
  FpnNeck() = default;
  FpnNeck(const std::vector<int>& widths, int out_ch, Rng& rng) {
    for (int i = 0; i < 4; ++i) lat_.push_back(nn::Conv2d::pointwise(widths[i], out_ch, rng));
    smooth_ = nn::Conv2d::same3x3(out_ch, out_ch, 1, rng);
  }

  Tensor forward(const std::vector<Tensor>& feats) {
    for (int i = 0; i < 4; ++i) shapes_[i] = {feats[i].dim(1), feats[i].dim(2)};
    Tensor p = lat_[3].forward(feats[3]);
    for (int i = 2; i >= 0; --i) {
      Tensor q = lat_[i].forward(feats[i]);
      add_inplace(q, nn::upsample_bilinear(p, 2));
      p = std::move(q);
    }
    return smooth_.forward(p);
  }

  Tensor forward_infer(const std::vector<Tensor>& feats) const {
    Tensor p = lat_[3].forward_infer(feats[3]);
    for (int i = 2; i >= 0; --i) {
      Tensor q = lat_[i].forward_infer(feats[i]);
      add_inplace(q, nn::upsample_bilinear(p, 2));
      p = std::move(q);
    }
    return smooth_.forward_infer(p);
  }

  std::vector<Tensor> backward(const Tensor& gy) {
    std::vector<Tensor> gfeats(4);
    Tensor gp = smooth_.backward(gy);
    for (int i = 0; i <= 2; ++i) {
      gfeats[i] = lat_[i].backward(gp);
      gp = nn::upsample_bilinear_backward(gp, shapes_[i + 1].first, shapes_[i + 1].second, 2);
    }
    gfeats[3] = lat_[3].backward(gp);
    return gfeats;
  }

  void collect(const std::string& prefix, nn::ParamList& out) {
    for (int i = 0; i < 4; ++i) lat_[i].collect(prefix + ".lat" + std::to_string(i), out);
    smooth_.collect(prefix + ".smooth", out);
  }

 private:
  std::vector<nn::Conv2d> lat_;
  nn::Conv2d smooth_;
  std::pair<int, int> shapes_[4];
};

/// Sparse-dilation pyramid pooling over the coarsest map only, brought back
/// to stride 4 bilinearly.
class AsppNeck {
 public:
  AsppNeck() = default;
  AsppNeck(int in_ch, int branch_ch, int out_ch, Rng& rng) {
    JpfmConfig cfg;
    cfg.dilations = {1, 6, 12, 18};
    cfg.branch_channels = branch_ch;
    cfg.out_channels = out_ch;
    core_ = Jpfm(in_ch, cfg, rng);
  }

  Tensor forward(const std::vector<Tensor>& feats) {
    in_h_ = feats[3].dim(1);
    in_w_ = feats[3].dim(2);
    return nn::upsample_bilinear(core_.forward(feats[3]), 8);
  }
  Tensor forward_infer(const std::vector<Tensor>& feats) const {
    return nn::upsample_bilinear(core_.forward_infer(feats[3]), 8);
  }
  std::vector<Tensor> backward(const Tensor& gy, const std::vector<int>& widths) {
    std::vector<Tensor> gfeats(4);
    gfeats[3] = core_.backward(nn::upsample_bilinear_backward(gy, in_h_, in_w_, 8));
    gfeats[0] = Tensor({widths[0], in_h_ * 8, in_w_ * 8});
    gfeats[1] = Tensor({widths[1], in_h_ * 4, in_w_ * 4});
    gfeats[2] = Tensor({widths[2], in_h_ * 2, in_w_ * 2});
    return gfeats;
  }
  void collect(const std::string& prefix, nn::ParamList& out) { core_.collect(prefix, out); }

 private:
  Jpfm core_;
  int in_h_ = 0, in_w_ = 0;
};

}  // namespace nuseg
