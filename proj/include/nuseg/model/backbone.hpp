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

#include <array>
#include <string>
#include <vector>

#include "nuseg/core/tensor.hpp"
#include "nuseg/nn/layers.hpp"

namespace nuseg {

inline void add_inplace(Tensor& a, const Tensor& b) {
  for (int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

namespace detail {

/// Chain of 3x3 conv blocks on one resolution branch.
class BranchBlocks {
 public:
  BranchBlocks() = default;
  BranchBlocks(int channels, int count, Rng& rng) {
    for (int i = 0; i < count; ++i) blocks_.emplace_back(channels, channels, rng);
  }
  Tensor forward(Tensor x) {
    for (auto& b : blocks_) x = b.forward(x);
    return x;
  }
  Tensor forward_infer(Tensor x) const {
    for (const auto& b : blocks_) x = b.forward_infer(x);
    return x;
  }
  Tensor backward(Tensor gy) {
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) gy = it->backward(gy);
    return gy;
  }
  void collect(const std::string& prefix, nn::ParamList& out) {
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(prefix + ".b" + std::to_string(i), out);
  }

 private:
  std::vector<nn::ConvBlock> blocks_;
};

/// Coarse-to-fine fusion path: 1x1 projection then bilinear upsampling.
class UpPath {
 public:
  UpPath() = default;
  UpPath(int in_ch, int out_ch, int factor, Rng& rng)
      : pw_(nn::Conv2d::pointwise(in_ch, out_ch, rng)), factor_(factor) {}
  Tensor forward(const Tensor& x) {
    in_h_ = x.dim(1);
    in_w_ = x.dim(2);
    return nn::upsample_bilinear(pw_.forward(x), factor_);
  }
  Tensor forward_infer(const Tensor& x) const {
    return nn::upsample_bilinear(pw_.forward_infer(x), factor_);
  }
  Tensor backward(const Tensor& gy) {
    return pw_.backward(nn::upsample_bilinear_backward(gy, in_h_, in_w_, factor_));
  }
  void collect(const std::string& prefix, nn::ParamList& out) { pw_.collect(prefix + ".pw", out); }

 private:
  nn::Conv2d pw_;
  int factor_ = 2, in_h_ = 0, in_w_ = 0;
};

/// Fine-to-coarse fusion path: repeated stride-2 convolutions, linear at the
/// last step.
class DownPath {
 public:
  DownPath() = default;
  DownPath(int in_ch, int out_ch, int steps, Rng& rng) {
    for (int s = 0; s < steps - 1; ++s) mids_.emplace_back(in_ch, in_ch, 2, rng);
    last_ = nn::Conv2d::down3x3(in_ch, out_ch, rng);
  }
  Tensor forward(Tensor x) {
    for (auto& m : mids_) x = m.forward(x);
    return last_.forward(x);
  }
  Tensor forward_infer(Tensor x) const {
    for (const auto& m : mids_) x = m.forward_infer(x);
    return last_.forward_infer(x);
  }
  Tensor backward(Tensor gy) {
    gy = last_.backward(gy);
    for (auto it = mids_.rbegin(); it != mids_.rend(); ++it) gy = it->backward(gy);
    return gy;
  }
  void collect(const std::string& prefix, nn::ParamList& out) {
    for (size_t i = 0; i < mids_.size(); ++i)
      mids_[i].collect(prefix + ".m" + std::to_string(i), out);
    last_.collect(prefix + ".last", out);
  }

 private:
  std::vector<nn::ConvBlock> mids_;
  nn::Conv2d last_;
};

/// Full cross-resolution exchange: every output branch sums projections of
/// every input branch, followed by a ReLU.
class CrossFuse {
 public:
  CrossFuse() = default;
  CrossFuse(const std::vector<int>& widths, Rng& rng) : n_(static_cast<int>(widths.size())) {
    ups_.resize(static_cast<size_t>(n_) * n_);
    downs_.resize(static_cast<size_t>(n_) * n_);
    relus_.resize(static_cast<size_t>(n_));
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j < n_; ++j) {
        if (j > i) ups_[idx(i, j)] = UpPath(widths[j], widths[i], 1 << (j - i), rng);
        if (j < i) downs_[idx(i, j)] = DownPath(widths[j], widths[i], i - j, rng);
      }
  }

  std::vector<Tensor> forward(const std::vector<Tensor>& in) {
    std::vector<Tensor> out(static_cast<size_t>(n_));
    for (int i = 0; i < n_; ++i) {
      Tensor sum = in[static_cast<size_t>(i)];
      for (int j = 0; j < n_; ++j) {
        if (j == i) continue;
        Tensor p = j > i ? ups_[idx(i, j)].forward(in[static_cast<size_t>(j)])
                         : downs_[idx(i, j)].forward(in[static_cast<size_t>(j)]);
        add_inplace(sum, p);
      }
      out[static_cast<size_t>(i)] = relus_[static_cast<size_t>(i)].forward(sum);
    }
    return out;
  }

  std::vector<Tensor> forward_infer(const std::vector<Tensor>& in) const {
    std::vector<Tensor> out(static_cast<size_t>(n_));
    for (int i = 0; i < n_; ++i) {
      Tensor sum = in[static_cast<size_t>(i)];
      for (int j = 0; j < n_; ++j) {
        if (j == i) continue;
        Tensor p = j > i ? ups_[idx(i, j)].forward_infer(in[static_cast<size_t>(j)])
                         : downs_[idx(i, j)].forward_infer(in[static_cast<size_t>(j)]);
        add_inplace(sum, p);
      }
      out[static_cast<size_t>(i)] = relus_[static_cast<size_t>(i)].forward_infer(sum);
    }
    return out;
  }

  std::vector<Tensor> backward(const std::vector<Tensor>& gout) {
    std::vector<Tensor> gin(static_cast<size_t>(n_));
    for (int i = 0; i < n_; ++i) {
      Tensor gpre = relus_[static_cast<size_t>(i)].backward(gout[static_cast<size_t>(i)]);
      for (int j = 0; j < n_; ++j) {
        Tensor gj = j == i   ? gpre
                    : j > i ? ups_[idx(i, j)].backward(gpre)
                            : downs_[idx(i, j)].backward(gpre);
        if (gin[static_cast<size_t>(j)].empty())
          gin[static_cast<size_t>(j)] = std::move(gj);
        else
          add_inplace(gin[static_cast<size_t>(j)], gj);
      }
    }
    return gin;
  }

  void collect(const std::string& prefix, nn::ParamList& out) {
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j < n_; ++j) {
        const std::string name = prefix + ".p" + std::to_string(j) + std::to_string(i);
        if (j > i) ups_[idx(i, j)].collect(name, out);
        if (j < i) downs_[idx(i, j)].collect(name, out);
      }
  }

 private:
  size_t idx(int i, int j) const { return static_cast<size_t>(i) * n_ + j; }
  int n_ = 0;
  std::vector<UpPath> ups_;
  std::vector<DownPath> downs_;
  std::vector<nn::ReLU> relus_;
};

}  // namespace detail

/// Multi-resolution feature extractor. Keeps a stride-4 branch alive end to
/// end while growing coarser branches, with full cross-resolution fusion
/// between stages. Outputs four maps at strides {4, 8, 16, 32} with widths
/// {c, 2c, 4c, 8c}.
class HrBackbone {
 public:
  HrBackbone() = default;
  HrBackbone(int width, int blocks_per_stage, Rng& rng)
      : c_(width),
        stem1_(3, width, 2, rng),
        stem2_(width, width, 2, rng),
        entry_(width, width, rng),
        t2_(width, 2 * width, 2, rng),
        t3_(2 * width, 4 * width, 2, rng),
        t4_(4 * width, 8 * width, 2, rng),
        fuse_a_({width, 2 * width}, rng),
        fuse_b_({width, 2 * width, 4 * width}, rng),
        fuse_c_({width, 2 * width, 4 * width, 8 * width}, rng) {
    for (int i = 0; i < 2; ++i) stage_a_[i] = detail::BranchBlocks((1 << i) * width, blocks_per_stage, rng);
    for (int i = 0; i < 3; ++i) stage_b_[i] = detail::BranchBlocks((1 << i) * width, blocks_per_stage, rng);
    for (int i = 0; i < 4; ++i) stage_c_[i] = detail::BranchBlocks((1 << i) * width, blocks_per_stage, rng);
  }

  int width() const { return c_; }

  static void check_input(const Tensor& x) {
    if (x.dim(1) % 32 != 0 || x.dim(2) % 32 != 0)
      throw std::invalid_argument("backbone input " + x.shape_str() +
                                  " not divisible by 32; pad the image to a multiple of 32");
  }

  std::vector<Tensor> forward(const Tensor& x) {
    check_input(x);
    Tensor r1 = entry_.forward(stem2_.forward(stem1_.forward(x)));
    std::vector<Tensor> a(2);
    a[0] = stage_a_[0].forward(r1);
    a[1] = stage_a_[1].forward(t2_.forward(r1));
    std::vector<Tensor> f = fuse_a_.forward(a);
    std::vector<Tensor> b(3);
    b[0] = stage_b_[0].forward(f[0]);
    b[1] = stage_b_[1].forward(f[1]);
    b[2] = stage_b_[2].forward(t3_.forward(f[1]));
    std::vector<Tensor> g = fuse_b_.forward(b);
    std::vector<Tensor> c(4);
    c[0] = stage_c_[0].forward(g[0]);
    c[1] = stage_c_[1].forward(g[1]);
    c[2] = stage_c_[2].forward(g[2]);
    c[3] = stage_c_[3].forward(t4_.forward(g[2]));
    return fuse_c_.forward(c);
  }

  std::vector<Tensor> forward_infer(const Tensor& x) const {
    check_input(x);
    Tensor r1 = entry_.forward_infer(stem2_.forward_infer(stem1_.forward_infer(x)));
    std::vector<Tensor> a(2);
    a[0] = stage_a_[0].forward_infer(r1);
    a[1] = stage_a_[1].forward_infer(t2_.forward_infer(r1));
    std::vector<Tensor> f = fuse_a_.forward_infer(a);
    std::vector<Tensor> b(3);
    b[0] = stage_b_[0].forward_infer(f[0]);
    b[1] = stage_b_[1].forward_infer(f[1]);
    b[2] = stage_b_[2].forward_infer(t3_.forward_infer(f[1]));
    std::vector<Tensor> g = fuse_b_.forward_infer(b);
    std::vector<Tensor> c(4);
    c[0] = stage_c_[0].forward_infer(g[0]);
    c[1] = stage_c_[1].forward_infer(g[1]);
    c[2] = stage_c_[2].forward_infer(g[2]);
    c[3] = stage_c_[3].forward_infer(t4_.forward_infer(g[2]));
    return fuse_c_.forward_infer(c);
  }

  Tensor backward(const std::vector<Tensor>& gout) {
    std::vector<Tensor> gc = fuse_c_.backward(gout);
    Tensor gg2 = stage_c_[2].backward(gc[2]);
    add_inplace(gg2, t4_.backward(stage_c_[3].backward(gc[3])));
    std::vector<Tensor> gg(3);
    gg[0] = stage_c_[0].backward(gc[0]);
    gg[1] = stage_c_[1].backward(gc[1]);
    gg[2] = std::move(gg2);
    std::vector<Tensor> gb = fuse_b_.backward(gg);
    Tensor gf1 = stage_b_[1].backward(gb[1]);
    add_inplace(gf1, t3_.backward(stage_b_[2].backward(gb[2])));
    std::vector<Tensor> gf(2);
    gf[0] = stage_b_[0].backward(gb[0]);
    gf[1] = std::move(gf1);
    std::vector<Tensor> ga = fuse_a_.backward(gf);
    Tensor gr1 = stage_a_[0].backward(ga[0]);
    add_inplace(gr1, t2_.backward(stage_a_[1].backward(ga[1])));
    return stem1_.backward(stem2_.backward(entry_.backward(gr1)));
  }

  void collect(const std::string& prefix, nn::ParamList& out) {
    stem1_.collect(prefix + ".stem1", out);
    stem2_.collect(prefix + ".stem2", out);
    entry_.collect(prefix + ".entry", out);
    t2_.collect(prefix + ".t2", out);
    t3_.collect(prefix + ".t3", out);
    t4_.collect(prefix + ".t4", out);
    for (int i = 0; i < 2; ++i) stage_a_[i].collect(prefix + ".a" + std::to_string(i), out);
    for (int i = 0; i < 3; ++i) stage_b_[i].collect(prefix + ".s" + std::to_string(i), out);
    for (int i = 0; i < 4; ++i) stage_c_[i].collect(prefix + ".c" + std::to_string(i), out);
    fuse_a_.collect(prefix + ".fa", out);
    fuse_b_.collect(prefix + ".fb", out);
    fuse_c_.collect(prefix + ".fc", out);
  }

 private:
  int c_ = 16;
  nn::ConvBlock stem1_, stem2_, entry_, t2_, t3_, t4_;
  detail::BranchBlocks stage_a_[2], stage_b_[3], stage_c_[4];
  detail::CrossFuse fuse_a_, fuse_b_, fuse_c_;
};

/// Bilinear-upsamples the coarser maps to stride 4 and concatenates along
/// channels: {c,2c,4c,8c} -> 15c.
inline Tensor fuse_multiscale(const std::vector<Tensor>& feats) {
  Tensor u1 = nn::upsample_bilinear(feats[1], 2);
  Tensor u2 = nn::upsample_bilinear(feats[2], 4);
  Tensor u3 = nn::upsample_bilinear(feats[3], 8);
  return nn::concat_channels({&feats[0], &u1, &u2, &u3});
}

/// Transpose of fuse_multiscale given the four input channel widths.
inline std::vector<Tensor> fuse_multiscale_backward(const Tensor& gfused,
                                                    const std::vector<int>& widths) {
  std::vector<Tensor> parts = nn::split_channels(gfused, widths);
  const int h = gfused.dim(1), w = gfused.dim(2);
  std::vector<Tensor> out(4);
  out[0] = std::move(parts[0]);
  out[1] = nn::upsample_bilinear_backward(parts[1], h / 2, w / 2, 2);
  out[2] = nn::upsample_bilinear_backward(parts[2], h / 4, w / 4, 4);
  out[3] = nn::upsample_bilinear_backward(parts[3], h / 8, w / 8, 8);
  return out;
}

}  // namespace nuseg
