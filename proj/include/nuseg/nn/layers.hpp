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

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "nuseg/core/rng.hpp"
#include "nuseg/core/tensor.hpp"

namespace nuseg::nn {

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

using ParamList = std::vector<ParamRef>;

using MatMap = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline float sigmoid(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

/// Two channels holding each cell's (x, y) position mapped linearly to
/// [-1, 1]; the leftmost column is exactly -1 and the rightmost exactly +1.
inline Tensor coord_channels(int height, int width) {
  Tensor out({2, height, width});
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      out.at(0, y, x) = width > 1 ? -1.0f + 2.0f * x / (width - 1) : 0.0f;
      out.at(1, y, x) = height > 1 ? -1.0f + 2.0f * y / (height - 1) : 0.0f;
    }
  return out;
}

inline Tensor concat_channels(const std::vector<const Tensor*>& parts) {
  const int h = parts[0]->dim(1), w = parts[0]->dim(2);
  int c_total = 0;
  for (const Tensor* p : parts) c_total += p->dim(0);
  Tensor out({c_total, h, w});
  float* dst = out.ptr();
  for (const Tensor* p : parts) {
    std::copy(p->ptr(), p->ptr() + p->numel(), dst);
    dst += p->numel();
  }
  return out;
}

inline std::vector<Tensor> split_channels(const Tensor& x, const std::vector<int>& sizes) {
  std::vector<Tensor> out;
  out.reserve(sizes.size());
  const float* src = x.ptr();
  for (int c : sizes) {
    Tensor t({c, x.dim(1), x.dim(2)});
    std::copy(src, src + t.numel(), t.ptr());
    src += t.numel();
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

class Conv2d {
 public:
  Conv2d() = default;
  // Convolutions feeding a normalization layer should run biasless; the norm
  // would cancel the bias and leave it without gradient.
  Conv2d(int in_ch, int out_ch, int ksize, int stride, int dilation, int pad, Rng& rng,
         bool with_bias = true)
      : in_ch_(in_ch), out_ch_(out_ch), ksize_(ksize), stride_(stride), dilation_(dilation),
        pad_(pad), with_bias_(with_bias) {
    w_ = Tensor({out_ch, in_ch * ksize * ksize});
    gw_ = Tensor({out_ch, in_ch * ksize * ksize});
    if (with_bias_) {
      b_ = Tensor({out_ch});
      gb_ = Tensor({out_ch});
    }
    const double sd = std::sqrt(2.0 / (in_ch * ksize * ksize));
    for (int64_t i = 0; i < w_.numel(); ++i) w_[i] = static_cast<float>(rng.normal(0.0, sd));
  }

  static Conv2d same3x3(int in_ch, int out_ch, int dilation, Rng& rng, bool with_bias = true) {
    return Conv2d(in_ch, out_ch, 3, 1, dilation, dilation, rng, with_bias);
  }
  static Conv2d down3x3(int in_ch, int out_ch, Rng& rng, bool with_bias = true) {
    return Conv2d(in_ch, out_ch, 3, 2, 1, 1, rng, with_bias);
  }
  static Conv2d pointwise(int in_ch, int out_ch, Rng& rng, bool with_bias = true) {
    return Conv2d(in_ch, out_ch, 1, 1, 1, 0, rng, with_bias);
  }

  int out_channels() const { return out_ch_; }
  int in_channels() const { return in_ch_; }
  Tensor& weight() { return w_; }
  Tensor& bias() { return b_; }

  int out_extent(int in) const {
    return (in + 2 * pad_ - dilation_ * (ksize_ - 1) - 1) / stride_ + 1;
  }

  Tensor forward(const Tensor& x) {
    x_saved_ = x;
    return forward_infer(x);
  }

  Tensor forward_infer(const Tensor& x) const {
    const int ho = out_extent(x.dim(1)), wo = out_extent(x.dim(2));
    Tensor y({out_ch_, ho, wo});
    const int64_t pixels = static_cast<int64_t>(ho) * wo;
    const int k2 = in_ch_ * ksize_ * ksize_;
    ConstMatMap wm(w_.ptr(), out_ch_, k2);
    MatMap ym(y.ptr(), out_ch_, pixels);
    if (ksize_ == 1 && stride_ == 1) {
      ConstMatMap xm(x.ptr(), in_ch_, pixels);
      ym.noalias() = wm * xm;
    } else {
      Tensor col = im2col(x, ho, wo);
      ConstMatMap cm(col.ptr(), k2, pixels);
      ym.noalias() = wm * cm;
    }
    if (with_bias_)
      for (int c = 0; c < out_ch_; ++c) ym.row(c).array() += b_[c];
    return y;
  }

  /// Accumulates parameter gradients and returns the input gradient.
  Tensor backward(const Tensor& gy) {
    const Tensor& x = x_saved_;
    const int ho = gy.dim(1), wo = gy.dim(2);
    const int64_t pixels = static_cast<int64_t>(ho) * wo;
    const int k2 = in_ch_ * ksize_ * ksize_;
    ConstMatMap gym(gy.ptr(), out_ch_, pixels);
    ConstMatMap wm(w_.ptr(), out_ch_, k2);
    MatMap gwm(gw_.ptr(), out_ch_, k2);
    if (with_bias_) {
      // fixed-order accumulation: vectorized reductions would depend on the
      // buffer's alignment and break run-to-run determinism
      for (int c = 0; c < out_ch_; ++c) {
        const float* row = gy.ptr() + static_cast<int64_t>(c) * pixels;
        double s = 0.0;
        for (int64_t i = 0; i < pixels; ++i) s += row[i];
        gb_[c] += static_cast<float>(s);
      }
    }

    Tensor gx({in_ch_, x.dim(1), x.dim(2)});
    if (ksize_ == 1 && stride_ == 1) {
      ConstMatMap xm(x.ptr(), in_ch_, pixels);
      gwm.noalias() += gym * xm.transpose();
      MatMap gxm(gx.ptr(), in_ch_, pixels);
      gxm.noalias() = wm.transpose() * gym;
    } else {
      Tensor col = im2col(x, ho, wo);
      ConstMatMap cm(col.ptr(), k2, pixels);
      gwm.noalias() += gym * cm.transpose();
      Tensor gcol({k2, static_cast<int>(pixels)});
      MatMap gcm(gcol.ptr(), k2, pixels);
      gcm.noalias() = wm.transpose() * gym;
      col2im(gcol, gx, ho, wo);
    }
    x_saved_ = Tensor();
    return gx;
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".w", &w_, &gw_});
    if (with_bias_) out.push_back({prefix + ".b", &b_, &gb_});
  }

 private:
  Tensor im2col(const Tensor& x, int ho, int wo) const {
    const int h = x.dim(1), w = x.dim(2);
    Tensor col({in_ch_ * ksize_ * ksize_, ho * wo});
    float* cp = col.ptr();
    for (int c = 0; c < in_ch_; ++c) {
      const float* xc = x.ptr() + static_cast<size_t>(c) * h * w;
      for (int ky = 0; ky < ksize_; ++ky) {
        for (int kx = 0; kx < ksize_; ++kx) {
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ + ky * dilation_ - pad_;
            float* row = cp + static_cast<size_t>(oy) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(row, row + wo, 0.0f);
              continue;
            }
            const float* src = xc + static_cast<size_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ + kx * dilation_ - pad_;
              row[ox] = (ix < 0 || ix >= w) ? 0.0f : src[ix];
            }
          }
          cp += static_cast<size_t>(ho) * wo;
        }
      }
    }
    return col;
  }

  void col2im(const Tensor& gcol, Tensor& gx, int ho, int wo) const {
    const int h = gx.dim(1), w = gx.dim(2);
    gx.zero();
    const float* cp = gcol.ptr();
    for (int c = 0; c < in_ch_; ++c) {
      float* xc = gx.ptr() + static_cast<size_t>(c) * h * w;
      for (int ky = 0; ky < ksize_; ++ky) {
        for (int kx = 0; kx < ksize_; ++kx) {
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ + ky * dilation_ - pad_;
            const float* row = cp + static_cast<size_t>(oy) * wo;
            if (iy < 0 || iy >= h) continue;
            float* dst = xc + static_cast<size_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ + kx * dilation_ - pad_;
              if (ix >= 0 && ix < w) dst[ix] += row[ox];
            }
          }
          cp += static_cast<size_t>(ho) * wo;
        }
      }
    }
  }

  int in_ch_ = 0, out_ch_ = 0, ksize_ = 0, stride_ = 1, dilation_ = 1, pad_ = 0;
  bool with_bias_ = true;
  Tensor w_, b_, gw_, gb_;
  Tensor x_saved_;
};

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

inline int group_count_for(int channels) {
  for (int g : {8, 4, 2})
    if (channels % g == 0) return g;
  return 1;
}

class GroupNorm {
 public:
  GroupNorm() = default;
  explicit GroupNorm(int channels)
      : channels_(channels), groups_(group_count_for(channels)),
        gamma_({channels}, 1.0f), beta_({channels}), ggamma_({channels}), gbeta_({channels}) {}

  Tensor forward(const Tensor& x) { return normalize(x, &xhat_, &inv_std_); }

  Tensor forward_infer(const Tensor& x) const { return normalize(x, nullptr, nullptr); }

  Tensor backward(const Tensor& gy) {
    const int h = xhat_.dim(1), w = xhat_.dim(2);
    const int cpg = channels_ / groups_;
    const int64_t plane = static_cast<int64_t>(h) * w;
    const int64_t m = plane * cpg;
    Tensor gx(xhat_.shape());
    for (int c = 0; c < channels_; ++c) {
      const float* gyc = gy.ptr() + c * plane;
      const float* xc = xhat_.ptr() + c * plane;
      double dg = 0.0, db = 0.0;
      for (int64_t i = 0; i < plane; ++i) {
        dg += static_cast<double>(gyc[i]) * xc[i];
        db += gyc[i];
      }
      ggamma_[c] += static_cast<float>(dg);
      gbeta_[c] += static_cast<float>(db);
    }
    for (int g = 0; g < groups_; ++g) {
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const float* gyc = gy.ptr() + c * plane;
        const float* xc = xhat_.ptr() + c * plane;
        const float gam = gamma_[c];
        for (int64_t i = 0; i < plane; ++i) {
          const double d = static_cast<double>(gyc[i]) * gam;
          sum_dxhat += d;
          sum_dxhat_xhat += d * xc[i];
        }
      }
      const float istd = inv_std_[g];
      const double inv_m = 1.0 / static_cast<double>(m);
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const float* gyc = gy.ptr() + c * plane;
        const float* xc = xhat_.ptr() + c * plane;
        float* gxc = gx.ptr() + c * plane;
        const float gam = gamma_[c];
        for (int64_t i = 0; i < plane; ++i) {
          const double dxhat = static_cast<double>(gyc[i]) * gam;
          gxc[i] = static_cast<float>(istd * (dxhat - inv_m * (sum_dxhat + xc[i] * sum_dxhat_xhat)));
        }
      }
    }
    xhat_ = Tensor();
    return gx;
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".gamma", &gamma_, &ggamma_});
    out.push_back({prefix + ".beta", &beta_, &gbeta_});
  }

 private:
  Tensor normalize(const Tensor& x, Tensor* save_xhat, std::vector<float>* save_istd) const {
    const int h = x.dim(1), w = x.dim(2);
    const int cpg = channels_ / groups_;
    const int64_t plane = static_cast<int64_t>(h) * w;
    const int64_t m = plane * cpg;
    Tensor y(x.shape());
    Tensor xhat(save_xhat ? x.shape() : std::vector<int>{1});
    std::vector<float> istds(static_cast<size_t>(groups_));
    for (int g = 0; g < groups_; ++g) {
      const float* xg = x.ptr() + static_cast<int64_t>(g) * cpg * plane;
      double sum = 0.0, sq = 0.0;
      for (int64_t i = 0; i < m; ++i) {
        sum += xg[i];
        sq += static_cast<double>(xg[i]) * xg[i];
      }
      const double mean = sum / m;
      const double var = std::max(0.0, sq / m - mean * mean);
      const float istd = static_cast<float>(1.0 / std::sqrt(var + 1e-5));
      istds[static_cast<size_t>(g)] = istd;
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const float* xc = x.ptr() + c * plane;
        float* yc = y.ptr() + c * plane;
        const float gam = gamma_[c], bet = beta_[c];
        float* xh = save_xhat ? xhat.ptr() + c * plane : nullptr;
        for (int64_t i = 0; i < plane; ++i) {
          const float v = (xc[i] - static_cast<float>(mean)) * istd;
          if (xh) xh[i] = v;
          yc[i] = gam * v + bet;
        }
      }
    }
    if (save_xhat) *save_xhat = std::move(xhat);
    if (save_istd) *save_istd = std::move(istds);
    return y;
  }

  int channels_ = 0, groups_ = 1;
  Tensor gamma_, beta_, ggamma_, gbeta_;
  Tensor xhat_;
  std::vector<float> inv_std_;
};

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

class ReLU {
 public:
  Tensor forward(const Tensor& x) {
    Tensor y = forward_infer(x);
    y_saved_ = y;
    return y;
  }
  Tensor forward_infer(const Tensor& x) const {
    Tensor y(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
    return y;
  }
  Tensor backward(const Tensor& gy) {
    Tensor gx(gy.shape());
    for (int64_t i = 0; i < gy.numel(); ++i) gx[i] = y_saved_[i] > 0.0f ? gy[i] : 0.0f;
    y_saved_ = Tensor();
    return gx;
  }

 private:
  Tensor y_saved_;
};

// ---------------------------------------------------------------------------
// Bilinear interpolation (integer scale factor, half-pixel centers)
// ---------------------------------------------------------------------------

struct BilinearTap {
  int y0, y1, x0, x1;
  float wy, wx;
};

inline BilinearTap bilinear_tap(int oy, int ox, int in_h, int in_w, int factor) {
  const float sy = std::min(std::max((oy + 0.5f) / factor - 0.5f, 0.0f), in_h - 1.0f);
  const float sx = std::min(std::max((ox + 0.5f) / factor - 0.5f, 0.0f), in_w - 1.0f);
  BilinearTap t;
  t.y0 = static_cast<int>(sy);
  t.x0 = static_cast<int>(sx);
  t.y1 = std::min(t.y0 + 1, in_h - 1);
  t.x1 = std::min(t.x0 + 1, in_w - 1);
  t.wy = sy - t.y0;
  t.wx = sx - t.x0;
  return t;
}

inline Tensor upsample_bilinear(const Tensor& x, int factor) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = h * factor, wo = w * factor;
  Tensor y({c, ho, wo});
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const BilinearTap t = bilinear_tap(oy, ox, h, w, factor);
      const float w00 = (1 - t.wy) * (1 - t.wx), w01 = (1 - t.wy) * t.wx;
      const float w10 = t.wy * (1 - t.wx), w11 = t.wy * t.wx;
      for (int ch = 0; ch < c; ++ch) {
        const float* xc = x.ptr() + static_cast<size_t>(ch) * h * w;
        y.at(ch, oy, ox) = w00 * xc[t.y0 * w + t.x0] + w01 * xc[t.y0 * w + t.x1] +
                           w10 * xc[t.y1 * w + t.x0] + w11 * xc[t.y1 * w + t.x1];
      }
    }
  }
  return y;
}

/// Transpose of upsample_bilinear: scatters output gradients back to the
/// coarse grid.
inline Tensor upsample_bilinear_backward(const Tensor& gy, int in_h, int in_w, int factor) {
  const int c = gy.dim(0), ho = gy.dim(1), wo = gy.dim(2);
  Tensor gx({c, in_h, in_w});
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const BilinearTap t = bilinear_tap(oy, ox, in_h, in_w, factor);
      const float w00 = (1 - t.wy) * (1 - t.wx), w01 = (1 - t.wy) * t.wx;
      const float w10 = t.wy * (1 - t.wx), w11 = t.wy * t.wx;
      for (int ch = 0; ch < c; ++ch) {
        float* gxc = gx.ptr() + static_cast<size_t>(ch) * in_h * in_w;
        const float g = gy.at(ch, oy, ox);
        gxc[t.y0 * in_w + t.x0] += w00 * g;
        gxc[t.y0 * in_w + t.x1] += w01 * g;
        gxc[t.y1 * in_w + t.x0] += w10 * g;
        gxc[t.y1 * in_w + t.x1] += w11 * g;
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// ConvBlock: 3x3 conv + group norm + relu
// ---------------------------------------------------------------------------

class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(int in_ch, int out_ch, Rng& rng)
      : conv_(Conv2d::same3x3(in_ch, out_ch, 1, rng, false)), gn_(out_ch) {}
  ConvBlock(int in_ch, int out_ch, int stride, Rng& rng)
      : conv_(stride == 2 ? Conv2d::down3x3(in_ch, out_ch, rng, false)
                          : Conv2d::same3x3(in_ch, out_ch, 1, rng, false)),
        gn_(out_ch) {}

  Tensor forward(const Tensor& x) { return relu_.forward(gn_.forward(conv_.forward(x))); }
  Tensor forward_infer(const Tensor& x) const {
    return relu_.forward_infer(gn_.forward_infer(conv_.forward_infer(x)));
  }
  Tensor backward(const Tensor& gy) {
    return conv_.backward(gn_.backward(relu_.backward(gy)));
  }
  void collect(const std::string& prefix, ParamList& out) {
    conv_.collect(prefix + ".conv", out);
    gn_.collect(prefix + ".gn", out);
  }
  int out_channels() const { return conv_.out_channels(); }

 private:
  Conv2d conv_;
  GroupNorm gn_;
  ReLU relu_;
};

}  // namespace nuseg::nn
