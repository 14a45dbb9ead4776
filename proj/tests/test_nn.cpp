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
#include <catch2/catch_amalgamated.hpp>

#include "nuseg/nn/adamw.hpp"
#include "nuseg/nn/layers.hpp"
#include "testutil.hpp"

using namespace nuseg;
using testutil::fd_gradient;
using testutil::max_rel_err;
using testutil::random_tensor;

namespace {

// Direct convolution, no im2col: the independent route.
Tensor conv_reference(const Tensor& x, const Tensor& w, const Tensor& b, int out_ch, int k,
                      int stride, int dilation, int pad) {
  const int in_ch = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int ho = (h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
  const int wo = (wd + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
  Tensor y({out_ch, ho, wo});
  for (int oc = 0; oc < out_ch; ++oc)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        double acc = b[oc];
        for (int ic = 0; ic < in_ch; ++ic)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride + ky * dilation - pad;
              const int ix = ox * stride + kx * dilation - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              acc += static_cast<double>(x.at(ic, iy, ix)) *
                     w[(static_cast<int64_t>(oc) * in_ch + ic) * k * k + ky * k + kx];
            }
        y.at(oc, oy, ox) = static_cast<float>(acc);
      }
  return y;
}

double weighted_sum(const Tensor& y, const Tensor& r) {
  double s = 0.0;
  for (int64_t i = 0; i < y.numel(); ++i) s += static_cast<double>(y[i]) * r[i];
  return s;
}

}  // namespace

TEST_CASE("conv2d forward matches direct convolution") {
  Rng rng(11);
  struct Case {
    int k, stride, dilation, pad;
  };
  for (const Case& c : {Case{3, 1, 1, 1}, Case{3, 1, 2, 2}, Case{3, 2, 1, 1}, Case{1, 1, 1, 0},
                        Case{3, 1, 8, 8}}) {
    nn::Conv2d conv(3, 4, c.k, c.stride, c.dilation, c.pad, rng);
    Tensor x = random_tensor({3, 9, 10}, rng);
    Tensor got = conv.forward_infer(x);
    Tensor want = conv_reference(x, conv.weight(), conv.bias(), 4, c.k, c.stride, c.dilation, c.pad);
    REQUIRE(got.shape() == want.shape());
    REQUIRE(testutil::max_abs_diff(got, want) < 1e-4);
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(23);
  for (int variant = 0; variant < 3; ++variant) {
    const int k = variant == 2 ? 1 : 3;
    const int dil = variant == 1 ? 2 : 1;
    nn::Conv2d conv(2, 3, k, 1, dil, k == 1 ? 0 : dil, rng);
    Tensor x = random_tensor({2, 6, 5}, rng);
    Tensor r = random_tensor(conv.forward_infer(x).shape(), rng);

    Tensor y = conv.forward(x);
    Tensor gx = conv.backward(r);

    // h = 1e-2: large enough to clear float32 rounding of the activations
    auto loss_x = [&](const Tensor& xv) { return weighted_sum(conv.forward_infer(xv), r); };
    REQUIRE(max_rel_err(gx, fd_gradient(loss_x, x, 1e-2), 1e-2) < 1e-2);

    nn::ParamList params;
    conv.collect("conv", params);
    for (const auto& p : params) {
      Tensor* value = p.value;
      auto loss_w = [&](const Tensor& wv) {
        Tensor saved = *value;
        *value = wv;
        const double l = weighted_sum(conv.forward_infer(x), r);
        *value = saved;
        return l;
      };
      REQUIRE(max_rel_err(*p.grad, fd_gradient(loss_w, *value, 1e-2), 1e-2) < 1e-2);
    }
  }
}

TEST_CASE("group norm normalizes and its gradient checks out") {
  Rng rng(31);
  nn::GroupNorm gn(8);
  Tensor x = random_tensor({8, 4, 5}, rng, -2.0, 3.0);
  Tensor y = gn.forward_infer(x);
  // gamma=1, beta=0 at construction: each group of 2 channels is standardized
  const int cpg = 2;
  for (int g = 0; g < 4; ++g) {
    double sum = 0.0, sq = 0.0;
    int64_t n = 0;
    for (int c = g * cpg; c < (g + 1) * cpg; ++c)
      for (int yy = 0; yy < 4; ++yy)
        for (int xx = 0; xx < 5; ++xx) {
          const double v = y.at(c, yy, xx);
          sum += v;
          sq += v * v;
          ++n;
        }
    REQUIRE(std::fabs(sum / n) < 1e-4);
    REQUIRE(std::fabs(sq / n - 1.0) < 1e-2);
  }

  Tensor r = random_tensor(x.shape(), rng);
  gn.forward(x);
  Tensor gx = gn.backward(r);
  auto loss_x = [&](const Tensor& xv) { return weighted_sum(gn.forward_infer(xv), r); };
  REQUIRE(max_rel_err(gx, fd_gradient(loss_x, x, 1e-2), 1e-2) < 1e-2);

  nn::ParamList params;
  gn.collect("gn", params);
  for (const auto& p : params) {
    Tensor* value = p.value;
    auto loss_w = [&](const Tensor& wv) {
      Tensor saved = *value;
      *value = wv;
      const double l = weighted_sum(gn.forward_infer(x), r);
      *value = saved;
      return l;
    };
    REQUIRE(max_rel_err(*p.grad, fd_gradient(loss_w, *value, 1e-2), 1e-2) < 1e-2);
  }
}

TEST_CASE("bilinear upsample preserves constants and is the adjoint of its backward") {
  Rng rng(7);
  Tensor flat({3, 4, 4}, 2.5f);
  for (int f : {2, 4, 8}) {
    Tensor up = nn::upsample_bilinear(flat, f);
    for (int64_t i = 0; i < up.numel(); ++i) REQUIRE(up[i] == Catch::Approx(2.5f));
  }
  // adjoint identity <up(x), y> == <x, up_back(y)>
  Tensor x = random_tensor({2, 5, 6}, rng);
  for (int f : {2, 4}) {
    Tensor y = random_tensor({2, 5 * f, 6 * f}, rng);
    const double lhs = weighted_sum(nn::upsample_bilinear(x, f), y);
    const double rhs = weighted_sum(x, nn::upsample_bilinear_backward(y, 5, 6, f));
    REQUIRE(lhs == Catch::Approx(rhs).epsilon(1e-4));
  }
}

TEST_CASE("bilinear upsample of a delta matches the analytic stencil") {
  // independent oracle: evaluate the interpolation weights analytically
  const int h = 4, w = 5, f = 4;
  Tensor x({1, h, w});
  const int cy = 2, cx = 1;
  x.at(0, cy, cx) = 1.0f;
  Tensor up = nn::upsample_bilinear(x, f);
  for (int oy = 0; oy < h * f; ++oy)
    for (int ox = 0; ox < w * f; ++ox) {
      const double sy = std::clamp((oy + 0.5) / f - 0.5, 0.0, h - 1.0);
      const double sx = std::clamp((ox + 0.5) / f - 0.5, 0.0, w - 1.0);
      const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
      const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double wy = sy - y0, wx = sx - x0;
      double want = 0.0;
      if (y0 == cy && x0 == cx) want += (1 - wy) * (1 - wx);
      if (y0 == cy && x1 == cx) want += (1 - wy) * wx;
      if (y1 == cy && x0 == cx) want += wy * (1 - wx);
      if (y1 == cy && x1 == cx) want += wy * wx;
      REQUIRE(up.at(0, oy, ox) == Catch::Approx(want).margin(1e-6));
    }
}

TEST_CASE("coordinate channels hit -1 and +1 exactly at the borders") {
  Tensor c = nn::coord_channels(7, 9);
  for (int y = 0; y < 7; ++y) {
    REQUIRE(c.at(0, y, 0) == -1.0f);
    REQUIRE(c.at(0, y, 8) == 1.0f);
  }
  for (int x = 0; x < 9; ++x) {
    REQUIRE(c.at(1, 0, x) == -1.0f);
    REQUIRE(c.at(1, 6, x) == 1.0f);
  }
}

TEST_CASE("concat/split round trip") {
  Rng rng(3);
  Tensor a = random_tensor({2, 3, 4}, rng), b = random_tensor({5, 3, 4}, rng);
  Tensor cat = nn::concat_channels({&a, &b});
  REQUIRE(cat.dim(0) == 7);
  auto parts = nn::split_channels(cat, {2, 5});
  REQUIRE(testutil::max_abs_diff(parts[0], a) == 0.0);
  REQUIRE(testutil::max_abs_diff(parts[1], b) == 0.0);
}

TEST_CASE("adamw matches a hand-stepped reference") {
  Tensor w({1}, 2.0f), g({1}, 0.5f);
  nn::ParamList params{{"w", &w, &g}};
  nn::AdamW opt;
  opt.step(params, 0.1, 0.01);
  // t=1: m=0.05, v=2.5e-4; bias correction gives mhat=0.5, vhat=0.25
  const double mhat = 0.5, vhat = 0.25;
  const double expected = 2.0 - 0.1 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * 2.0);
  REQUIRE(w[0] == Catch::Approx(expected).epsilon(1e-6));
}

TEST_CASE("grad norm clipping rescales to the threshold") {
  Tensor w1({2}), g1({2});
  g1[0] = 3.0f;
  g1[1] = 4.0f;  // norm 5
  nn::ParamList params{{"w", &w1, &g1}};
  nn::clip_grad_norm(params, 1.0);
  REQUIRE(std::sqrt(g1[0] * g1[0] + g1[1] * g1[1]) == Catch::Approx(1.0).epsilon(1e-5));
  nn::clip_grad_norm(params, 10.0);  // below threshold: untouched
  REQUIRE(std::sqrt(g1[0] * g1[0] + g1[1] * g1[1]) == Catch::Approx(1.0).epsilon(1e-5));
}
