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

#include "nuseg/losses/losses.hpp"
#include "testutil.hpp"

using namespace nuseg;
using testutil::fd_gradient;
using testutil::random_tensor;

TEST_CASE("focal loss: near-perfect prediction is near zero") {
  Tensor y({1, 4, 4});
  y.at(0, 2, 2) = 1.0f;
  Tensor p({1, 4, 4}, 1e-6f);
  p.at(0, 2, 2) = 1.0f - 1e-6f;
  REQUIRE(focal_keypoint_loss(p, y) < 1e-4);
}

TEST_CASE("focal loss frozen values") {
  // single positive cell predicted at 0.5: (1-0.5)^2 * ln 2
  Tensor y1({1, 1, 1}, 1.0f), p1({1, 1, 1}, 0.5f);
  REQUIRE(std::fabs(focal_keypoint_loss(p1, y1) - 0.25 * std::log(2.0)) < 1e-9);

  // pure background 2x2, prediction 0.5 everywhere: 4 * 0.25 * ln 2 / 1
  Tensor y2({1, 2, 2}), p2({1, 2, 2}, 0.5f);
  REQUIRE(std::fabs(focal_keypoint_loss(p2, y2) - std::log(2.0)) < 1e-9);
}

TEST_CASE("focal loss sign structure: improves toward the target on both cell kinds") {
  Tensor y({1, 2, 2});
  y.at(0, 0, 0) = 1.0f;
  Tensor p({1, 2, 2}, 0.4f);
  Tensor g(p.shape());
  focal_keypoint_loss(p, y, 2.0, 4.0, &g);
  REQUIRE(g.at(0, 0, 0) < 0.0f);  // decreasing in the prediction at the peak
  REQUIRE(g.at(0, 0, 1) > 0.0f);  // increasing at pure background
  REQUIRE(focal_keypoint_loss(p, y) >= 0.0);
}

TEST_CASE("focal and dice gradients match finite differences to 1e-4") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor y({1, 8, 8});
    const int npos = rng.uniform_int(0, 4);
    for (int i = 0; i < npos; ++i) y.at(0, rng.uniform_int(0, 7), rng.uniform_int(0, 7)) = 1.0f;
    for (int64_t i = 0; i < y.numel(); ++i)
      if (y[i] != 1.0f && rng.bernoulli(0.3)) y[i] = static_cast<float>(rng.uniform(0.0, 0.95));
    Tensor p = random_tensor({1, 8, 8}, rng, 0.05, 0.95);

    Tensor g(p.shape());
    focal_keypoint_loss(p, y, 2.0, 4.0, &g);
    Tensor fd = fd_gradient([&](const Tensor& pv) { return focal_keypoint_loss(pv, y); }, p, 1e-4);
    REQUIRE(testutil::max_rel_err(g, fd, 1e-6) < 1e-4);

    Tensor gt({8, 8});
    for (int64_t i = 0; i < gt.numel(); ++i) gt[i] = rng.bernoulli(0.4) ? 1.0f : 0.0f;
    Tensor pm = random_tensor({8, 8}, rng, 0.01, 0.99);
    Tensor gd(pm.shape());
    soft_dice_loss(pm, gt, &gd);
    Tensor fdd = fd_gradient([&](const Tensor& pv) { return soft_dice_loss(pv, gt); }, pm, 1e-4);
    REQUIRE(testutil::max_rel_err(gd, fdd, 1e-6) < 1e-4);
  }
}

TEST_CASE("bce gradient matches finite differences") {
  Rng rng(77);
  Tensor y = random_tensor({1, 6, 6}, rng, 0.0, 1.0);
  Tensor p = random_tensor({1, 6, 6}, rng, 0.05, 0.95);
  Tensor g(p.shape());
  bce_keypoint_loss(p, y, &g);
  Tensor fd = fd_gradient([&](const Tensor& pv) { return bce_keypoint_loss(pv, y); }, p, 1e-4);
  REQUIRE(testutil::max_rel_err(g, fd, 1e-6) < 1e-4);
}

TEST_CASE("soft dice frozen values and bounds") {
  Tensor g({10, 10});
  for (int i = 0; i < 100; ++i) g[i] = i < 50 ? 1.0f : 0.0f;
  Tensor same = g;
  REQUIRE(std::fabs(soft_dice_loss(same, g)) < 1e-5);

  Tensor disjoint({10, 10});
  for (int i = 50; i < 100; ++i) disjoint[i] = 1.0f;
  REQUIRE(soft_dice_loss(disjoint, g) == Catch::Approx(1.0).margin(1e-9));

  // p = 0.5 on the gt support (|g| = 100): 1 - 2*50 / (25 + 100) = 0.6? no:
  // 1 - 100/125 = 0.2
  Tensor g2({20, 20});
  for (int i = 0; i < 100; ++i) g2[i] = 1.0f;
  Tensor p2({20, 20});
  for (int i = 0; i < 100; ++i) p2[i] = 0.5f;
  REQUIRE(soft_dice_loss(p2, g2) == Catch::Approx(0.2).margin(1e-6));

  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    Tensor pr = random_tensor({9, 9}, rng, 0.0, 1.0);
    Tensor gr({9, 9});
    for (int64_t i = 0; i < gr.numel(); ++i) gr[i] = rng.bernoulli(0.5) ? 1.0f : 0.0f;
    const double l = soft_dice_loss(pr, gr);
    REQUIRE(l >= 0.0);
    REQUIRE(l <= 1.0);
  }
}

TEST_CASE("soft dice is invariant under a simultaneous pixel permutation") {
  Rng rng(9);
  Tensor p = random_tensor({6, 6}, rng, 0.0, 1.0);
  Tensor g({6, 6});
  for (int64_t i = 0; i < g.numel(); ++i) g[i] = rng.bernoulli(0.5) ? 1.0f : 0.0f;
  std::vector<int> perm(36);
  for (int i = 0; i < 36; ++i) perm[static_cast<size_t>(i)] = i;
  rng.shuffle(perm);
  Tensor p2({6, 6}), g2({6, 6});
  for (int i = 0; i < 36; ++i) {
    p2[perm[static_cast<size_t>(i)]] = p[i];
    g2[perm[static_cast<size_t>(i)]] = g[i];
  }
  REQUIRE(soft_dice_loss(p, g) == Catch::Approx(soft_dice_loss(p2, g2)).margin(1e-12));
}

namespace {

InstanceAnnotation two_disk_annotation() {
  InstanceAnnotation ann(16, 16, 2);
  for (int y = 2; y <= 6; ++y)
    for (int x = 2; x <= 6; ++x) ann.id_at(y, x) = 1;
  for (int y = 9; y <= 13; ++y)
    for (int x = 9; x <= 13; ++x) ann.id_at(y, x) = 2;
  ann.class_of = {1, 2};
  return ann;
}

}  // namespace

TEST_CASE("mask loss: zero positives yields zero") {
  InstanceAnnotation ann(16, 16, 2);
  HeatmapTarget t;
  t.stride = 4;
  Tensor k({3, 4, 4}), f({3, 16, 16});
  REQUIRE(mask_loss_dynamic(k, f, t, ann) == 0.0);
}

TEST_CASE("mask loss: a perfect dynamic mask scores near zero") {
  InstanceAnnotation ann = two_disk_annotation();
  HeatmapTarget t;
  t.stride = 4;
  t.positives = {{1, 1, 1, 1}};  // cell (1,1) supervises instance 1
  Tensor f({2, 16, 16});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) f.at(0, y, x) = ann.id_at(y, x) == 1 ? 20.0f : -20.0f;
  Tensor k({2, 4, 4});
  k.at(0, 1, 1) = 1.0f;  // select channel 0
  REQUIRE(mask_loss_dynamic(k, f, t, ann) < 1e-6);
}

TEST_CASE("mask loss: duplicated positives of one instance average to the single value") {
  InstanceAnnotation ann = two_disk_annotation();
  Rng rng(3);
  Tensor f = random_tensor({2, 16, 16}, rng, -1.0, 1.0);
  Tensor k({2, 4, 4});
  k.at(0, 1, 1) = 0.7f;
  k.at(1, 1, 1) = -0.4f;
  k.at(0, 2, 1) = 0.7f;
  k.at(1, 2, 1) = -0.4f;  // identical kernel at a second cell
  HeatmapTarget one;
  one.stride = 4;
  one.positives = {{1, 1, 1, 1}};
  HeatmapTarget two;
  two.stride = 4;
  two.positives = {{1, 1, 1, 1}, {1, 2, 1, 1}};
  REQUIRE(mask_loss_dynamic(k, f, two, ann) ==
          Catch::Approx(mask_loss_dynamic(k, f, one, ann)).margin(1e-12));
}

TEST_CASE("mask loss gradients match finite differences") {
  Rng rng(31);
  InstanceAnnotation ann = two_disk_annotation();
  HeatmapTarget t;
  t.stride = 4;
  t.positives = {{1, 1, 1, 1}, {3, 3, 2, 2}};
  Tensor k = random_tensor({3, 4, 4}, rng, -1.0, 1.0);
  Tensor f = random_tensor({3, 16, 16}, rng, -1.0, 1.0);
  Tensor dk(k.shape()), df(f.shape());
  mask_loss_dynamic(k, f, t, ann, &dk, &df);
  Tensor fdk =
      fd_gradient([&](const Tensor& kv) { return mask_loss_dynamic(kv, f, t, ann); }, k, 1e-3);
  Tensor fdf =
      fd_gradient([&](const Tensor& fv) { return mask_loss_dynamic(k, fv, t, ann); }, f, 1e-3);
  REQUIRE(testutil::max_rel_err(dk, fdk, 1e-4) < 2e-3);
  REQUIRE(testutil::max_rel_err(df, fdf, 1e-4) < 2e-3);
}

TEST_CASE("standard-branch mask loss gradient matches finite differences") {
  Rng rng(37);
  InstanceAnnotation ann = two_disk_annotation();
  HeatmapTarget t;
  t.stride = 4;
  t.positives = {{1, 1, 1, 1}, {3, 3, 2, 2}};
  Tensor stack = random_tensor({16, 4, 4}, rng, -1.0, 1.0);
  Tensor ds(stack.shape());
  mask_loss_standard(stack, 4, t, ann, &ds);
  Tensor fd = fd_gradient([&](const Tensor& sv) { return mask_loss_standard(sv, 4, t, ann); },
                          stack, 1e-3);
  REQUIRE(testutil::max_rel_err(ds, fd, 1e-4) < 2e-3);
}

TEST_CASE("total loss composition and clamp safety") {
  Rng rng(55);
  InstanceAnnotation ann = two_disk_annotation();
  HeatmapTarget t = render_heatmap(ann, 16, 16, 4, 0.5f);
  NetworkOutput out;
  out.stride = 4;
  out.heatmap = random_tensor({2, 4, 4}, rng, 0.05, 0.95);
  out.kernels = random_tensor({3, 4, 4}, rng, -1.0, 1.0);
  out.feature = random_tensor({3, 16, 16}, rng, -1.0, 1.0);

  LossBreakdown zero_lambda = total_loss(out, t, ann, 0.0);
  REQUIRE(zero_lambda.total == Catch::Approx(zero_lambda.keypoint_loss).margin(1e-12));

  LossBreakdown full = total_loss(out, t, ann, 1.0);
  const double k = focal_keypoint_loss(out.heatmap, t.y);
  const double m = mask_loss_dynamic(out.kernels, out.feature, t, ann);
  REQUIRE(std::fabs(full.total - (k + m)) < 1e-7);
  REQUIRE(full.n_pos_m == static_cast<int>(t.positives.size()));
  REQUIRE(full.n_pos_k >= 1);

  // clamp boundaries stay finite
  Tensor extreme({2, 4, 4});
  for (int64_t i = 0; i < extreme.numel(); ++i) extreme[i] = i % 2 ? 0.0f : 1.0f;
  out.heatmap = extreme;
  LossBreakdown lb = total_loss(out, t, ann, 1.0);
  REQUIRE(std::isfinite(lb.total));
}

TEST_CASE("zero keypoint and mask losses give zero total") {
  InstanceAnnotation ann(16, 16, 1);  // no instances
  HeatmapTarget t = render_heatmap(ann, 16, 16, 4, 0.5f);
  NetworkOutput out;
  out.stride = 4;
  out.heatmap = Tensor({1, 4, 4}, 1e-6f);  // matches the all-zero target after clamping
  out.kernels = Tensor({3, 4, 4});
  out.feature = Tensor({3, 16, 16});
  LossBreakdown lb = total_loss(out, t, ann, 1.0);
  REQUIRE(lb.mask_loss == 0.0);
  REQUIRE(lb.total < 1e-9);
}
