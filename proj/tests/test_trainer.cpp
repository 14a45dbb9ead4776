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

#include "nuseg/data/synthetic.hpp"
#include "nuseg/train/trainer.hpp"
#include "testutil.hpp"

using namespace nuseg;

namespace {

SyntheticConfig data_cfg(int images, uint64_t seed, int size = 64) {
  SyntheticConfig s;
  s.image_size = size;
  s.num_images = images;
  s.min_instances = 3;
  s.max_instances = 6;
  s.axis_min = 4;
  s.axis_max = 7;
  s.num_classes = 2;
  s.seed = seed;
  return s;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.num_classes = 2;
  m.embed_dim = 16;
  m.head_depth = 2;
  m.head_channels = 32;
  m.backbone = "hr-small";
  m.neck = "jpfm-shared";
  m.jpfm_branch_channels = 16;
  m.jpfm_out_channels = 32;
  m.init_seed = 3;
  return m;
}

TrainConfig tiny_train(int epochs, uint64_t seed = 1) {
  TrainConfig t;
  t.epochs = epochs;
  t.base_lr = 1e-3;
  t.batch_size = 4;
  t.lr_drop_epochs = {};
  t.val_fraction = 0.25;
  t.seed = seed;
  t.augment.enabled = false;
  return t;
}

InferConfig tile64() {
  InferConfig i;
  i.tile = 64;
  i.overlap = 32;
  return i;
}

}  // namespace

TEST_CASE("lr schedule: divide by ten at the configured epochs") {
  TrainConfig cfg;
  cfg.base_lr = 1e-4;
  cfg.lr_drop_epochs = {80, 90};
  cfg.lr_drop_factor = 0.1;
  REQUIRE(lr_at_epoch(cfg, 1) == Catch::Approx(1e-4));
  REQUIRE(lr_at_epoch(cfg, 79) == Catch::Approx(1e-4));
  REQUIRE(lr_at_epoch(cfg, 80) == Catch::Approx(1e-5));
  REQUIRE(lr_at_epoch(cfg, 85) == Catch::Approx(1e-5));
  REQUIRE(lr_at_epoch(cfg, 90) == Catch::Approx(1e-6));
  REQUIRE(lr_at_epoch(cfg, 95) == Catch::Approx(1e-6));
}

TEST_CASE("one epoch on eight images: log entry and checkpoints written") {
  testutil::TempDir tmp("train_1ep");
  Dataset ds = generate_synthetic(data_cfg(8, 21));
  TrainResult r = train(ds, tiny_model(), tiny_train(1), tile64(), tmp.str());
  REQUIRE(r.log.size() == 1);
  REQUIRE(r.log[0].epoch == 1);
  REQUIRE(std::filesystem::exists(r.final_path));
  REQUIRE(std::filesystem::exists(r.best_path));
  REQUIRE(std::filesystem::exists(tmp.path() / "training_log.txt"));
  LoadedCheckpoint ck = load_checkpoint(r.final_path);
  REQUIRE(ck.meta.epoch == 1);
  REQUIRE(ck.adam_state.size() > 0);
}

TEST_CASE("zero mask weight leaves the kernel-head output conv without gradient") {
  Dataset ds = generate_synthetic(data_cfg(2, 5));
  Network net(tiny_model());
  const Sample& s = ds.samples[0];
  HeatmapTarget target = render_heatmap(s.annotation, 64, 64, 4, 0.5f);
  NetworkOutput out = net.forward(s.image.to_tensor());

  Tensor dheat(out.heatmap.shape());
  focal_keypoint_loss(out.heatmap, target.y, 2.0, 4.0, &dheat);
  Tensor dk(out.kernels.shape()), df(out.feature.shape());
  mask_loss_dynamic(out.kernels, out.feature, target, s.annotation, &dk, &df);
  const double lambda_mask = 0.0;  // trainer scales mask gradients by lambda
  for (int64_t i = 0; i < dk.numel(); ++i) dk[i] *= static_cast<float>(lambda_mask);
  for (int64_t i = 0; i < df.numel(); ++i) df[i] *= static_cast<float>(lambda_mask);
  net.backward(out, dheat, dk, df);

  const Tensor* g = net.kernel_head_out_grad();
  REQUIRE(g != nullptr);
  for (int64_t i = 0; i < g->numel(); ++i) REQUIRE((*g)[i] == 0.0f);
}

TEST_CASE("gt-identity evaluation is perfect; empty set and class mismatch are rejected") {
  Dataset ds = generate_synthetic(data_cfg(3, 9));
  Network net(tiny_model());
  EvalReport r = evaluate(net, ds, tile64(), /*gt_identity=*/true);
  REQUIRE(r.mpq == 1.0);
  REQUIRE(r.bpq == 1.0);

  Dataset empty;
  empty.class_names = ds.class_names;
  REQUIRE_THROWS_AS(evaluate(net, empty, tile64()), std::invalid_argument);

  Dataset wrong = ds;
  wrong.class_names.push_back("extra");
  REQUIRE_THROWS_AS(evaluate(net, wrong, tile64()), ConfigError);
}

TEST_CASE("overfitting one image halves the loss within 200 steps") {
  testutil::TempDir tmp("overfit");
  Dataset ds = generate_synthetic(data_cfg(1, 11));
  TrainConfig tcfg = tiny_train(200);
  tcfg.batch_size = 1;
  tcfg.val_fraction = 0.0;
  TrainResult r = train(ds, tiny_model(), tcfg, tile64(), tmp.str());
  double best = r.log.front().total;
  for (const auto& l : r.log) best = std::min(best, l.total);
  REQUIRE(best <= 0.5 * r.log.front().total);
}

TEST_CASE("training twice with one seed is bit-identical; resume matches uninterrupted") {
  testutil::TempDir tmp_a("det_a"), tmp_b("det_b"), tmp_c("det_c"), tmp_d("det_d");
  Dataset ds = generate_synthetic(data_cfg(8, 33));

  TrainResult a = train(ds, tiny_model(), tiny_train(4, 7), tile64(), tmp_a.str());
  TrainResult b = train(ds, tiny_model(), tiny_train(4, 7), tile64(), tmp_b.str());
  REQUIRE(a.log.back().total == b.log.back().total);
  REQUIRE(a.log.back().val_bpq == b.log.back().val_bpq);
  LoadedCheckpoint ca = load_checkpoint(a.final_path);
  LoadedCheckpoint cb = load_checkpoint(b.final_path);
  nn::ParamList pa = ca.net->params(), pb = cb.net->params();
  for (size_t i = 0; i < pa.size(); ++i)
    REQUIRE(pa[i].value->raw() == pb[i].value->raw());

  // interrupted at epoch 2, resumed to epoch 4: identical to the straight run
  TrainConfig first2 = tiny_train(2, 7);
  TrainResult half = train(ds, tiny_model(), first2, tile64(), tmp_c.str());
  TrainConfig last2 = tiny_train(4, 7);
  TrainResult resumed =
      train(ds, tiny_model(), last2, tile64(), tmp_d.str(), {}, nullptr, half.final_path);
  REQUIRE(resumed.log.size() == 2);  // epochs 3 and 4
  REQUIRE(resumed.log.front().epoch == 3);
  REQUIRE(resumed.log.back().total == a.log.back().total);
  LoadedCheckpoint cr = load_checkpoint(resumed.final_path);
  nn::ParamList pr = cr.net->params();
  for (size_t i = 0; i < pa.size(); ++i)
    REQUIRE(pa[i].value->raw() == pr[i].value->raw());
}

TEST_CASE("resume reproduces the remaining lr schedule") {
  testutil::TempDir tmp_a("lr_a"), tmp_b("lr_b");
  Dataset ds = generate_synthetic(data_cfg(4, 13));
  TrainConfig cfg = tiny_train(6, 3);
  cfg.lr_drop_epochs = {4, 5};
  TrainResult full = train(ds, tiny_model(), cfg, tile64(), tmp_a.str());

  TrainConfig first3 = cfg;
  first3.epochs = 3;
  first3.lr_drop_epochs = {};  // drops land after epoch 3 anyway
  TrainResult half = train(ds, tiny_model(), first3, tile64(), tmp_b.str());
  testutil::TempDir tmp_c("lr_c");
  TrainResult resumed = train(ds, tiny_model(), cfg, tile64(), tmp_c.str(), {}, nullptr,
                              half.final_path);
  REQUIRE(resumed.log.size() == 3);
  for (size_t i = 0; i < resumed.log.size(); ++i) {
    REQUIRE(resumed.log[i].epoch == full.log[i + 3].epoch);
    REQUIRE(resumed.log[i].lr == full.log[i + 3].lr);
  }
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  testutil::TempDir tmp("abort");
  Dataset ds = generate_synthetic(data_cfg(2, 3));
  TrainConfig cfg = tiny_train(1);
  cfg.base_lr = 1e30;  // one step is fine; the blowup must be detected later
  cfg.epochs = 3;
  cfg.batch_size = 1;
  cfg.val_fraction = 0.0;
  cfg.grad_clip = 0.0;  // disable clipping so the divergence is immediate
  bool threw = false;
  try {
    train(ds, tiny_model(), cfg, tile64(), tmp.str());
  } catch (const NumericalError& e) {
    threw = true;
    REQUIRE(std::string(e.what()).find("epoch") != std::string::npos);
  }
  REQUIRE(threw);
}

TEST_CASE("training the standard-segmentor ablation runs end to end") {
  testutil::TempDir tmp("std_seg");
  Dataset ds = generate_synthetic(data_cfg(4, 17));
  ModelConfig m = tiny_model();
  m.segmentor = "standard";
  m.standard_grid = 16;  // 64 / stride 4
  TrainConfig t = tiny_train(1);
  TrainResult r = train(ds, m, t, tile64(), tmp.str());
  REQUIRE(r.log.size() == 1);
  REQUIRE(std::isfinite(r.log[0].total));
  // decode path works off the standard stack
  LoadedCheckpoint ck = load_checkpoint(r.final_path);
  EvalReport rep = evaluate(*ck.net, ds, tile64());
  REQUIRE(rep.n_images == 4);
}

TEST_CASE("centerpoint-map and bce ablation switches train") {
  testutil::TempDir tmp("abl");
  Dataset ds = generate_synthetic(data_cfg(4, 19));
  TrainConfig t = tiny_train(1);
  t.detector_target = "centerpoint-map";
  t.detector_loss = "bce";
  TrainResult r = train(ds, tiny_model(), t, tile64(), tmp.str());
  REQUIRE(std::isfinite(r.log[0].total));
}

TEST_CASE("a trained toy model shifts its heatmap argmax with a 4 px input shift") {
  // single-nucleus images; the detector should be translation-equivariant to
  // within one stride-4 cell
  testutil::TempDir tmp("equivariance");
  SyntheticConfig scfg;
  scfg.image_size = 64;
  scfg.num_images = 48;
  scfg.min_instances = 1;
  scfg.max_instances = 1;
  scfg.axis_min = 5;
  scfg.axis_max = 8;
  scfg.num_classes = 1;
  scfg.seed = 606;
  Dataset ds = generate_synthetic(scfg);

  ModelConfig m = tiny_model();
  m.num_classes = 1;
  TrainConfig t = tiny_train(8, 2);
  t.batch_size = 8;
  t.val_fraction = 0.0;
  TrainResult r = train(ds, m, t, tile64(), tmp.str());
  LoadedCheckpoint ck = load_checkpoint(r.final_path);

  // clean probe image: one disk on a flat background, then the same disk
  // 4 px to the right
  auto probe = [&](int cx) {
    Image img(64, 64);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        img.at(y, x, 0) = 0.86f;
        img.at(y, x, 1) = 0.76f;
        img.at(y, x, 2) = 0.84f;
      }
    const auto color = synthetic_class_color(1);
    for (int y = 24; y <= 38; ++y)
      for (int x = cx - 7; x <= cx + 7; ++x)
        if ((x - cx) * (x - cx) + (y - 31) * (y - 31) <= 49)
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
    return img;
  };
  auto argmax_cell = [&](const Image& img) {
    NetworkOutput out = ck.net->forward_infer(img.to_tensor());
    int best = 0;
    for (int64_t i = 1; i < out.heatmap.numel(); ++i)
      if (out.heatmap[i] > out.heatmap[best]) best = static_cast<int>(i);
    return std::pair<int, int>{best % 16, best / 16};  // (x, y) on the 16x16 grid
  };
  const auto [x0, y0] = argmax_cell(probe(26));
  const auto [x1, y1] = argmax_cell(probe(30));
  REQUIRE(std::abs(x1 - (x0 + 1)) <= 1);  // one cell right, within +-1
  REQUIRE(std::abs(y1 - y0) <= 1);
}
