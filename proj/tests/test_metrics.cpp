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

#include "nuseg/metrics/metrics.hpp"
#include "testutil.hpp"

using namespace nuseg;

namespace {

// Brute-force matcher: all-pairs IoU, greedy by descending IoU above 0.5.
MatchResult brute_force_match(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt) {
  std::map<int32_t, int64_t> pa, ga;
  std::map<std::pair<int32_t, int32_t>, int64_t> inter;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 0) ++pa[pred[i]];
    if (gt[i] > 0) ++ga[gt[i]];
    if (pred[i] > 0 && gt[i] > 0) ++inter[{pred[i], gt[i]}];
  }
  struct Cand {
    double iou;
    int32_t p, g;
  };
  std::vector<Cand> cands;
  for (const auto& [key, in] : inter) {
    const double iou = static_cast<double>(in) / (pa[key.first] + ga[key.second] - in);
    if (iou > 0.5) cands.push_back({iou, key.first, key.second});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.p != b.p) return a.p < b.p;
    return a.g < b.g;
  });
  MatchResult out;
  std::set<int32_t> up, ug;
  for (const Cand& c : cands) {
    if (up.count(c.p) || ug.count(c.g)) continue;
    up.insert(c.p);
    ug.insert(c.g);
    out.pairs.push_back({static_cast<int>(c.p), static_cast<int>(c.g), c.iou});
  }
  for (const auto& [p, a] : pa)
    if (!up.count(p)) out.unmatched_pred.push_back(static_cast<int>(p));
  for (const auto& [g, a] : ga)
    if (!ug.count(g)) out.unmatched_gt.push_back(static_cast<int>(g));
  return out;
}

std::vector<int32_t> random_scene(Rng& rng, int size, int max_instances) {
  std::vector<int32_t> map(static_cast<size_t>(size) * size, 0);
  const int n = rng.uniform_int(0, max_instances);
  for (int id = 1; id <= n; ++id) {
    const int cx = rng.uniform_int(2, size - 3), cy = rng.uniform_int(2, size - 3);
    const int r = rng.uniform_int(1, 4);
    for (int y = std::max(0, cy - r); y <= std::min(size - 1, cy + r); ++y)
      for (int x = std::max(0, cx - r); x <= std::min(size - 1, cx + r); ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
          map[static_cast<size_t>(y) * size + x] = id;
  }
  return map;
}

// Perturb a scene: keep most instances, drop some, shift some.
std::vector<int32_t> perturb_scene(const std::vector<int32_t>& gt, int size, Rng& rng) {
  std::vector<int32_t> out(gt.size(), 0);
  int32_t max_id = 0;
  for (int32_t v : gt) max_id = std::max(max_id, v);
  for (int32_t id = 1; id <= max_id; ++id) {
    if (rng.bernoulli(0.15)) continue;  // miss
    const int dx = rng.uniform_int(-1, 1), dy = rng.uniform_int(-1, 1);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (gt[static_cast<size_t>(y) * size + x] == id) {
          const int ny = y + dy, nx = x + dx;
          if (ny >= 0 && nx >= 0 && ny < size && nx < size)
            out[static_cast<size_t>(ny) * size + nx] = id;
        }
  }
  // occasional spurious blob
  if (rng.bernoulli(0.3)) {
    const int cx = rng.uniform_int(2, size - 3), cy = rng.uniform_int(2, size - 3);
    for (int y = cy - 1; y <= cy + 1; ++y)
      for (int x = cx - 1; x <= cx + 1; ++x)
        if (out[static_cast<size_t>(y) * size + x] == 0)
          out[static_cast<size_t>(y) * size + x] = max_id + 1;
  }
  return out;
}

}  // namespace

TEST_CASE("match_instances: identity and empty predictions") {
  Rng rng(1);
  auto gt = random_scene(rng, 24, 5);
  MatchResult m = match_instances(gt, gt, 24, 24);
  REQUIRE(m.unmatched_gt.empty());
  REQUIRE(m.unmatched_pred.empty());
  for (const auto& p : m.pairs) REQUIRE(p.iou == 1.0);

  std::vector<int32_t> none(gt.size(), 0);
  std::vector<int32_t> three(gt.size(), 0);
  for (int i = 0; i < 3; ++i) three[static_cast<size_t>(i) * 24] = i + 1;
  MatchResult m2 = match_instances(none, three, 24, 24);
  REQUIRE(m2.pairs.empty());
  REQUIRE(m2.unmatched_gt.size() == 3);
}

TEST_CASE("match_instances equals the brute-force oracle on 200 random scenes") {
  Rng rng(20240);
  for (int trial = 0; trial < 200; ++trial) {
    auto gt = random_scene(rng, 32, 6);
    auto pred = perturb_scene(gt, 32, rng);
    MatchResult ours = brute_force_match(pred, gt);
    MatchResult fast = match_instances(pred, gt, 32, 32);
    auto key = [](const MatchResult& m) {
      std::set<std::tuple<int, int>> pairs;
      for (const auto& p : m.pairs) pairs.insert({p.pred_id, p.gt_id});
      return pairs;
    };
    REQUIRE(key(ours) == key(fast));
    REQUIRE(ours.unmatched_pred == fast.unmatched_pred);
    REQUIRE(ours.unmatched_gt == fast.unmatched_gt);
  }
}

TEST_CASE("masks_to_label_map rejects overlaps") {
  std::vector<std::vector<uint8_t>> masks(2, std::vector<uint8_t>(16, 0));
  masks[0][5] = 1;
  masks[1][5] = 1;
  REQUIRE_THROWS_AS(masks_to_label_map(masks, 4, 4), std::invalid_argument);
}

TEST_CASE("panoptic quality formula cases") {
  // perfect match of K instances
  MatchResult perfect;
  for (int i = 1; i <= 4; ++i) perfect.pairs.push_back({i, i, 1.0});
  PqTriple t = panoptic_quality(perfect);
  REQUIRE(t.dq == 1.0);
  REQUIRE(t.sq == 1.0);
  REQUIRE(t.pq == 1.0);

  // one pair at IoU 0.6
  MatchResult single;
  single.pairs.push_back({1, 1, 0.6});
  t = panoptic_quality(single);
  REQUIRE(t.dq == 1.0);
  REQUIRE(t.sq == Catch::Approx(0.6).margin(1e-12));
  REQUIRE(t.pq == Catch::Approx(0.6).margin(1e-12));

  // 1 TP at 0.8, 1 FP, 1 FN
  MatchResult mixed;
  mixed.pairs.push_back({1, 1, 0.8});
  mixed.unmatched_pred.push_back(2);
  mixed.unmatched_gt.push_back(2);
  t = panoptic_quality(mixed);
  REQUIRE(t.dq == Catch::Approx(0.5).margin(1e-12));
  REQUIRE(t.sq == Catch::Approx(0.8).margin(1e-12));
  REQUIRE(t.pq == Catch::Approx(0.4).margin(1e-12));

  // PQ = DQ * SQ everywhere on random scenes
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    auto gt = random_scene(rng, 24, 6);
    auto pred = perturb_scene(gt, 24, rng);
    PqTriple r = panoptic_quality(match_instances(pred, gt, 24, 24));
    REQUIRE(std::fabs(r.pq - r.dq * r.sq) < 1e-9);
    REQUIRE(r.pq >= 0.0);
    REQUIRE(r.pq <= 1.0);
  }
}

namespace {

Dataset tiny_dataset(int classes) {
  Dataset ds;
  for (int c = 0; c < classes; ++c) ds.class_names.push_back("class_" + std::to_string(c + 1));
  return ds;
}

Sample disk_sample(const std::string& name, int size, int classes,
                   const std::vector<std::tuple<int, int, int, int>>& disks,
                   const std::string& tissue = "") {
  Sample s;
  s.name = name;
  s.tissue = tissue;
  s.image = Image(size, size);
  InstanceAnnotation ann(size, size, classes);
  int id = 0;
  for (const auto& [cx, cy, r, cls] : disks) {
    ++id;
    ann.class_of.push_back(cls);
    for (int y = std::max(0, cy - r); y <= std::min(size - 1, cy + r); ++y)
      for (int x = std::max(0, cx - r); x <= std::min(size - 1, cx + r); ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) ann.id_at(y, x) = id;
  }
  s.annotation = std::move(ann);
  return s;
}

ImagePredictions gt_as_prediction(const Sample& s) {
  ImagePredictions ip;
  ip.height = s.annotation.height;
  ip.width = s.annotation.width;
  ip.label_map = s.annotation.instance_map;
  for (int id = 1; id <= s.annotation.num_instances(); ++id) {
    ip.classes.push_back(s.annotation.class_of[static_cast<size_t>(id) - 1]);
    ip.scores.push_back(1.0f);
    const auto [cx, cy] = instance_center(s.annotation.mask_of(id));
    ip.centers.emplace_back(static_cast<float>(cx), static_cast<float>(cy));
  }
  return ip;
}

}  // namespace

TEST_CASE("gt-as-prediction scores perfectly everywhere") {
  Dataset ds = tiny_dataset(2);
  ds.samples.push_back(disk_sample("a", 48, 2, {{10, 10, 4, 1}, {30, 30, 6, 2}}, "skin"));
  ds.samples.push_back(disk_sample("b", 48, 2, {{20, 34, 5, 1}, {36, 12, 3, 1}}, "colon"));
  std::vector<ImagePredictions> preds;
  for (const auto& s : ds.samples) preds.push_back(gt_as_prediction(s));
  EvalReport r = build_eval_report(preds, ds);
  REQUIRE(r.mpq == 1.0);
  REQUIRE(r.bpq == 1.0);
  REQUIRE(r.bpq_image_avg == 1.0);
  REQUIRE(r.det_f1 == 1.0);
  for (const auto& prf : r.cls_prf)
    for (double v : prf) REQUIRE(v == 1.0);
  for (int b = 0; b < 3; ++b) REQUIRE(r.buckets[b].f1 == 1.0);
  REQUIRE(r.per_tissue.size() == 2);
  REQUIRE(r.per_tissue.at("skin").second == 1.0);
}

TEST_CASE("single-image aggregate equals the per-image values; absent class excluded") {
  Dataset ds = tiny_dataset(3);  // class 3 never appears
  ds.samples.push_back(disk_sample("a", 48, 3, {{10, 10, 4, 1}, {30, 30, 6, 2}}));
  std::vector<ImagePredictions> preds{gt_as_prediction(ds.samples[0])};
  EvalReport r = build_eval_report(preds, ds);
  REQUIRE(r.mpq == 1.0);  // mean over classes 1 and 2 only
  REQUIRE(r.per_class[2].pq == 0.0);
  REQUIRE(r.mpq == r.mpq_image_avg);
  REQUIRE(r.bpq == r.bpq_image_avg);
}

TEST_CASE("pooled two-image mPQ matches direct recomputation from pooled counts") {
  Dataset ds = tiny_dataset(2);
  ds.samples.push_back(disk_sample("a", 48, 2, {{10, 10, 4, 1}, {30, 30, 6, 2}}));
  ds.samples.push_back(disk_sample("b", 48, 2, {{20, 34, 5, 1}, {36, 12, 3, 1}}));

  // predictions: image a perfect; image b misses instance 2 and adds a fake
  std::vector<ImagePredictions> preds;
  preds.push_back(gt_as_prediction(ds.samples[0]));
  ImagePredictions pb = gt_as_prediction(ds.samples[1]);
  // drop instance 2 (erase from map), add a spurious disk labeled 3
  for (auto& v : pb.label_map)
    if (v == 2) v = 0;
  pb.classes[1] = 1;  // keep arrays in sync; instance 2 has no pixels now
  for (auto& v : pb.label_map) (void)v;
  // spurious blob
  for (int y = 40; y < 44; ++y)
    for (int x = 2; x < 6; ++x) pb.label_map[static_cast<size_t>(y) * 48 + x] = 3;
  pb.classes.push_back(2);
  pb.scores.push_back(0.9f);
  pb.centers.emplace_back(4.0f, 42.0f);
  preds.push_back(pb);

  EvalReport r = build_eval_report(preds, ds);

  // direct recomputation per class from pooled counts
  for (int c = 1; c <= 2; ++c) {
    PqAccum acc;
    for (size_t i = 0; i < 2; ++i) {
      const auto pm = nuseg::detail::filter_by_class(preds[i].label_map, preds[i].classes, c);
      const auto gm = nuseg::detail::filter_by_class(ds.samples[i].annotation.instance_map,
                                                     ds.samples[i].annotation.class_of, c);
      acc.add(match_instances(pm, gm, 48, 48));
    }
    REQUIRE(r.per_class[static_cast<size_t>(c) - 1].pq == Catch::Approx(acc.value().pq).margin(1e-12));
  }
  REQUIRE(r.mpq == Catch::Approx((r.per_class[0].pq + r.per_class[1].pq) / 2.0).margin(1e-12));
}

TEST_CASE("bpq equals mpq when there is a single class") {
  Dataset ds = tiny_dataset(1);
  ds.samples.push_back(disk_sample("a", 48, 1, {{10, 10, 4, 1}, {30, 30, 6, 1}}));
  ImagePredictions p = gt_as_prediction(ds.samples[0]);
  // degrade one instance slightly: remove a pixel
  for (size_t i = 0; i < p.label_map.size(); ++i)
    if (p.label_map[i] == 2) {
      p.label_map[i] = 0;
      break;
    }
  EvalReport r = build_eval_report({p}, ds);
  REQUIRE(r.mpq == Catch::Approx(r.bpq).margin(1e-12));
}

TEST_CASE("metrics are invariant under instance id permutation") {
  Dataset ds = tiny_dataset(2);
  ds.samples.push_back(disk_sample("a", 48, 2, {{10, 10, 4, 1}, {30, 30, 6, 2}, {36, 12, 3, 1}}));
  ImagePredictions p = gt_as_prediction(ds.samples[0]);
  EvalReport base = build_eval_report({p}, ds);

  ImagePredictions perm = p;
  const int32_t map_ids[4] = {0, 3, 1, 2};
  for (auto& v : perm.label_map) v = map_ids[v];
  perm.classes = {p.classes[1], p.classes[2], p.classes[0]};
  perm.scores = {p.scores[1], p.scores[2], p.scores[0]};
  perm.centers = {p.centers[1], p.centers[2], p.centers[0]};
  EvalReport permuted = build_eval_report({perm}, ds);
  REQUIRE(base.bpq == permuted.bpq);
  REQUIRE(base.mpq == permuted.mpq);
  REQUIRE(base.det_f1 == permuted.det_f1);
}

TEST_CASE("detection pairing: exact, empty, and two-preds-one-gt cases") {
  Dataset ds = tiny_dataset(1);
  ds.samples.push_back(disk_sample("a", 48, 1, {{20, 20, 4, 1}}));

  // no predictions: recall 0, precision defined as 0
  ImagePredictions none;
  none.height = 48;
  none.width = 48;
  none.label_map.assign(48 * 48, 0);
  EvalReport r0 = build_eval_report({none}, ds);
  REQUIRE(r0.det_recall == 0.0);
  REQUIRE(r0.det_precision == 0.0);
  REQUIRE(r0.det_f1 == 0.0);

  // two predictions near one gt: nearest pairs, the other is a FP
  ImagePredictions two;
  two.height = 48;
  two.width = 48;
  two.label_map.assign(48 * 48, 0);
  two.label_map[21 * 48 + 20] = 1;
  two.label_map[26 * 48 + 20] = 2;
  two.classes = {1, 1};
  two.scores = {0.9f, 0.8f};
  two.centers = {{20.0f, 21.0f}, {20.0f, 26.0f}};
  EvalReport r2 = build_eval_report({two}, ds);
  REQUIRE(r2.det_tp == 1);
  REQUIRE(r2.det_fp == 1);
  REQUIRE(r2.det_fn == 0);
}

TEST_CASE("size buckets: degenerate equal areas all land in medium") {
  Dataset ds = tiny_dataset(1);
  ds.samples.push_back(disk_sample("a", 48, 1, {{10, 10, 3, 1}, {30, 30, 3, 1}, {10, 36, 3, 1}}));
  ImagePredictions p = gt_as_prediction(ds.samples[0]);
  EvalReport r = build_eval_report({p}, ds);
  REQUIRE(r.buckets[1].tp == 3);
  REQUIRE(r.buckets[0].tp + r.buckets[0].fp + r.buckets[0].fn == 0);
  REQUIRE(r.buckets[2].tp + r.buckets[2].fp + r.buckets[2].fn == 0);
}

TEST_CASE("dropping small-bucket predictions zeroes only the small bucket F1") {
  Dataset ds = tiny_dataset(1);
  ds.samples.push_back(disk_sample(
      "a", 64, 1, {{10, 10, 2, 1}, {30, 30, 4, 1}, {48, 48, 7, 1}, {14, 50, 4, 1}}));
  ImagePredictions full = gt_as_prediction(ds.samples[0]);
  EvalReport r_full = build_eval_report({full}, ds);
  REQUIRE(r_full.buckets[0].f1 == 1.0);

  // remove the smallest instance (id 1, radius 2) from the predictions
  ImagePredictions dropped = full;
  for (auto& v : dropped.label_map)
    if (v == 1) v = 0;
  // rebuild arrays without instance 1
  ImagePredictions rebuilt;
  rebuilt.height = dropped.height;
  rebuilt.width = dropped.width;
  rebuilt.label_map.assign(dropped.label_map.size(), 0);
  for (size_t i = 0; i < dropped.label_map.size(); ++i)
    if (dropped.label_map[i] > 1) rebuilt.label_map[i] = dropped.label_map[i] - 1;
  for (size_t k = 1; k < full.classes.size(); ++k) {
    rebuilt.classes.push_back(full.classes[k]);
    rebuilt.scores.push_back(full.scores[k]);
    rebuilt.centers.push_back(full.centers[k]);
  }
  EvalReport r = build_eval_report({rebuilt}, ds);
  REQUIRE(r.buckets[0].f1 == 0.0);
  REQUIRE(r.buckets[1].f1 == 1.0);
  REQUIRE(r.buckets[2].f1 == 1.0);
}

TEST_CASE("report serializations carry the documented keys") {
  Dataset ds = tiny_dataset(2);
  ds.samples.push_back(disk_sample("a", 48, 2, {{10, 10, 4, 1}, {30, 30, 6, 2}}, "skin"));
  EvalReport r = build_eval_report({gt_as_prediction(ds.samples[0])}, ds);
  const std::string kv = report_to_kv(r);
  for (const char* key :
       {"bpq = ", "mpq = ", "bpq_image_avg = ", "mpq_image_avg = ", "class1.pq = ",
        "class2.sq = ", "detection.f1 = ", "classification.class1.f1 = ", "bucket.small.f1 = ",
        "bucket.large_cut = ", "tissue.skin.mpq = ", "images = ", "gt_instances = "})
    REQUIRE(kv.find(key) != std::string::npos);
  const std::string text = report_to_text(r);
  REQUIRE(text.find("pooled") != std::string::npos);
  REQUIRE(text.find("per-tissue") != std::string::npos);
}
