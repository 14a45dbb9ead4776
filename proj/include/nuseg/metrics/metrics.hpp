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

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "nuseg/core/common.hpp"
#include "nuseg/data/types.hpp"
#include "nuseg/targets/heatmap.hpp"

namespace nuseg {

// ---------------------------------------------------------------------------
// Instance matching at IoU > 0.5
// ---------------------------------------------------------------------------

struct MatchResult {
  struct Pair {
    int pred_id = 0;
    int gt_id = 0;
    double iou = 0.0;
  };
  std::vector<Pair> pairs;
  std::vector<int> unmatched_pred;
  std::vector<int> unmatched_gt;
};

/// Pairs prediction and ground-truth instances whose IoU exceeds 0.5. At
/// this threshold the pairing is necessarily one-to-one; that uniqueness is
/// asserted rather than searched for.
inline MatchResult match_instances(const std::vector<int32_t>& pred_map,
                                   const std::vector<int32_t>& gt_map, int height, int width) {
  if (pred_map.size() != static_cast<size_t>(height) * width ||
      gt_map.size() != static_cast<size_t>(height) * width)
    throw std::invalid_argument("match_instances: map sizes disagree with height*width");
  std::map<int32_t, int64_t> pred_area, gt_area;
  std::map<std::pair<int32_t, int32_t>, int64_t> inter;
  for (size_t i = 0; i < pred_map.size(); ++i) {
    const int32_t p = pred_map[i], g = gt_map[i];
    if (p > 0) ++pred_area[p];
    if (g > 0) ++gt_area[g];
    if (p > 0 && g > 0) ++inter[{p, g}];
  }
  MatchResult out;
  std::set<int32_t> matched_pred, matched_gt;
  for (const auto& [key, in] : inter) {
    const auto [p, g] = key;
    const double iou =
        static_cast<double>(in) / static_cast<double>(pred_area[p] + gt_area[g] - in);
    if (iou > 0.5) {
      if (matched_pred.count(p) || matched_gt.count(g))
        throw std::logic_error("match_instances: duplicate match above IoU 0.5");
      matched_pred.insert(p);
      matched_gt.insert(g);
      out.pairs.push_back({static_cast<int>(p), static_cast<int>(g), iou});
    }
  }
  for (const auto& [p, a] : pred_area)
    if (!matched_pred.count(p)) out.unmatched_pred.push_back(static_cast<int>(p));
  for (const auto& [g, a] : gt_area)
    if (!matched_gt.count(g)) out.unmatched_gt.push_back(static_cast<int>(g));
  return out;
}

/// Converts per-instance binary masks into a label map, rejecting overlaps.
inline std::vector<int32_t> masks_to_label_map(const std::vector<std::vector<uint8_t>>& masks,
                                               int height, int width) {
  std::vector<int32_t> map(static_cast<size_t>(height) * width, 0);
  for (size_t k = 0; k < masks.size(); ++k)
    for (size_t i = 0; i < map.size(); ++i)
      if (masks[k][i]) {
        if (map[i] != 0)
          throw std::invalid_argument("masks_to_label_map: overlapping instances in one map");
        map[i] = static_cast<int32_t>(k + 1);
      }
  return map;
}

// ---------------------------------------------------------------------------
// Panoptic quality
// ---------------------------------------------------------------------------

struct PqTriple {
  double dq = 0.0;
  double sq = 0.0;
  double pq = 0.0;
};

struct PqAccum {
  int64_t tp = 0, fp = 0, fn = 0;
  double iou_sum = 0.0;

  void add(const MatchResult& m) {
    tp += static_cast<int64_t>(m.pairs.size());
    fp += static_cast<int64_t>(m.unmatched_pred.size());
    fn += static_cast<int64_t>(m.unmatched_gt.size());
    for (const auto& p : m.pairs) iou_sum += p.iou;
  }

  PqTriple value() const {
    PqTriple t;
    const double denom = static_cast<double>(tp) + 0.5 * fp + 0.5 * fn;
    t.dq = denom > 0.0 ? static_cast<double>(tp) / denom : 0.0;
    t.sq = tp > 0 ? iou_sum / static_cast<double>(tp) : 0.0;
    t.pq = t.dq * t.sq;
    return t;
  }
};

inline PqTriple panoptic_quality(const MatchResult& m) {
  PqAccum acc;
  acc.add(m);
  return acc.value();
}

// ---------------------------------------------------------------------------
// Per-image prediction view consumed by the evaluation driver
// ---------------------------------------------------------------------------

struct ImagePredictions {
  int height = 0, width = 0;
  std::vector<int32_t> label_map;                 // disjoint instances, ids 1..n
  std::vector<int> classes;                       // per instance
  std::vector<float> scores;                      // per instance
  std::vector<std::pair<float, float>> centers;   // per instance (x, y)

  int count() const { return static_cast<int>(classes.size()); }
};

struct EvalConfig {
  double pairing_radius = 12.0;
};

struct BucketStats {
  int64_t tp = 0, fp = 0, fn = 0;
  double f1 = 0.0;
};

struct EvalReport {
  int num_classes = 0;
  std::vector<std::string> class_names;

  std::vector<PqTriple> per_class;  // dataset-pooled, index = class-1
  double mpq = 0.0, bpq = 0.0;
  double mpq_image_avg = 0.0, bpq_image_avg = 0.0;

  double det_precision = 0.0, det_recall = 0.0, det_f1 = 0.0;
  int64_t det_tp = 0, det_fp = 0, det_fn = 0;
  std::vector<std::array<double, 3>> cls_prf;  // per class: P, R, F1

  BucketStats buckets[3];  // small / medium / large by gt area quartiles
  double bucket_small_cut = 0.0, bucket_large_cut = 0.0;

  int64_t n_images = 0, n_gt = 0, n_pred = 0;
  std::map<std::string, std::pair<double, double>> per_tissue;  // tag -> (mPQ, bPQ)
};

namespace detail {

inline std::vector<int32_t> filter_by_class(const std::vector<int32_t>& map,
                                            const std::vector<int>& class_of, int cls) {
  std::vector<int32_t> out(map.size(), 0);
  for (size_t i = 0; i < map.size(); ++i) {
    const int32_t id = map[i];
    if (id > 0 && class_of[static_cast<size_t>(id) - 1] == cls) out[i] = id;
  }
  return out;
}

struct GreedyPairing {
  std::vector<std::pair<int, int>> pairs;  // (pred idx, gt idx)
  std::vector<int> unmatched_pred, unmatched_gt;
};

/// Nearest-first greedy center pairing within the radius, deterministic tie
/// order (distance, pred index, gt index).
inline GreedyPairing pair_centers(const std::vector<std::pair<float, float>>& pred,
                                  const std::vector<std::pair<float, float>>& gt, double radius) {
  struct Cand {
    double d;
    int p, g;
  };
  std::vector<Cand> cands;
  for (int p = 0; p < static_cast<int>(pred.size()); ++p)
    for (int g = 0; g < static_cast<int>(gt.size()); ++g) {
      const double dx = pred[static_cast<size_t>(p)].first - gt[static_cast<size_t>(g)].first;
      const double dy = pred[static_cast<size_t>(p)].second - gt[static_cast<size_t>(g)].second;
      const double d = std::sqrt(dx * dx + dy * dy);
      if (d <= radius) cands.push_back({d, p, g});
    }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.d != b.d) return a.d < b.d;
    if (a.p != b.p) return a.p < b.p;
    return a.g < b.g;
  });
  GreedyPairing out;
  std::vector<char> pu(pred.size(), 0), gu(gt.size(), 0);
  for (const Cand& c : cands) {
    if (pu[static_cast<size_t>(c.p)] || gu[static_cast<size_t>(c.g)]) continue;
    pu[static_cast<size_t>(c.p)] = 1;
    gu[static_cast<size_t>(c.g)] = 1;
    out.pairs.emplace_back(c.p, c.g);
  }
  for (size_t p = 0; p < pred.size(); ++p)
    if (!pu[p]) out.unmatched_pred.push_back(static_cast<int>(p));
  for (size_t g = 0; g < gt.size(); ++g)
    if (!gu[g]) out.unmatched_gt.push_back(static_cast<int>(g));
  return out;
}

inline double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  if (v.empty()) return 0.0;
  const double pos = p * (static_cast<double>(v.size()) - 1.0);
  const size_t lo = static_cast<size_t>(pos);
  const size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

inline double f1_of(int64_t tp, int64_t fp, int64_t fn) {
  const double denom = 2.0 * tp + fp + fn;
  return denom > 0.0 ? 2.0 * tp / denom : 0.0;
}

}  // namespace detail

/// Dataset-level evaluation. PQ counts are pooled over the split (per class
/// for mPQ, class-agnostic for bPQ); per-image averages are reported
/// alongside. Detection/classification follow nearest-center greedy pairing.
inline EvalReport build_eval_report(const std::vector<ImagePredictions>& preds,
                                    const Dataset& gt, const EvalConfig& cfg = {}) {
  if (preds.size() != gt.samples.size())
    throw std::invalid_argument("build_eval_report: prediction/sample count mismatch");
  if (gt.samples.empty()) throw std::invalid_argument("build_eval_report: empty dataset");
  const int classes = gt.num_classes();

  EvalReport rep;
  rep.num_classes = classes;
  rep.class_names = gt.class_names;
  rep.n_images = static_cast<int64_t>(gt.samples.size());

  PqAccum binary;
  std::vector<PqAccum> per_class(static_cast<size_t>(classes));
  std::vector<char> class_in_gt(static_cast<size_t>(classes), 0);
  double bpq_img_sum = 0.0, mpq_img_sum = 0.0;
  int64_t mpq_img_count = 0;

  std::map<std::string, std::pair<PqAccum, std::vector<PqAccum>>> tissue_acc;
  std::map<std::string, std::vector<char>> tissue_class_seen;

  // detection / classification / buckets
  int64_t det_tp = 0, det_fp = 0, det_fn = 0;
  std::vector<std::array<int64_t, 3>> cls_counts(static_cast<size_t>(classes), {0, 0, 0});
  std::vector<double> all_gt_areas;
  std::vector<double> paired_gt_areas, unmatched_gt_areas, unmatched_pred_areas;

  for (size_t si = 0; si < gt.samples.size(); ++si) {
    const Sample& s = gt.samples[si];
    const ImagePredictions& ip = preds[si];
    if (ip.height != s.annotation.height || ip.width != s.annotation.width)
      throw std::invalid_argument("build_eval_report: prediction map size mismatch at sample " +
                                  s.name);
    rep.n_gt += s.annotation.num_instances();
    rep.n_pred += ip.count();

    // --- PQ ---
    MatchResult bin = match_instances(ip.label_map, s.annotation.instance_map, ip.height, ip.width);
    binary.add(bin);
    PqAccum img_bin;
    img_bin.add(bin);
    bpq_img_sum += img_bin.value().pq;

    double img_mpq_sum = 0.0;
    int img_mpq_classes = 0;
    std::vector<MatchResult> class_matches(static_cast<size_t>(classes));
    for (int c = 1; c <= classes; ++c) {
      const auto pm = detail::filter_by_class(ip.label_map, ip.classes, c);
      const auto gm = detail::filter_by_class(s.annotation.instance_map, s.annotation.class_of, c);
      MatchResult m = match_instances(pm, gm, ip.height, ip.width);
      class_matches[static_cast<size_t>(c) - 1] = m;
      per_class[static_cast<size_t>(c) - 1].add(m);
      const bool gt_has_class =
          std::any_of(s.annotation.class_of.begin(), s.annotation.class_of.end(),
                      [c](int x) { return x == c; });
      if (gt_has_class) {
        class_in_gt[static_cast<size_t>(c) - 1] = 1;
        PqAccum img_c;
        img_c.add(m);
        img_mpq_sum += img_c.value().pq;
        ++img_mpq_classes;
      }
    }
    if (img_mpq_classes > 0) {
      mpq_img_sum += img_mpq_sum / img_mpq_classes;
      ++mpq_img_count;
    }

    if (!s.tissue.empty()) {
      auto& [tb, tc] = tissue_acc[s.tissue];
      if (tc.empty()) tc.resize(static_cast<size_t>(classes));
      auto& seen = tissue_class_seen[s.tissue];
      if (seen.empty()) seen.assign(static_cast<size_t>(classes), 0);
      tb.add(bin);
      for (int c = 1; c <= classes; ++c) {
        tc[static_cast<size_t>(c) - 1].add(class_matches[static_cast<size_t>(c) - 1]);
        const bool gt_has_class =
            std::any_of(s.annotation.class_of.begin(), s.annotation.class_of.end(),
                        [c](int x) { return x == c; });
        if (gt_has_class) seen[static_cast<size_t>(c) - 1] = 1;
      }
    }

    // --- detection & classification ---
    std::vector<std::pair<float, float>> gt_centers;
    std::vector<double> gt_areas;
    const auto areas = s.annotation.instance_areas();
    for (int id = 1; id <= s.annotation.num_instances(); ++id) {
      const auto [cx, cy] = instance_center(s.annotation.mask_of(id));
      gt_centers.emplace_back(static_cast<float>(cx), static_cast<float>(cy));
      gt_areas.push_back(static_cast<double>(areas[static_cast<size_t>(id) - 1]));
      all_gt_areas.push_back(gt_areas.back());
    }
    detail::GreedyPairing pairing = detail::pair_centers(ip.centers, gt_centers, cfg.pairing_radius);
    det_tp += static_cast<int64_t>(pairing.pairs.size());
    det_fp += static_cast<int64_t>(pairing.unmatched_pred.size());
    det_fn += static_cast<int64_t>(pairing.unmatched_gt.size());

    std::vector<int64_t> pred_areas(static_cast<size_t>(ip.count()), 0);
    for (int32_t id : ip.label_map)
      if (id > 0) ++pred_areas[static_cast<size_t>(id) - 1];

    for (const auto& [p, g] : pairing.pairs) {
      const int pc = ip.classes[static_cast<size_t>(p)];
      const int gc = s.annotation.class_of[static_cast<size_t>(g)];
      if (pc == gc) {
        ++cls_counts[static_cast<size_t>(pc) - 1][0];  // TP
      } else {
        ++cls_counts[static_cast<size_t>(pc) - 1][1];  // FP for predicted class
        ++cls_counts[static_cast<size_t>(gc) - 1][2];  // FN for true class
      }
      paired_gt_areas.push_back(gt_areas[static_cast<size_t>(g)]);
    }
    for (int g : pairing.unmatched_gt) unmatched_gt_areas.push_back(gt_areas[static_cast<size_t>(g)]);
    for (int p : pairing.unmatched_pred)
      unmatched_pred_areas.push_back(static_cast<double>(pred_areas[static_cast<size_t>(p)]));
  }

  // --- assemble ---
  rep.per_class.resize(static_cast<size_t>(classes));
  double mpq_sum = 0.0;
  int mpq_classes = 0;
  for (int c = 0; c < classes; ++c) {
    rep.per_class[static_cast<size_t>(c)] = per_class[static_cast<size_t>(c)].value();
    if (class_in_gt[static_cast<size_t>(c)]) {
      mpq_sum += rep.per_class[static_cast<size_t>(c)].pq;
      ++mpq_classes;
    }
  }
  rep.mpq = mpq_classes > 0 ? mpq_sum / mpq_classes : 0.0;
  rep.bpq = binary.value().pq;
  rep.bpq_image_avg = bpq_img_sum / static_cast<double>(gt.samples.size());
  rep.mpq_image_avg = mpq_img_count > 0 ? mpq_img_sum / static_cast<double>(mpq_img_count) : 0.0;

  rep.det_tp = det_tp;
  rep.det_fp = det_fp;
  rep.det_fn = det_fn;
  rep.det_precision = det_tp + det_fp > 0 ? static_cast<double>(det_tp) / (det_tp + det_fp) : 0.0;
  rep.det_recall = det_tp + det_fn > 0 ? static_cast<double>(det_tp) / (det_tp + det_fn) : 0.0;
  rep.det_f1 = detail::f1_of(det_tp, det_fp, det_fn);

  rep.cls_prf.resize(static_cast<size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    const auto& [tp, fp, fn] = cls_counts[static_cast<size_t>(c)];
    const double p = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    const double r = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    rep.cls_prf[static_cast<size_t>(c)] = {p, r, detail::f1_of(tp, fp, fn)};
  }

  // --- size buckets: gt-area quartiles over the split ---
  rep.bucket_small_cut = detail::percentile(all_gt_areas, 0.25);
  rep.bucket_large_cut = detail::percentile(all_gt_areas, 0.75);
  auto bucket_of = [&](double area) {
    if (area < rep.bucket_small_cut) return 0;
    if (area > rep.bucket_large_cut) return 2;
    return 1;
  };
  for (double a : paired_gt_areas) ++rep.buckets[bucket_of(a)].tp;
  for (double a : unmatched_gt_areas) ++rep.buckets[bucket_of(a)].fn;
  for (double a : unmatched_pred_areas) ++rep.buckets[bucket_of(a)].fp;
  for (auto& b : rep.buckets) b.f1 = detail::f1_of(b.tp, b.fp, b.fn);

  for (const auto& [tag, acc] : tissue_acc) {
    const auto& [tb, tc] = acc;
    const auto& seen = tissue_class_seen.at(tag);
    double sum = 0.0;
    int cnt = 0;
    for (int c = 0; c < classes; ++c)
      if (seen[static_cast<size_t>(c)]) {
        sum += tc[static_cast<size_t>(c)].value().pq;
        ++cnt;
      }
    rep.per_tissue[tag] = {cnt > 0 ? sum / cnt : 0.0, tb.value().pq};
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Report serialization: a human-readable table and a flat key-value file.
// ---------------------------------------------------------------------------

inline std::string report_to_kv(const EvalReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "images = " << r.n_images << "\n";
  os << "gt_instances = " << r.n_gt << "\n";
  os << "pred_instances = " << r.n_pred << "\n";
  os << "bpq = " << r.bpq << "\n";
  os << "mpq = " << r.mpq << "\n";
  os << "bpq_image_avg = " << r.bpq_image_avg << "\n";
  os << "mpq_image_avg = " << r.mpq_image_avg << "\n";
  for (int c = 0; c < r.num_classes; ++c) {
    const std::string key = "class" + std::to_string(c + 1);
    os << key << ".dq = " << r.per_class[static_cast<size_t>(c)].dq << "\n";
    os << key << ".sq = " << r.per_class[static_cast<size_t>(c)].sq << "\n";
    os << key << ".pq = " << r.per_class[static_cast<size_t>(c)].pq << "\n";
  }
  os << "detection.precision = " << r.det_precision << "\n";
  os << "detection.recall = " << r.det_recall << "\n";
  os << "detection.f1 = " << r.det_f1 << "\n";
  os << "detection.tp = " << r.det_tp << "\n";
  os << "detection.fp = " << r.det_fp << "\n";
  os << "detection.fn = " << r.det_fn << "\n";
  for (int c = 0; c < r.num_classes; ++c) {
    const std::string key = "classification.class" + std::to_string(c + 1);
    os << key << ".precision = " << r.cls_prf[static_cast<size_t>(c)][0] << "\n";
    os << key << ".recall = " << r.cls_prf[static_cast<size_t>(c)][1] << "\n";
    os << key << ".f1 = " << r.cls_prf[static_cast<size_t>(c)][2] << "\n";
  }
  const char* names[3] = {"small", "medium", "large"};
  for (int b = 0; b < 3; ++b) {
    os << "bucket." << names[b] << ".f1 = " << r.buckets[b].f1 << "\n";
    os << "bucket." << names[b] << ".tp = " << r.buckets[b].tp << "\n";
    os << "bucket." << names[b] << ".fp = " << r.buckets[b].fp << "\n";
    os << "bucket." << names[b] << ".fn = " << r.buckets[b].fn << "\n";
  }
  os << "bucket.small_cut = " << r.bucket_small_cut << "\n";
  os << "bucket.large_cut = " << r.bucket_large_cut << "\n";
  for (const auto& [tag, v] : r.per_tissue) {
    os << "tissue." << tag << ".mpq = " << v.first << "\n";
    os << "tissue." << tag << ".bpq = " << v.second << "\n";
  }
  return os.str();
}

inline std::string report_to_text(const EvalReport& r) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  os << "== evaluation over " << r.n_images << " images ==\n";
  os << "instances: gt " << r.n_gt << ", predicted " << r.n_pred << "\n\n";
  os << "pooled    bPQ " << r.bpq << "   mPQ " << r.mpq << "\n";
  os << "image-avg bPQ " << r.bpq_image_avg << "   mPQ " << r.mpq_image_avg << "\n\n";
  os << "per-class panoptic quality\n";
  for (int c = 0; c < r.num_classes; ++c) {
    const auto& t = r.per_class[static_cast<size_t>(c)];
    os << "  " << r.class_names[static_cast<size_t>(c)] << ": DQ " << t.dq << "  SQ " << t.sq
       << "  PQ " << t.pq << "\n";
  }
  os << "\ndetection  P " << r.det_precision << "  R " << r.det_recall << "  F1 " << r.det_f1
     << "   (TP " << r.det_tp << " FP " << r.det_fp << " FN " << r.det_fn << ")\n";
  os << "classification (among detection pairs)\n";
  for (int c = 0; c < r.num_classes; ++c) {
    const auto& a = r.cls_prf[static_cast<size_t>(c)];
    os << "  " << r.class_names[static_cast<size_t>(c)] << ": P " << a[0] << "  R " << a[1]
       << "  F1 " << a[2] << "\n";
  }
  const char* names[3] = {"small", "medium", "large"};
  os << "size buckets (gt-area quartile cuts " << r.bucket_small_cut << " / "
     << r.bucket_large_cut << ")\n";
  for (int b = 0; b < 3; ++b)
    os << "  " << names[b] << ": F1 " << r.buckets[b].f1 << " (TP " << r.buckets[b].tp << " FP "
       << r.buckets[b].fp << " FN " << r.buckets[b].fn << ")\n";
  if (!r.per_tissue.empty()) {
    os << "per-tissue\n";
    for (const auto& [tag, v] : r.per_tissue)
      os << "  " << tag << ": mPQ " << v.first << "  bPQ " << v.second << "\n";
  }
  return os.str();
}

}  // namespace nuseg
