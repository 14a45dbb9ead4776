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
#include <limits>
#include <tuple>
#include <vector>

#include "nuseg/core/common.hpp"
#include "nuseg/core/tensor.hpp"
#include "nuseg/data/types.hpp"

namespace nuseg {

enum class TargetKind {
  kKeypointHeatmap,  // size-adaptive Gaussian around each center
  kCenterpointMap,   // bare 1 at the center cell
};

struct PositiveCell {
  int x = 0;
  int y = 0;
  int cls = 0;       // 1..C
  int instance = 0;  // 1..K
};

struct HeatmapTarget {
  Tensor y;  // {C, H/R, W/R}
  std::vector<PositiveCell> positives;
  int stride = 4;
  float tau = 0.5f;
  // Quantized (possibly relocated) center cell per instance as y*Wc + x,
  // or -1 when the instance was dropped from supervision.
  std::vector<int> center_cell_of;
};

/// Foreground centroid rounded to the nearest pixel; if that pixel is
/// background (concave shapes), the foreground pixel closest to the true
/// centroid. Returns (x, y).
inline std::pair<int, int> instance_center(const Tensor& mask) {
  const int h = mask.dim(0), w = mask.dim(1);
  double sx = 0.0, sy = 0.0;
  int64_t n = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask.at(y, x) > 0.5f) {
        sx += x;
        sy += y;
        ++n;
      }
  if (n == 0) throw std::invalid_argument("instance_center: empty mask");
  const double cx = sx / n, cy = sy / n;
  const int rx = static_cast<int>(std::lround(cx));
  const int ry = static_cast<int>(std::lround(cy));
  if (rx >= 0 && rx < w && ry >= 0 && ry < h && mask.at(ry, rx) > 0.5f) return {rx, ry};
  double best = std::numeric_limits<double>::infinity();
  int bx = 0, by = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (mask.at(y, x) <= 0.5f) continue;
      const double d = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      if (d < best) {
        best = d;
        bx = x;
        by = y;
      }
    }
  return {bx, by};
}

/// Largest center-shift radius that keeps IoU >= min_iou against an
/// (h x w) box, taking the minimum positive root over the three canonical
/// displacement geometries (translate / shrink / grow).
inline double corner_radius(double h, double w, double min_iou) {
  const double o = min_iou;
  const double b1 = h + w;
  const double c1 = w * h * (1.0 - o) / (1.0 + o);
  const double r1 = (b1 - std::sqrt(std::max(0.0, b1 * b1 - 4.0 * c1))) / 2.0;

  const double a2 = 4.0;
  const double b2 = 2.0 * (h + w);
  const double c2 = (1.0 - o) * w * h;
  const double r2 = (b2 - std::sqrt(std::max(0.0, b2 * b2 - 4.0 * a2 * c2))) / (2.0 * a2);

  const double a3 = 4.0 * o;
  const double b3 = -2.0 * o * (h + w);
  const double c3 = (o - 1.0) * w * h;
  const double r3 = (-b3 + std::sqrt(std::max(0.0, b3 * b3 - 4.0 * a3 * c3))) / (2.0 * a3);

  return std::min({r1, r2, r3});
}

/// Size-adaptive Gaussian standard deviation for a bounding box measured at
/// full resolution, evaluated on the stride-R heatmap grid. The radius is
/// floored at one cell.
inline double gaussian_sigma(double bbox_h, double bbox_w, int stride) {
  const double r = corner_radius(bbox_h / stride, bbox_w / stride, 0.7);
  return std::max(1.0, r) / 3.0;
}

struct CellCenter {
  int x = 0;
  int y = 0;
  int instance = 0;  // 1..K
};

/// Quantization to stride-R cells can merge distinct centers. The largest
/// instance keeps a contested cell; smaller ones move to the nearest free
/// cell whose full-resolution preimage still touches their mask, or are
/// dropped from supervision (with a warning) when no such cell exists.
inline std::vector<CellCenter> resolve_center_collisions(std::vector<CellCenter> centers,
                                                         const std::vector<int64_t>& areas,
                                                         const InstanceAnnotation& ann, int stride,
                                                         WarningSink* sink = nullptr) {
  const int wc = ann.width / stride, hc = ann.height / stride;
  auto cell_index = [wc](int x, int y) { return y * wc + x; };

  std::vector<int> owner(static_cast<size_t>(wc) * hc, 0);
  std::vector<std::vector<int>> contenders(static_cast<size_t>(wc) * hc);
  for (const CellCenter& c : centers) contenders[cell_index(c.x, c.y)].push_back(c.instance);

  std::vector<std::pair<int, int>> losers;  // (cell, instance)
  for (size_t cell = 0; cell < contenders.size(); ++cell) {
    auto& ids = contenders[cell];
    if (ids.empty()) continue;
    std::sort(ids.begin(), ids.end(), [&](int a, int b) {
      const int64_t aa = areas[static_cast<size_t>(a) - 1], ab = areas[static_cast<size_t>(b) - 1];
      return aa != ab ? aa > ab : a < b;
    });
    owner[cell] = ids[0];
    for (size_t i = 1; i < ids.size(); ++i) losers.emplace_back(static_cast<int>(cell), ids[i]);
  }

  auto preimage_touches = [&](int cx, int cy, int id) {
    for (int y = cy * stride; y < (cy + 1) * stride; ++y)
      for (int x = cx * stride; x < (cx + 1) * stride; ++x)
        if (ann.id_at(y, x) == id) return true;
    return false;
  };

  std::vector<int> assigned_cell(areas.size() + 1, -1);
  for (const CellCenter& c : centers) assigned_cell[static_cast<size_t>(c.instance)] = -2;
  for (size_t cell = 0; cell < contenders.size(); ++cell)
    if (owner[cell] != 0) assigned_cell[static_cast<size_t>(owner[cell])] = static_cast<int>(cell);

  for (const auto& [orig_cell, id] : losers) {
    const int ox = orig_cell % wc, oy = orig_cell / wc;
    // Candidate cells are limited to those overlapping the instance's bbox.
    int minx = ann.width, maxx = -1, miny = ann.height, maxy = -1;
    for (int y = 0; y < ann.height; ++y)
      for (int x = 0; x < ann.width; ++x)
        if (ann.id_at(y, x) == id) {
          minx = std::min(minx, x);
          maxx = std::max(maxx, x);
          miny = std::min(miny, y);
          maxy = std::max(maxy, y);
        }
    std::vector<std::tuple<int, int, int>> candidates;  // (dist2, y, x)
    for (int cy = miny / stride; cy <= maxy / stride; ++cy)
      for (int cx = minx / stride; cx <= maxx / stride; ++cx) {
        if (cx == ox && cy == oy) continue;
        const int d2 = (cx - ox) * (cx - ox) + (cy - oy) * (cy - oy);
        candidates.emplace_back(d2, cy, cx);
      }
    std::sort(candidates.begin(), candidates.end());
    bool placed = false;
    for (const auto& [d2, cy, cx] : candidates) {
      const int cell = cell_index(cx, cy);
      if (owner[cell] != 0) continue;
      if (!preimage_touches(cx, cy, id)) continue;
      owner[cell] = id;
      assigned_cell[static_cast<size_t>(id)] = cell;
      placed = true;
      break;
    }
    if (!placed) {
      assigned_cell[static_cast<size_t>(id)] = -1;
      warn(sink, "instance " + std::to_string(id) +
                     " dropped from heatmap supervision: center cell contested and no free "
                     "neighboring cell touches its mask");
    }
  }

  std::vector<CellCenter> out;
  out.reserve(centers.size());
  for (const CellCenter& c : centers) {
    const int cell = assigned_cell[static_cast<size_t>(c.instance)];
    if (cell < 0) continue;  // dropped
    out.push_back({cell % wc, cell / wc, c.instance});
  }
  return out;
}

/// Renders the multi-class training target at stride R. Same-class Gaussians
/// combine by element-wise max; every cell whose best splat value exceeds tau
/// becomes a positive assigned to the instance achieving that value (ties to
/// the smaller id). Gaussian support is truncated at 3 sigma per side.
inline HeatmapTarget render_heatmap(const InstanceAnnotation& ann, int height, int width,
                                    int stride, float tau,
                                    TargetKind kind = TargetKind::kKeypointHeatmap,
                                    WarningSink* sink = nullptr) {
  if (height % stride != 0 || width % stride != 0)
    throw std::invalid_argument("render_heatmap: stride must divide image size (pad upstream)");
  const int hc = height / stride, wc = width / stride;
  const int classes = ann.num_classes;
  HeatmapTarget target;
  target.stride = stride;
  target.tau = tau;
  target.y = Tensor({classes, hc, wc});
  target.center_cell_of.assign(static_cast<size_t>(ann.num_instances()), -1);
  if (ann.num_instances() == 0) return target;

  const std::vector<int64_t> areas = ann.instance_areas();
  std::vector<CellCenter> centers;
  std::vector<std::array<int, 4>> bboxes(static_cast<size_t>(ann.num_instances()),
                                         {ann.width, -1, ann.height, -1});  // minx,maxx,miny,maxy
  for (int y = 0; y < ann.height; ++y)
    for (int x = 0; x < ann.width; ++x) {
      const int32_t id = ann.id_at(y, x);
      if (id == 0) continue;
      auto& bb = bboxes[static_cast<size_t>(id) - 1];
      bb[0] = std::min(bb[0], x);
      bb[1] = std::max(bb[1], x);
      bb[2] = std::min(bb[2], y);
      bb[3] = std::max(bb[3], y);
    }
  for (int id = 1; id <= ann.num_instances(); ++id) {
    if (areas[static_cast<size_t>(id) - 1] == 0) continue;
    const auto [cx, cy] = instance_center(ann.mask_of(id));
    centers.push_back({cx / stride, cy / stride, id});
  }
  centers = resolve_center_collisions(std::move(centers), areas, ann, stride, sink);

  // Best splat value and owning instance per cell, across all classes.
  std::vector<float> best(static_cast<size_t>(hc) * wc, 0.0f);
  std::vector<int> best_id(static_cast<size_t>(hc) * wc, 0);

  for (const CellCenter& c : centers) {
    const auto& bb = bboxes[static_cast<size_t>(c.instance) - 1];
    const int cls = ann.class_of_id(c.instance);
    float* channel = target.y.ptr() + static_cast<size_t>(cls - 1) * hc * wc;
    target.center_cell_of[static_cast<size_t>(c.instance) - 1] = c.y * wc + c.x;

    if (kind == TargetKind::kCenterpointMap) {
      const size_t cell = static_cast<size_t>(c.y) * wc + c.x;
      channel[cell] = 1.0f;
      if (1.0f > best[cell]) {  // cells are unique after collision resolution
        best[cell] = 1.0f;
        best_id[cell] = c.instance;
      }
      continue;
    }

    const double sigma = gaussian_sigma(bb[3] - bb[2] + 1, bb[1] - bb[0] + 1, stride);
    const int rad = static_cast<int>(std::ceil(3.0 * sigma));
    const double denom = 2.0 * sigma * sigma;
    for (int y = std::max(0, c.y - rad); y <= std::min(hc - 1, c.y + rad); ++y)
      for (int x = std::max(0, c.x - rad); x <= std::min(wc - 1, c.x + rad); ++x) {
        const double d2 = static_cast<double>(x - c.x) * (x - c.x) +
                          static_cast<double>(y - c.y) * (y - c.y);
        const float v = (x == c.x && y == c.y) ? 1.0f : static_cast<float>(std::exp(-d2 / denom));
        const size_t cell = static_cast<size_t>(y) * wc + x;
        channel[cell] = std::max(channel[cell], v);
        if (v > best[cell]) {
          best[cell] = v;
          best_id[cell] = c.instance;
        }
      }
  }

  for (int y = 0; y < hc; ++y)
    for (int x = 0; x < wc; ++x) {
      const size_t cell = static_cast<size_t>(y) * wc + x;
      if (best[cell] > tau)
        target.positives.push_back(
            {x, y, ann.class_of_id(best_id[cell]), best_id[cell]});
    }
  return target;
}

}  // namespace nuseg
