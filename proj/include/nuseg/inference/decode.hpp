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
#include <cmath>
#include <deque>
#include <functional>
#include <vector>

#include "nuseg/core/tensor.hpp"
#include "nuseg/data/types.hpp"
#include "nuseg/model/output.hpp"
#include "nuseg/segmentor/segmentor.hpp"

namespace nuseg {

// ---------------------------------------------------------------------------
// Masks stored on their bounding box
// ---------------------------------------------------------------------------

struct InstanceMask {
  int x0 = 0, y0 = 0, w = 0, h = 0;
  std::vector<uint8_t> data;  // w*h

  int64_t area() const {
    int64_t n = 0;
    for (uint8_t v : data) n += v;
    return n;
  }
  bool at_global(int gy, int gx) const {
    const int lx = gx - x0, ly = gy - y0;
    if (lx < 0 || ly < 0 || lx >= w || ly >= h) return false;
    return data[static_cast<size_t>(ly) * w + lx] != 0;
  }

  /// Tight binary mask from a full-frame soft mask thresholded at `thresh`
  /// (strictly greater). Returns an empty-bbox mask when nothing survives.
  static InstanceMask from_soft(const Tensor& soft, float thresh) {
    const int fh = soft.dim(0), fw = soft.dim(1);
    int minx = fw, maxx = -1, miny = fh, maxy = -1;
    for (int y = 0; y < fh; ++y)
      for (int x = 0; x < fw; ++x)
        if (soft.at(y, x) > thresh) {
          minx = std::min(minx, x);
          maxx = std::max(maxx, x);
          miny = std::min(miny, y);
          maxy = std::max(maxy, y);
        }
    InstanceMask m;
    if (maxx < 0) return m;
    m.x0 = minx;
    m.y0 = miny;
    m.w = maxx - minx + 1;
    m.h = maxy - miny + 1;
    m.data.assign(static_cast<size_t>(m.w) * m.h, 0);
    for (int y = miny; y <= maxy; ++y)
      for (int x = minx; x <= maxx; ++x)
        if (soft.at(y, x) > thresh) m.data[static_cast<size_t>(y - miny) * m.w + (x - minx)] = 1;
    return m;
  }

  /// Intersection with an axis-aligned region, result in the same global frame.
  InstanceMask cropped(int rx0, int ry0, int rx1, int ry1) const {
    InstanceMask out;
    const int nx0 = std::max(x0, rx0), ny0 = std::max(y0, ry0);
    const int nx1 = std::min(x0 + w, rx1), ny1 = std::min(y0 + h, ry1);
    if (nx0 >= nx1 || ny0 >= ny1) return out;
    out.x0 = nx0;
    out.y0 = ny0;
    out.w = nx1 - nx0;
    out.h = ny1 - ny0;
    out.data.assign(static_cast<size_t>(out.w) * out.h, 0);
    for (int y = ny0; y < ny1; ++y)
      for (int x = nx0; x < nx1; ++x)
        out.data[static_cast<size_t>(y - ny0) * out.w + (x - nx0)] =
            at_global(y, x) ? 1 : 0;
    return out;
  }

  void translate(int dx, int dy) {
    x0 += dx;
    y0 += dy;
  }
};

inline double mask_iou(const InstanceMask& a, const InstanceMask& b) {
  const int x0 = std::max(a.x0, b.x0), y0 = std::max(a.y0, b.y0);
  const int x1 = std::min(a.x0 + a.w, b.x0 + b.w), y1 = std::min(a.y0 + a.h, b.y0 + b.h);
  int64_t inter = 0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x)
      if (a.at_global(y, x) && b.at_global(y, x)) ++inter;
  const int64_t uni = a.area() + b.area() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Peak extraction
// ---------------------------------------------------------------------------

struct Peak {
  int x = 0, y = 0;
  int cls = 1;  // 1..C
  float score = 0.0f;
};

inline bool peak_order(const Peak& a, const Peak& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.y != b.y) return a.y < b.y;
  if (a.x != b.x) return a.x < b.x;
  return a.cls < b.cls;
}

/// Per-class local maxima: value >= all 8 neighbors (out of bounds treated
/// as -inf) and strictly above `conf`. Flat plateaus of equal-valued,
/// 8-connected peak cells emit only the lexicographically smallest (y, x).
inline std::vector<Peak> extract_peaks(const Tensor& heatmap, float conf = 0.4f) {
  const int classes = heatmap.dim(0), hc = heatmap.dim(1), wc = heatmap.dim(2);
  std::vector<Peak> peaks;
  std::vector<uint8_t> is_peak(static_cast<size_t>(hc) * wc);
  std::vector<uint8_t> visited(static_cast<size_t>(hc) * wc);
  for (int c = 0; c < classes; ++c) {
    std::fill(is_peak.begin(), is_peak.end(), 0);
    std::fill(visited.begin(), visited.end(), 0);
    for (int y = 0; y < hc; ++y)
      for (int x = 0; x < wc; ++x) {
        const float v = heatmap.at(c, y, x);
        if (!(v > conf)) continue;
        bool ok = true;
        for (int dy = -1; dy <= 1 && ok; ++dy)
          for (int dx = -1; dx <= 1 && ok; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || nx < 0 || ny >= hc || nx >= wc) continue;
            if (heatmap.at(c, ny, nx) > v) ok = false;
          }
        if (ok) is_peak[static_cast<size_t>(y) * wc + x] = 1;
      }
    // plateau dedup: flood equal-valued 8-connected peak components
    for (int y = 0; y < hc; ++y)
      for (int x = 0; x < wc; ++x) {
        const size_t i = static_cast<size_t>(y) * wc + x;
        if (!is_peak[i] || visited[i]) continue;
        const float v = heatmap.at(c, y, x);
        int best_y = y, best_x = x;
        std::deque<std::pair<int, int>> queue{{y, x}};
        visited[i] = 1;
        while (!queue.empty()) {
          const auto [cy, cx] = queue.front();
          queue.pop_front();
          if (cy < best_y || (cy == best_y && cx < best_x)) {
            best_y = cy;
            best_x = cx;
          }
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int ny = cy + dy, nx = cx + dx;
              if (ny < 0 || nx < 0 || ny >= hc || nx >= wc) continue;
              const size_t ni = static_cast<size_t>(ny) * wc + nx;
              if (visited[ni] || !is_peak[ni]) continue;
              if (heatmap.at(c, ny, nx) != v) continue;
              visited[ni] = 1;
              queue.emplace_back(ny, nx);
            }
        }
        peaks.push_back({best_x, best_y, c + 1, v});
      }
  }
  std::sort(peaks.begin(), peaks.end(), peak_order);
  return peaks;
}

// ---------------------------------------------------------------------------
// Matrix NMS
// ---------------------------------------------------------------------------

/// Gaussian score decay within each class:
///   decayed_j = score_j * min(1, min_{i higher} exp(-(iou_ij^2 - iou_i*^2)/sigma))
/// where iou_i* is candidate i's own largest IoU against any higher-scored
/// same-class mask. Output order matches input order; scores never increase.
inline std::vector<double> matrix_nms(const std::vector<InstanceMask>& masks,
                                      const std::vector<double>& scores,
                                      const std::vector<int>& classes, double sigma = 2.0) {
  const size_t n = masks.size();
  if (scores.size() != n || classes.size() != n)
    throw std::invalid_argument("matrix_nms: masks/scores/classes sizes differ");
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  std::vector<int64_t> areas(n);
  for (size_t i = 0; i < n; ++i) areas[i] = masks[i].area();
  auto pair_iou = [&](size_t a, size_t b) {
    const InstanceMask& ma = masks[a];
    const InstanceMask& mb = masks[b];
    const int x0 = std::max(ma.x0, mb.x0), y0 = std::max(ma.y0, mb.y0);
    const int x1 = std::min(ma.x0 + ma.w, mb.x0 + mb.w), y1 = std::min(ma.y0 + ma.h, mb.y0 + mb.h);
    int64_t inter = 0;
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x)
        if (ma.at_global(y, x) && mb.at_global(y, x)) ++inter;
    const int64_t uni = areas[a] + areas[b] - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
  };

  // pairwise IoU in sorted order, same-class only
  std::vector<std::vector<double>> iou(n);
  for (size_t j = 0; j < n; ++j) {
    iou[j].assign(j, 0.0);
    for (size_t i = 0; i < j; ++i)
      if (classes[order[i]] == classes[order[j]]) iou[j][i] = pair_iou(order[i], order[j]);
  }
  std::vector<double> compensate(n, 0.0);  // iou_i*: max IoU with a higher-scored same-class mask
  for (size_t i = 0; i < n; ++i)
    for (size_t l = 0; l < i; ++l) compensate[i] = std::max(compensate[i], iou[i][l]);

  std::vector<double> decayed(n);
  for (size_t j = 0; j < n; ++j) {
    double factor = 1.0;
    for (size_t i = 0; i < j; ++i) {
      if (classes[order[i]] != classes[order[j]]) continue;
      factor = std::min(factor, std::exp(-(iou[j][i] * iou[j][i] -
                                           compensate[i] * compensate[i]) / sigma));
    }
    decayed[order[j]] = scores[order[j]] * std::min(1.0, factor);
  }
  return decayed;
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct InstancePrediction {
  int cls = 1;
  float score = 0.0f;
  float cx = 0.0f, cy = 0.0f;  // full-resolution center
  InstanceMask mask;
};

struct DecodeConfig {
  float conf = 0.4f;
  float mask_bin = 0.5f;
  bool use_nms = true;
  double nms_sigma = 2.0;
  float post_nms_floor = 0.05f;
  int chunk = 256;
};

inline bool prediction_order(const InstancePrediction& a, const InstancePrediction& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.cy != b.cy) return a.cy < b.cy;
  if (a.cx != b.cx) return a.cx < b.cx;
  return a.cls < b.cls;
}

/// Claims pixels in score order so surviving masks are pairwise disjoint;
/// instances emptied by the resolution are dropped.
inline std::vector<InstancePrediction> resolve_mask_overlaps(
    std::vector<InstancePrediction> preds) {
  std::sort(preds.begin(), preds.end(), prediction_order);
  std::vector<InstancePrediction> out;
  std::vector<InstanceMask> claimed;
  for (InstancePrediction& p : preds) {
    InstanceMask reduced = p.mask;
    for (const InstanceMask& c : claimed) {
      const int x0 = std::max(reduced.x0, c.x0), y0 = std::max(reduced.y0, c.y0);
      const int x1 = std::min(reduced.x0 + reduced.w, c.x0 + c.w);
      const int y1 = std::min(reduced.y0 + reduced.h, c.y0 + c.h);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
          if (c.at_global(y, x))
            reduced.data[static_cast<size_t>(y - reduced.y0) * reduced.w + (x - reduced.x0)] = 0;
    }
    if (reduced.area() == 0) continue;
    claimed.push_back(reduced);
    p.mask = std::move(reduced);
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<InstancePrediction> decode(const NetworkOutput& out, const DecodeConfig& cfg) {
  const int stride = out.stride;
  std::vector<Peak> peaks = extract_peaks(out.heatmap, cfg.conf);
  std::vector<InstancePrediction> preds;
  if (peaks.empty()) return preds;

  std::vector<InstanceMask> masks(peaks.size());
  if (out.uses_dynamic_masks()) {
    const int e = out.feature.dim(0);
    const int hc = out.kernels.dim(1), wc = out.kernels.dim(2);
    std::vector<DynamicKernel> kernels;
    kernels.reserve(peaks.size());
    for (const Peak& p : peaks) {
      DynamicKernel k(static_cast<size_t>(e));
      for (int c = 0; c < e; ++c)
        k[static_cast<size_t>(c)] = out.kernels[(static_cast<int64_t>(c) * hc + p.y) * wc + p.x];
      kernels.push_back(std::move(k));
    }
    std::vector<Tensor> soft = dynamic_masks(out.feature, kernels, cfg.chunk);
    for (size_t i = 0; i < peaks.size(); ++i)
      masks[i] = InstanceMask::from_soft(soft[i], cfg.mask_bin);
  } else {
    for (size_t i = 0; i < peaks.size(); ++i) {
      Tensor soft = standard_mask_at(out.standard_logits, stride, peaks[i].x, peaks[i].y);
      masks[i] = InstanceMask::from_soft(soft, cfg.mask_bin);
    }
  }

  for (size_t i = 0; i < peaks.size(); ++i) {
    if (masks[i].area() == 0) continue;  // empty after binarization: discard
    InstancePrediction p;
    p.cls = peaks[i].cls;
    p.score = peaks[i].score;
    p.cx = static_cast<float>(peaks[i].x * stride + stride / 2);
    p.cy = static_cast<float>(peaks[i].y * stride + stride / 2);
    p.mask = std::move(masks[i]);
    preds.push_back(std::move(p));
  }

  if (cfg.use_nms && preds.size() > 1) {
    std::vector<InstanceMask> ms(preds.size());
    std::vector<double> ss(preds.size());
    std::vector<int> cs(preds.size());
    for (size_t i = 0; i < preds.size(); ++i) {
      ms[i] = preds[i].mask;
      ss[i] = preds[i].score;
      cs[i] = preds[i].cls;
    }
    std::vector<double> decayed = matrix_nms(ms, ss, cs, cfg.nms_sigma);
    std::vector<InstancePrediction> kept;
    for (size_t i = 0; i < preds.size(); ++i) {
      if (decayed[i] < cfg.post_nms_floor) continue;
      preds[i].score = static_cast<float>(decayed[i]);
      preds[i].mask = std::move(ms[i]);
      kept.push_back(std::move(preds[i]));
    }
    preds = std::move(kept);
  }

  return resolve_mask_overlaps(std::move(preds));
}

// ---------------------------------------------------------------------------
// Sliding-window inference
// ---------------------------------------------------------------------------

struct SlidingConfig {
  int tile = 256;
  int overlap = 64;
  DecodeConfig decode;
};

/// A model for tiled inference: image tensor {3,tile,tile} -> NetworkOutput.
using ForwardFn = std::function<NetworkOutput(const Tensor&)>;

/// Edge-replicate padding of an image region to tile x tile, as a {3,h,w}
/// tensor. The region may extend past the image; source pixels clamp.
inline Tensor padded_tile(const Image& img, int x0, int y0, int tile) {
  Tensor t({3, tile, tile});
  for (int y = 0; y < tile; ++y) {
    const int sy = std::clamp(y0 + y, 0, img.height - 1);
    for (int x = 0; x < tile; ++x) {
      const int sx = std::clamp(x0 + x, 0, img.width - 1);
      for (int c = 0; c < 3; ++c) t.at(c, y, x) = img.at(sy, sx, c);
    }
  }
  return t;
}

inline std::vector<InstancePrediction> predict_sliding(const Image& img, const ForwardFn& model,
                                                       const SlidingConfig& cfg) {
  if (cfg.overlap >= cfg.tile)
    throw std::invalid_argument("predict_sliding: overlap must be smaller than tile");
  if (cfg.tile % 32 != 0)
    throw std::invalid_argument("predict_sliding: tile must be a multiple of 32");
  const int step = cfg.tile - cfg.overlap;
  const int margin = cfg.overlap / 2;

  std::vector<int> xs{0}, ys{0};
  while (xs.back() + cfg.tile < img.width) xs.push_back(xs.back() + step);
  while (ys.back() + cfg.tile < img.height) ys.push_back(ys.back() + step);

  std::vector<InstancePrediction> global;
  for (int y0 : ys) {
    for (int x0 : xs) {
      Tensor tile_tensor = padded_tile(img, x0, y0, cfg.tile);
      NetworkOutput out = model(tile_tensor);
      std::vector<InstancePrediction> local = decode(out, cfg.decode);

      // interior ownership: margins only on edges facing another tile
      const float lo_x = static_cast<float>(x0 == 0 ? -1e9 : x0 + margin);
      const float hi_x = static_cast<float>(x0 + cfg.tile >= img.width ? 1e9 : x0 + cfg.tile - margin);
      const float lo_y = static_cast<float>(y0 == 0 ? -1e9 : y0 + margin);
      const float hi_y = static_cast<float>(y0 + cfg.tile >= img.height ? 1e9 : y0 + cfg.tile - margin);

      for (InstancePrediction& p : local) {
        const float gx = p.cx + x0, gy = p.cy + y0;
        if (gx < lo_x || gx >= hi_x || gy < lo_y || gy >= hi_y) continue;
        p.mask.translate(x0, y0);
        InstanceMask clipped = p.mask.cropped(0, 0, img.width, img.height);
        if (clipped.area() == 0) continue;
        p.mask = std::move(clipped);
        p.cx = gx;
        p.cy = gy;
        global.push_back(std::move(p));
      }
    }
  }

  if (cfg.decode.use_nms && global.size() > 1) {
    std::vector<InstanceMask> ms(global.size());
    std::vector<double> ss(global.size());
    std::vector<int> cs(global.size());
    for (size_t i = 0; i < global.size(); ++i) {
      ms[i] = global[i].mask;
      ss[i] = global[i].score;
      cs[i] = global[i].cls;
    }
    std::vector<double> decayed = matrix_nms(ms, ss, cs, cfg.decode.nms_sigma);
    std::vector<InstancePrediction> kept;
    for (size_t i = 0; i < global.size(); ++i) {
      if (decayed[i] < cfg.decode.post_nms_floor) continue;
      global[i].score = static_cast<float>(decayed[i]);
      kept.push_back(std::move(global[i]));
    }
    global = std::move(kept);
  }
  return resolve_mask_overlaps(std::move(global));
}

/// Instance label map (0 background, 1..n in prediction order).
inline std::vector<int32_t> render_label_map(const std::vector<InstancePrediction>& preds,
                                             int height, int width) {
  std::vector<int32_t> map(static_cast<size_t>(height) * width, 0);
  for (size_t i = 0; i < preds.size(); ++i) {
    const InstanceMask& m = preds[i].mask;
    for (int y = std::max(0, m.y0); y < std::min(height, m.y0 + m.h); ++y)
      for (int x = std::max(0, m.x0); x < std::min(width, m.x0 + m.w); ++x)
        if (m.at_global(y, x)) map[static_cast<size_t>(y) * width + x] = static_cast<int32_t>(i + 1);
  }
  return map;
}

}  // namespace nuseg
