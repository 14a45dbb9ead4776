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
#include <utility>
#include <vector>

#include "nuseg/core/common.hpp"
#include "nuseg/core/rng.hpp"
#include "nuseg/data/types.hpp"

namespace nuseg {

struct AugmentConfig {
  bool enabled = true;
  bool random_crop = true;
  int crop_size = 256;
  bool flip = true;
  bool color_jitter = true;
  bool blur = true;
  bool elastic = true;
  double color_amount = 0.12;
  double blur_prob = 0.3;
  double blur_sigma_max = 1.5;
  double elastic_prob = 0.5;
  double elastic_alpha = 20.0;  // displacement scale, px
  double elastic_sigma = 10.0;  // field smoothing, px

  bool anything_enabled() const {
    return enabled && (random_crop || flip || color_jitter || blur || elastic);
  }
};

namespace detail {

inline std::vector<float> gaussian_kernel_1d(double sigma) {
  const int rad = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(static_cast<size_t>(2 * rad + 1));
  double sum = 0.0;
  for (int i = -rad; i <= rad; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<size_t>(i + rad)] = static_cast<float>(v);
    sum += v;
  }
  for (float& v : k) v = static_cast<float>(v / sum);
  return k;
}

/// Separable Gaussian smoothing of a single-channel float plane (replicate
/// borders).
inline std::vector<float> smooth_plane(const std::vector<float>& in, int h, int w, double sigma) {
  const std::vector<float> k = gaussian_kernel_1d(sigma);
  const int rad = (static_cast<int>(k.size()) - 1) / 2;
  std::vector<float> tmp(in.size()), out(in.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -rad; i <= rad; ++i) {
        const int sx = std::clamp(x + i, 0, w - 1);
        acc += static_cast<double>(k[static_cast<size_t>(i + rad)]) * in[static_cast<size_t>(y) * w + sx];
      }
      tmp[static_cast<size_t>(y) * w + x] = static_cast<float>(acc);
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -rad; i <= rad; ++i) {
        const int sy = std::clamp(y + i, 0, h - 1);
        acc += static_cast<double>(k[static_cast<size_t>(i + rad)]) * tmp[static_cast<size_t>(sy) * w + x];
      }
      out[static_cast<size_t>(y) * w + x] = static_cast<float>(acc);
    }
  return out;
}

}  // namespace detail

/// Geometric ops hit image and label map identically (nearest neighbor for
/// the map); photometric ops touch the image only. Instances that vanish are
/// removed and ids renumbered.
inline std::pair<Image, InstanceAnnotation> augment(const Image& img,
                                                    const InstanceAnnotation& ann,
                                                    const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.anything_enabled()) return {img, ann};

  Image out_img = img;
  InstanceAnnotation out_ann = ann;

  // --- random crop ---
  if (cfg.random_crop) {
    if (img.height < cfg.crop_size || img.width < cfg.crop_size)
      throw std::invalid_argument("augment: image smaller than crop size");
    const int y0 = rng.uniform_int(0, img.height - cfg.crop_size);
    const int x0 = rng.uniform_int(0, img.width - cfg.crop_size);
    Image ci(cfg.crop_size, cfg.crop_size);
    InstanceAnnotation ca(cfg.crop_size, cfg.crop_size, ann.num_classes);
    ca.class_of = out_ann.class_of;
    for (int y = 0; y < cfg.crop_size; ++y)
      for (int x = 0; x < cfg.crop_size; ++x) {
        for (int c = 0; c < 3; ++c) ci.at(y, x, c) = out_img.at(y0 + y, x0 + x, c);
        ca.id_at(y, x) = out_ann.id_at(y0 + y, x0 + x);
      }
    out_img = std::move(ci);
    out_ann = std::move(ca);
  }

  const int h = out_img.height, w = out_img.width;

  // --- flips ---
  if (cfg.flip) {
    if (rng.bernoulli(0.5)) {  // horizontal
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x) {
          for (int c = 0; c < 3; ++c) std::swap(out_img.at(y, x, c), out_img.at(y, w - 1 - x, c));
          std::swap(out_ann.id_at(y, x), out_ann.id_at(y, w - 1 - x));
        }
    }
    if (rng.bernoulli(0.5)) {  // vertical
      for (int y = 0; y < h / 2; ++y)
        for (int x = 0; x < w; ++x) {
          for (int c = 0; c < 3; ++c) std::swap(out_img.at(y, x, c), out_img.at(h - 1 - y, x, c));
          std::swap(out_ann.id_at(y, x), out_ann.id_at(h - 1 - y, x));
        }
    }
  }

  // --- elastic deformation (one displacement field for both) ---
  if (cfg.elastic && rng.bernoulli(cfg.elastic_prob)) {
    std::vector<float> fx(static_cast<size_t>(h) * w), fy(fx.size());
    for (auto& v : fx) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& v : fy) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    fx = detail::smooth_plane(fx, h, w, cfg.elastic_sigma);
    fy = detail::smooth_plane(fy, h, w, cfg.elastic_sigma);
    Image warped(h, w);
    InstanceAnnotation wann(h, w, out_ann.num_classes);
    wann.class_of = out_ann.class_of;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const size_t i = static_cast<size_t>(y) * w + x;
        const double sx = std::clamp(static_cast<double>(x) + cfg.elastic_alpha * fx[i], 0.0,
                                     static_cast<double>(w - 1));
        const double sy = std::clamp(static_cast<double>(y) + cfg.elastic_alpha * fy[i], 0.0,
                                     static_cast<double>(h - 1));
        // bilinear for the image
        const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
        const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
        const float wx = static_cast<float>(sx - x0), wy = static_cast<float>(sy - y0);
        for (int c = 0; c < 3; ++c)
          warped.at(y, x, c) = (1 - wy) * ((1 - wx) * out_img.at(y0, x0, c) + wx * out_img.at(y0, x1, c)) +
                               wy * ((1 - wx) * out_img.at(y1, x0, c) + wx * out_img.at(y1, x1, c));
        // nearest for the label map
        wann.id_at(y, x) = out_ann.id_at(static_cast<int>(std::lround(sy)),
                                         static_cast<int>(std::lround(sx)));
      }
    out_img = std::move(warped);
    out_ann = std::move(wann);
  }

  // --- color jitter (image only) ---
  if (cfg.color_jitter) {
    const float brightness = static_cast<float>(1.0 + rng.uniform(-cfg.color_amount, cfg.color_amount));
    const float contrast = static_cast<float>(1.0 + rng.uniform(-cfg.color_amount, cfg.color_amount));
    const float saturation = static_cast<float>(1.0 + rng.uniform(-cfg.color_amount, cfg.color_amount));
    double mean = 0.0;
    for (float v : out_img.rgb) mean += v;
    mean /= static_cast<double>(out_img.rgb.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float gray =
            (out_img.at(y, x, 0) + out_img.at(y, x, 1) + out_img.at(y, x, 2)) / 3.0f;
        for (int c = 0; c < 3; ++c) {
          float v = out_img.at(y, x, c) * brightness;
          v = (v - static_cast<float>(mean)) * contrast + static_cast<float>(mean);
          v = gray + (v - gray) * saturation;
          out_img.at(y, x, c) = std::clamp(v, 0.0f, 1.0f);
        }
      }
  }

  // --- blur (image only) ---
  if (cfg.blur && rng.bernoulli(cfg.blur_prob)) {
    const double sigma = rng.uniform(0.3, cfg.blur_sigma_max);
    for (int c = 0; c < 3; ++c) {
      std::vector<float> plane(static_cast<size_t>(h) * w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) plane[static_cast<size_t>(y) * w + x] = out_img.at(y, x, c);
      plane = detail::smooth_plane(plane, h, w, sigma);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out_img.at(y, x, c) = plane[static_cast<size_t>(y) * w + x];
    }
  }

  normalize_ids(out_ann);
  return {std::move(out_img), std::move(out_ann)};
}

}  // namespace nuseg
