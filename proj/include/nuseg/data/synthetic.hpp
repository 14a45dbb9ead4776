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
#include <cmath>
#include <string>
#include <vector>

#include "nuseg/core/common.hpp"
#include "nuseg/core/rng.hpp"
#include "nuseg/data/types.hpp"

namespace nuseg {

/// Interior color per class, darker than the tissue background so detection
/// and classification are both learnable at desk scale.
inline std::array<float, 3> synthetic_class_color(int cls) {
  static const std::array<float, 3> palette[] = {
      {0.33f, 0.18f, 0.48f},  // purple
      {0.16f, 0.26f, 0.55f},  // blue
      {0.50f, 0.20f, 0.18f},  // brick
      {0.14f, 0.42f, 0.30f},  // green
      {0.45f, 0.34f, 0.12f},  // ochre
      {0.12f, 0.40f, 0.46f},  // teal
      {0.42f, 0.14f, 0.34f},  // magenta
      {0.28f, 0.28f, 0.28f},  // gray
  };
  return palette[static_cast<size_t>(cls - 1) % 8];
}

/// Elliptical nuclei on a light tissue-like background. Deterministic for a
/// given seed. Later instances win contested pixels (z-order), but a
/// placement is rejected if it would erase any earlier instance.
inline Dataset generate_synthetic(const SyntheticConfig& cfg, WarningSink* sink = nullptr) {
  cfg.validate();
  Dataset ds;
  for (int c = 1; c <= cfg.num_classes; ++c) ds.class_names.push_back("class_" + std::to_string(c));

  const Rng base(cfg.seed);
  const int size = cfg.image_size;
  for (int img_idx = 0; img_idx < cfg.num_images; ++img_idx) {
    Rng rng = base.split(static_cast<uint64_t>(img_idx));
    Sample s;
    char name[32];
    std::snprintf(name, sizeof(name), "synth_%05d", img_idx);
    s.name = name;
    s.image = Image(size, size);
    InstanceAnnotation ann(size, size, cfg.num_classes);

    const float bg_r = static_cast<float>(rng.uniform(0.82, 0.90));
    const float bg_g = static_cast<float>(rng.uniform(0.72, 0.80));
    const float bg_b = static_cast<float>(rng.uniform(0.80, 0.88));

    const int wanted = rng.uniform_int(cfg.min_instances, cfg.max_instances);
    std::vector<int64_t> areas;
    std::vector<int> classes;
    int placed = 0;
    for (int k = 0; k < wanted; ++k) {
      bool ok = false;
      for (int attempt = 0; attempt < 60 && !ok; ++attempt) {
        const double a = rng.uniform(cfg.axis_min, cfg.axis_max);
        const double b = rng.uniform(cfg.axis_min, cfg.axis_max);
        const double theta = rng.uniform(0.0, M_PI);
        const int margin = static_cast<int>(std::ceil(cfg.axis_max));
        const int cx = rng.uniform_int(margin, size - 1 - margin);
        const int cy = rng.uniform_int(margin, size - 1 - margin);
        const int cls = rng.uniform_int(1, cfg.num_classes);

        const double ct = std::cos(theta), st = std::sin(theta);
        std::vector<int> pixels;
        const int rad = static_cast<int>(std::ceil(std::max(a, b)));
        for (int y = cy - rad; y <= cy + rad; ++y)
          for (int x = cx - rad; x <= cx + rad; ++x) {
            const double dx = x - cx, dy = y - cy;
            const double u = (dx * ct + dy * st) / a;
            const double v = (-dx * st + dy * ct) / b;
            if (u * u + v * v <= 1.0) pixels.push_back(y * size + x);
          }
        if (pixels.empty()) continue;

        int64_t overlap = 0;
        for (int p : pixels)
          if (ann.instance_map[static_cast<size_t>(p)] != 0) ++overlap;
        if (static_cast<double>(overlap) > cfg.overlap_allowance * static_cast<double>(pixels.size()))
          continue;
        // painting must not erase any earlier instance entirely
        if (overlap > 0) {
          std::vector<int64_t> stolen(areas.size(), 0);
          for (int p : pixels) {
            const int32_t id = ann.instance_map[static_cast<size_t>(p)];
            if (id > 0) ++stolen[static_cast<size_t>(id) - 1];
          }
          bool erases = false;
          for (size_t i = 0; i < areas.size(); ++i)
            if (stolen[i] > 0 && areas[i] - stolen[i] < 1) erases = true;
          if (erases) continue;
        }

        const int id = ++placed;
        classes.push_back(cls);
        const auto color = synthetic_class_color(cls);
        const float shade = static_cast<float>(rng.uniform(-0.05, 0.05));
        for (int p : pixels) {
          const int32_t old = ann.instance_map[static_cast<size_t>(p)];
          if (old > 0) --areas[static_cast<size_t>(old) - 1];
          ann.instance_map[static_cast<size_t>(p)] = id;
          const int y = p / size, x = p % size;
          s.image.at(y, x, 0) = color[0] + shade;
          s.image.at(y, x, 1) = color[1] + shade;
          s.image.at(y, x, 2) = color[2] + shade;
        }
        areas.push_back(static_cast<int64_t>(pixels.size()));
        ok = true;
      }
      if (!ok) {
        warn(sink, s.name + ": placed " + std::to_string(placed) + "/" +
                       std::to_string(wanted) + " instances (no feasible placement left)");
        break;
      }
    }
    ann.class_of = classes;

    // background fill + texture noise
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        if (ann.id_at(y, x) == 0) {
          s.image.at(y, x, 0) = bg_r;
          s.image.at(y, x, 1) = bg_g;
          s.image.at(y, x, 2) = bg_b;
        }
        for (int c = 0; c < 3; ++c) {
          const float noisy = s.image.at(y, x, c) +
                              static_cast<float>(rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude));
          s.image.at(y, x, c) = std::min(1.0f, std::max(0.0f, noisy));
        }
      }

    normalize_ids(ann);
    s.annotation = std::move(ann);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace nuseg
