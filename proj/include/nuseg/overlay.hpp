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
#include <vector>

#include "nuseg/data/types.hpp"

namespace nuseg {

/// Fixed class palette for overlays (cycled past 8 classes).
inline std::array<float, 3> overlay_class_color(int cls) {
  static const std::array<float, 3> palette[] = {
      {1.00f, 0.15f, 0.15f},  // red
      {0.10f, 0.85f, 0.10f},  // green
      {0.15f, 0.35f, 1.00f},  // blue
      {1.00f, 0.85f, 0.10f},  // yellow
      {0.90f, 0.20f, 0.90f},  // magenta
      {0.10f, 0.85f, 0.85f},  // cyan
      {1.00f, 0.55f, 0.10f},  // orange
      {0.60f, 0.30f, 0.90f},  // violet
  };
  return palette[static_cast<size_t>(cls - 1) % 8];
}

/// Recolors instance boundary pixels by class; interiors stay untouched so
/// the underlying tissue remains visible. A boundary pixel belongs to an
/// instance and has a 4-neighbor with a different id (or sits on the frame).
inline Image render_overlay(const Image& img, const std::vector<int32_t>& label_map,
                            const std::vector<int>& class_of) {
  Image out = img;
  const int h = img.height, w = img.width;
  auto id_at = [&](int y, int x) { return label_map[static_cast<size_t>(y) * w + x]; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int32_t id = id_at(y, x);
      if (id == 0) continue;
      bool boundary = y == 0 || x == 0 || y == h - 1 || x == w - 1;
      if (!boundary)
        boundary = id_at(y - 1, x) != id || id_at(y + 1, x) != id || id_at(y, x - 1) != id ||
                   id_at(y, x + 1) != id;
      if (!boundary) continue;
      const auto color = overlay_class_color(class_of[static_cast<size_t>(id) - 1]);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = color[c];
    }
  return out;
}

/// Ground truth and prediction overlays side by side with a thin divider.
inline Image side_by_side(const Image& left, const Image& right) {
  const int gap = 4;
  Image out(std::max(left.height, right.height), left.width + gap + right.width);
  for (auto& v : out.rgb) v = 1.0f;
  for (int y = 0; y < left.height; ++y)
    for (int x = 0; x < left.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = left.at(y, x, c);
  for (int y = 0; y < right.height; ++y)
    for (int x = 0; x < right.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, left.width + gap + x, c) = right.at(y, x, c);
  return out;
}

}  // namespace nuseg
