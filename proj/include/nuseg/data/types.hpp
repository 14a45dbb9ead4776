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
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nuseg/core/common.hpp"
#include "nuseg/core/tensor.hpp"

namespace nuseg {

/// RGB image, row-major (y, x, channel), values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;  // height * width * 3

  Image() = default;
  Image(int h, int w) : height(h), width(w), rgb(static_cast<size_t>(h) * w * 3, 0.0f) {}

  float& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }

  /// Channel-major {3, H, W} tensor for the network.
  Tensor to_tensor() const {
    Tensor t({3, height, width});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) t.at(c, y, x) = at(y, x, c);
    return t;
  }
};

/// Per-image ground truth: an instance label map (0 = background, ids
/// contiguous from 1) plus each instance's class in {1..num_classes}.
struct InstanceAnnotation {
  int height = 0;
  int width = 0;
  std::vector<int32_t> instance_map;  // height * width
  std::vector<int> class_of;          // class_of[k-1] = class of instance k
  int num_classes = 0;

  InstanceAnnotation() = default;
  InstanceAnnotation(int h, int w, int classes)
      : height(h), width(w), instance_map(static_cast<size_t>(h) * w, 0), num_classes(classes) {}

  int num_instances() const { return static_cast<int>(class_of.size()); }
  int32_t id_at(int y, int x) const { return instance_map[static_cast<size_t>(y) * width + x]; }
  int32_t& id_at(int y, int x) { return instance_map[static_cast<size_t>(y) * width + x]; }

  int class_of_id(int id) const { return class_of[static_cast<size_t>(id) - 1]; }

  std::vector<int64_t> instance_areas() const {
    std::vector<int64_t> areas(class_of.size(), 0);
    for (int32_t id : instance_map)
      if (id > 0) ++areas[static_cast<size_t>(id) - 1];
    return areas;
  }

  /// Full-resolution binary mask of one instance as a float {H, W} tensor.
  Tensor mask_of(int id) const {
    Tensor m({height, width});
    for (size_t i = 0; i < instance_map.size(); ++i)
      if (instance_map[i] == id) m[static_cast<int64_t>(i)] = 1.0f;
    return m;
  }
};

/// Relabels instance ids to be contiguous from 1, dropping ids that no
/// longer own any pixel. class_of entries follow the relabeling.
inline void normalize_ids(InstanceAnnotation& ann) {
  std::map<int32_t, int32_t> remap;
  for (int32_t id : ann.instance_map)
    if (id > 0) remap.emplace(id, 0);
  int32_t next = 1;
  for (auto& [old_id, new_id] : remap) new_id = next++;
  std::vector<int> new_classes(remap.size(), 0);
  for (const auto& [old_id, new_id] : remap) {
    const size_t old_idx = static_cast<size_t>(old_id) - 1;
    if (old_idx < ann.class_of.size())
      new_classes[static_cast<size_t>(new_id) - 1] = ann.class_of[old_idx];
  }
  for (int32_t& id : ann.instance_map)
    if (id > 0) id = remap.at(id);
  ann.class_of = std::move(new_classes);
}

struct Sample {
  std::string name;
  Image image;
  InstanceAnnotation annotation;
  std::string tissue;  // optional tag
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  size_t size() const { return samples.size(); }
  bool has_tissue_tags() const {
    return std::any_of(samples.begin(), samples.end(),
                       [](const Sample& s) { return !s.tissue.empty(); });
  }
};

struct SyntheticConfig {
  int image_size = 128;
  int min_instances = 4;
  int max_instances = 12;
  double axis_min = 4.0;   // ellipse semi-axis, pixels
  double axis_max = 10.0;  // ellipse semi-axis, pixels
  int num_classes = 2;
  double overlap_allowance = 0.0;  // max fraction of a new instance's area
                                   // allowed to overlap existing ones
  double noise_amplitude = 0.03;
  uint64_t seed = 0;
  int num_images = 16;

  void validate() const {
    if (image_size < 32) throw ConfigError("synthetic: image_size must be >= 32");
    if (axis_min < 2.0) throw ConfigError("synthetic: axis_min must be >= 2 px");
    if (axis_max < axis_min) throw ConfigError("synthetic: axis_max < axis_min");
    if (min_instances < 1 || max_instances < min_instances)
      throw ConfigError("synthetic: invalid instance count range");
    if (num_classes < 1) throw ConfigError("synthetic: num_classes must be >= 1");
    if (num_images < 1) throw ConfigError("synthetic: num_images must be >= 1");
    if (overlap_allowance < 0.0 || overlap_allowance > 1.0)
      throw ConfigError("synthetic: overlap_allowance must be in [0,1]");
  }
};

}  // namespace nuseg
