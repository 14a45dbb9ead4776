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

#include <map>
#include <string>
#include <vector>

#include "nuseg/core/common.hpp"
#include "nuseg/data/io.hpp"
#include "nuseg/data/npy.hpp"
#include "nuseg/data/types.hpp"

namespace nuseg {

/// Converts pre-extracted patch blobs (images: N x H x W x 3; masks:
/// N x H x W x (C+1) with per-class instance-id channels and a trailing
/// background channel) into the on-disk dataset format. Pixels claimed by
/// several class channels go to the channel whose instance is smaller (ties
/// to the lower channel index).
inline Dataset import_pannuke(const std::string& images_npy, const std::string& masks_npy,
                              const std::string& out_root, WarningSink* sink = nullptr) {
  NpyArray images = read_npy(images_npy);
  NpyArray masks = read_npy(masks_npy);
  if (images.shape.size() != 4 || masks.shape.size() != 4 || images.shape[3] != 3 ||
      masks.shape[3] < 2 || images.shape[0] != masks.shape[0] ||
      images.shape[1] != masks.shape[1] || images.shape[2] != masks.shape[2])
    throw IoError("blob shape mismatch: images " + images.shape_str() + " vs masks " +
                  masks.shape_str() + " (want N,H,W,3 and N,H,W,C+1)");

  const int n = static_cast<int>(images.shape[0]);
  const int h = static_cast<int>(images.shape[1]);
  const int w = static_cast<int>(images.shape[2]);
  const int classes = static_cast<int>(masks.shape[3]) - 1;

  float img_max = 0.0f;
  for (float v : images.data) img_max = std::max(img_max, v);
  const float img_scale = img_max > 1.5f ? 1.0f / 255.0f : 1.0f;

  Dataset ds;
  for (int c = 1; c <= classes; ++c) ds.class_names.push_back("class_" + std::to_string(c));

  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t mask_stride = plane * (classes + 1);
  for (int i = 0; i < n; ++i) {
    Sample s;
    char name[32];
    std::snprintf(name, sizeof(name), "pannuke_%05d", i);
    s.name = name;
    s.image = Image(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          s.image.at(y, x, c) = std::clamp(
              images.data[static_cast<size_t>(((static_cast<int64_t>(i) * h + y) * w + x) * 3 + c)] *
                  img_scale,
              0.0f, 1.0f);

    // raw claim areas per (channel, id)
    const float* m = masks.data.data() + static_cast<size_t>(i) * mask_stride;
    std::map<std::pair<int, int32_t>, int64_t> claim_area;
    for (int ch = 0; ch < classes; ++ch)
      for (int64_t p = 0; p < plane; ++p) {
        const int32_t id = static_cast<int32_t>(std::lround(m[p * (classes + 1) + ch]));
        if (id > 0) ++claim_area[{ch, id}];
      }

    InstanceAnnotation ann(h, w, classes);
    std::map<std::pair<int, int32_t>, int32_t> instance_index;
    std::vector<int> classes_of;
    for (int64_t p = 0; p < plane; ++p) {
      int best_ch = -1;
      int32_t best_id = 0;
      int64_t best_area = 0;
      for (int ch = 0; ch < classes; ++ch) {
        const int32_t id = static_cast<int32_t>(std::lround(m[p * (classes + 1) + ch]));
        if (id <= 0) continue;
        const int64_t area = claim_area.at({ch, id});
        if (best_ch < 0 || area < best_area) {  // smaller instance wins; tie -> lower channel
          best_ch = ch;
          best_id = id;
          best_area = area;
        }
      }
      if (best_ch < 0) continue;
      auto [it, inserted] = instance_index.emplace(std::make_pair(best_ch, best_id),
                                                   static_cast<int32_t>(classes_of.size() + 1));
      if (inserted) classes_of.push_back(best_ch + 1);
      ann.instance_map[static_cast<size_t>(p)] = it->second;
    }
    ann.class_of = std::move(classes_of);
    normalize_ids(ann);
    s.annotation = std::move(ann);
    ds.samples.push_back(std::move(s));
  }

  (void)sink;
  save_dataset(out_root, ds);
  return ds;
}

}  // namespace nuseg
