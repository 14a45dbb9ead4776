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

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nuseg/data/io.hpp"
#include "nuseg/inference/decode.hpp"
#include "nuseg/metrics/metrics.hpp"

namespace nuseg {

/// One prediction file pair per image: a 16-bit instance label map PNG plus
/// a text sidecar of "id class score cx cy" rows.
inline void save_predictions(const std::string& path_base,
                             const std::vector<InstancePrediction>& preds, int height,
                             int width) {
  write_png_gray16(path_base + ".png", render_label_map(preds, height, width), height, width);
  std::ofstream out(path_base + ".tsv");
  if (!out) throw IoError("cannot write sidecar: " + path_base + ".tsv");
  out << "# id\tclass\tscore\tcx\tcy\n";
  out.precision(9);
  for (size_t i = 0; i < preds.size(); ++i)
    out << (i + 1) << "\t" << preds[i].cls << "\t" << preds[i].score << "\t" << preds[i].cx
        << "\t" << preds[i].cy << "\n";
  if (!out) throw IoError("short write: " + path_base + ".tsv");
}

inline ImagePredictions load_predictions(const std::string& path_base) {
  ImagePredictions ip;
  ip.label_map = read_png_gray16(path_base + ".png", &ip.height, &ip.width);
  std::ifstream in(path_base + ".tsv");
  if (!in) throw IoError("cannot read sidecar: " + path_base + ".tsv");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    int id = 0, cls = 0;
    float score = 0, cx = 0, cy = 0;
    ss >> id >> cls >> score >> cx >> cy;
    if (!ss) throw IoError("malformed sidecar row: " + line);
    ip.classes.push_back(cls);
    ip.scores.push_back(score);
    ip.centers.emplace_back(cx, cy);
  }
  int32_t max_id = 0;
  for (int32_t v : ip.label_map) max_id = std::max(max_id, v);
  if (max_id > static_cast<int32_t>(ip.classes.size()))
    throw IoError("sidecar lists fewer instances than the label map: " + path_base);
  return ip;
}

inline ImagePredictions to_image_predictions(const std::vector<InstancePrediction>& preds,
                                             int height, int width) {
  ImagePredictions ip;
  ip.height = height;
  ip.width = width;
  ip.label_map = render_label_map(preds, height, width);
  for (const auto& p : preds) {
    ip.classes.push_back(p.cls);
    ip.scores.push_back(p.score);
    ip.centers.emplace_back(p.cx, p.cy);
  }
  return ip;
}

}  // namespace nuseg
