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

#include <json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "nuseg/core/common.hpp"
#include "nuseg/data/types.hpp"

namespace nuseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNG primitives
// ---------------------------------------------------------------------------

inline void write_png_rgb(const std::string& path, const Image& img) {
  cv::Mat m(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      auto& px = m.at<cv::Vec3b>(y, x);  // BGR on disk
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(y, x, c), 0.0f, 1.0f);
        px[2 - c] = static_cast<uchar>(std::lround(v * 255.0f));
      }
    }
  if (!cv::imwrite(path, m)) throw IoError("cannot write image: " + path);
}

inline Image read_png_rgb(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  if (m.empty()) throw IoError("cannot read image: " + path);
  Image img(m.rows, m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      const auto& px = m.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = px[2 - c] / 255.0f;
    }
  return img;
}

inline void write_png_gray16(const std::string& path, const std::vector<int32_t>& values,
                             int height, int width) {
  cv::Mat m(height, width, CV_16UC1);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int32_t v = values[static_cast<size_t>(y) * width + x];
      if (v < 0 || v > 65535)
        throw IoError("value " + std::to_string(v) + " does not fit a 16-bit map: " + path);
      m.at<uint16_t>(y, x) = static_cast<uint16_t>(v);
    }
  if (!cv::imwrite(path, m)) throw IoError("cannot write 16-bit map: " + path);
}

inline std::vector<int32_t> read_png_gray16(const std::string& path, int* height, int* width) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("cannot read 16-bit map: " + path);
  if (m.channels() != 1) throw IoError("expected single-channel map: " + path);
  *height = m.rows;
  *width = m.cols;
  std::vector<int32_t> out(static_cast<size_t>(m.rows) * m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x)
      out[static_cast<size_t>(y) * m.cols + x] =
          m.depth() == CV_16U ? m.at<uint16_t>(y, x) : m.at<uchar>(y, x);
  return out;
}

inline void write_png_gray8(const std::string& path, const std::vector<uint8_t>& values,
                            int height, int width) {
  cv::Mat m(height, width, CV_8UC1);
  std::copy(values.begin(), values.end(), m.ptr<uchar>());
  if (!cv::imwrite(path, m)) throw IoError("cannot write 8-bit map: " + path);
}

inline std::vector<uint8_t> read_png_gray8(const std::string& path, int* height, int* width) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw IoError("cannot read 8-bit map: " + path);
  *height = m.rows;
  *width = m.cols;
  std::vector<uint8_t> out(static_cast<size_t>(m.rows) * m.cols);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) out[static_cast<size_t>(y) * m.cols + x] = m.at<uchar>(y, x);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory format: images/ (RGB PNG), instance_maps/ (16-bit PNG),
// class_maps/ (8-bit PNG, per-pixel class of the owning instance),
// classes.json (ordered class names, optional per-image tissue tags).
// ---------------------------------------------------------------------------

inline void save_dataset(const std::string& root, const Dataset& ds) {
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "instance_maps");
  fs::create_directories(fs::path(root) / "class_maps");
  nlohmann::json manifest;
  manifest["classes"] = ds.class_names;
  nlohmann::json tissue = nlohmann::json::object();
  for (const Sample& s : ds.samples) {
    write_png_rgb((fs::path(root) / "images" / (s.name + ".png")).string(), s.image);
    write_png_gray16((fs::path(root) / "instance_maps" / (s.name + ".png")).string(),
                     s.annotation.instance_map, s.annotation.height, s.annotation.width);
    std::vector<uint8_t> class_map(s.annotation.instance_map.size(), 0);
    for (size_t i = 0; i < class_map.size(); ++i) {
      const int32_t id = s.annotation.instance_map[i];
      if (id > 0) class_map[i] = static_cast<uint8_t>(s.annotation.class_of_id(id));
    }
    write_png_gray8((fs::path(root) / "class_maps" / (s.name + ".png")).string(), class_map,
                    s.annotation.height, s.annotation.width);
    if (!s.tissue.empty()) tissue[s.name] = s.tissue;
  }
  if (!tissue.empty()) manifest["tissue"] = tissue;
  std::ofstream out(fs::path(root) / "classes.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("cannot write manifest under " + root);
}

inline Dataset load_dataset(const std::string& root, WarningSink* sink = nullptr) {
  const fs::path base(root);
  if (!fs::exists(base / "classes.json"))
    throw IoError("missing manifest: " + (base / "classes.json").string());
  nlohmann::json manifest;
  {
    std::ifstream in(base / "classes.json");
    in >> manifest;
  }
  Dataset ds;
  ds.class_names = manifest.at("classes").get<std::vector<std::string>>();
  const int num_classes = ds.num_classes();

  auto stems_of = [](const fs::path& dir) {
    std::set<std::string> stems;
    if (fs::exists(dir))
      for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") stems.insert(e.path().stem().string());
    return stems;
  };
  const auto img_stems = stems_of(base / "images");
  const auto inst_stems = stems_of(base / "instance_maps");
  const auto cls_stems = stems_of(base / "class_maps");
  std::set<std::string> all = img_stems;
  all.insert(inst_stems.begin(), inst_stems.end());
  all.insert(cls_stems.begin(), cls_stems.end());
  for (const std::string& stem : all)
    if (!img_stems.count(stem) || !inst_stems.count(stem) || !cls_stems.count(stem))
      throw IoError("incomplete sample '" + stem + "': needs images/, instance_maps/ and "
                    "class_maps/ entries");
  if (all.empty()) throw IoError("dataset at " + root + " has no samples");

  for (const std::string& stem : all) {
    Sample s;
    s.name = stem;
    s.image = read_png_rgb((base / "images" / (stem + ".png")).string());
    int h = 0, w = 0;
    std::vector<int32_t> inst = read_png_gray16((base / "instance_maps" / (stem + ".png")).string(), &h, &w);
    int h2 = 0, w2 = 0;
    std::vector<uint8_t> cls = read_png_gray8((base / "class_maps" / (stem + ".png")).string(), &h2, &w2);
    if (h != s.image.height || w != s.image.width || h2 != h || w2 != w)
      throw IoError("sample '" + stem + "': image/map sizes disagree");

    InstanceAnnotation ann(h, w, num_classes);
    ann.instance_map = std::move(inst);
    int32_t max_id = 0;
    for (int32_t id : ann.instance_map) max_id = std::max(max_id, id);
    // majority class vote per instance
    std::vector<std::map<int, int64_t>> votes(static_cast<size_t>(max_id));
    for (size_t i = 0; i < ann.instance_map.size(); ++i) {
      const int32_t id = ann.instance_map[i];
      if (id == 0) continue;
      const int c = cls[i];
      if (c == 0)
        throw IoError("sample '" + stem + "': instance " + std::to_string(id) +
                      " has class-0 pixels (inconsistent annotation)");
      ++votes[static_cast<size_t>(id) - 1][c];
    }
    ann.class_of.assign(static_cast<size_t>(max_id), 0);
    for (int32_t id = 1; id <= max_id; ++id) {
      const auto& v = votes[static_cast<size_t>(id) - 1];
      if (v.empty()) continue;  // id unused; removed by normalize_ids below
      int best_class = 0;
      int64_t best_count = -1, total = 0;
      for (const auto& [c, n] : v) {
        total += n;
        if (n > best_count) {
          best_count = n;
          best_class = c;
        }
      }
      if (best_class > num_classes)
        throw IoError("sample '" + stem + "': class " + std::to_string(best_class) +
                      " outside the manifest's " + std::to_string(num_classes) + " classes");
      if (static_cast<size_t>(v.size()) > 1)
        warn(sink, "sample '" + stem + "': instance " + std::to_string(id) +
                       " has mixed class labels (" + std::to_string(total - best_count) + "/" +
                       std::to_string(total) + " dissenting); majority vote -> " +
                       std::to_string(best_class));
      ann.class_of[static_cast<size_t>(id) - 1] = best_class;
    }
    normalize_ids(ann);
    s.annotation = std::move(ann);
    if (manifest.contains("tissue") && manifest["tissue"].contains(stem))
      s.tissue = manifest["tissue"][stem].get<std::string>();
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace nuseg
