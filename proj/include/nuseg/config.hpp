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
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "nuseg/core/common.hpp"
#include "nuseg/data/augment.hpp"
#include "nuseg/data/types.hpp"
#include "nuseg/model/network.hpp"
#include "nuseg/train/trainer.hpp"

namespace nuseg {

/// Every runtime knob, as a flat key = value file. All keys have defaults;
/// unknown keys are rejected. CLI --set options override file values.
struct RunConfig {
  // model (preset first: it rewrites backbone/head keys, later keys win)
  std::string preset;  // "", "default", "m", "s"
  int num_classes = 0;  // 0: take from the dataset manifest
  int embed_dim = 64;
  int stride = 4;
  int head_depth = 7;
  int head_channels = 256;
  std::string backbone = "hr-small";
  int backbone_width = 0;
  int backbone_blocks = 0;
  std::string neck = "jpfm-unshared";
  int jpfm_branch_channels = 128;
  int jpfm_out_channels = 256;
  std::string segmentor = "dynamic";
  int standard_grid = 0;  // 0: crop_size / stride
  uint64_t init_seed = 1;

  // training
  int epochs = 100;
  double base_lr = 1e-4;
  double weight_decay = 1e-4;
  int batch_size = 8;
  std::string lr_drop_epochs = "80,90";
  double lr_drop_factor = 0.1;
  int crop_size = 256;
  uint64_t seed = 0;
  double val_fraction = 0.1;
  double lambda_mask = 1.0;
  double tau = 0.5;
  double grad_clip = 10.0;
  std::string detector_target = "keypoint-heatmap";
  std::string detector_loss = "focal";
  int workers = 2;

  // augmentation
  bool aug_enabled = true;
  bool aug_crop = true;
  bool aug_flip = true;
  bool aug_color = true;
  bool aug_blur = true;
  bool aug_elastic = true;
  double color_amount = 0.12;
  double blur_prob = 0.3;
  double blur_sigma_max = 1.5;
  double elastic_prob = 0.5;
  double elastic_alpha = 20.0;
  double elastic_sigma = 10.0;

  // inference
  double conf = 0.4;
  double mask_bin = 0.5;
  bool use_nms = true;
  double nms_sigma = 2.0;
  double post_nms_floor = 0.05;
  int tile = 256;
  int tile_overlap = 64;
  int segmentor_chunk = 256;

  // metrics
  double det_radius = 12.0;

  // synthetic data
  int synth_images = 16;
  int synth_size = 128;
  int synth_min_instances = 4;
  int synth_max_instances = 12;
  int synth_classes = 2;
  double synth_axis_min = 4.0;
  double synth_axis_max = 10.0;
  double synth_overlap = 0.0;
  double synth_noise = 0.03;
};

namespace detail {

using ConfigMember = std::variant<int RunConfig::*, double RunConfig::*, bool RunConfig::*,
                                  std::string RunConfig::*, uint64_t RunConfig::*>;

struct KeyDesc {
  const char* name;
  ConfigMember member;
};

inline const std::vector<KeyDesc>& config_keys() {
  static const std::vector<KeyDesc> keys = {
      {"preset", &RunConfig::preset},
      {"num_classes", &RunConfig::num_classes},
      {"embed_dim", &RunConfig::embed_dim},
      {"stride", &RunConfig::stride},
      {"head_depth", &RunConfig::head_depth},
      {"head_channels", &RunConfig::head_channels},
      {"backbone", &RunConfig::backbone},
      {"backbone_width", &RunConfig::backbone_width},
      {"backbone_blocks", &RunConfig::backbone_blocks},
      {"neck", &RunConfig::neck},
      {"jpfm_branch_channels", &RunConfig::jpfm_branch_channels},
      {"jpfm_out_channels", &RunConfig::jpfm_out_channels},
      {"segmentor", &RunConfig::segmentor},
      {"standard_grid", &RunConfig::standard_grid},
      {"init_seed", &RunConfig::init_seed},
      {"epochs", &RunConfig::epochs},
      {"base_lr", &RunConfig::base_lr},
      {"weight_decay", &RunConfig::weight_decay},
      {"batch_size", &RunConfig::batch_size},
      {"lr_drop_epochs", &RunConfig::lr_drop_epochs},
      {"lr_drop_factor", &RunConfig::lr_drop_factor},
      {"crop_size", &RunConfig::crop_size},
      {"seed", &RunConfig::seed},
      {"val_fraction", &RunConfig::val_fraction},
      {"lambda_mask", &RunConfig::lambda_mask},
      {"tau", &RunConfig::tau},
      {"grad_clip", &RunConfig::grad_clip},
      {"detector_target", &RunConfig::detector_target},
      {"detector_loss", &RunConfig::detector_loss},
      {"workers", &RunConfig::workers},
      {"aug_enabled", &RunConfig::aug_enabled},
      {"aug_crop", &RunConfig::aug_crop},
      {"aug_flip", &RunConfig::aug_flip},
      {"aug_color", &RunConfig::aug_color},
      {"aug_blur", &RunConfig::aug_blur},
      {"aug_elastic", &RunConfig::aug_elastic},
      {"color_amount", &RunConfig::color_amount},
      {"blur_prob", &RunConfig::blur_prob},
      {"blur_sigma_max", &RunConfig::blur_sigma_max},
      {"elastic_prob", &RunConfig::elastic_prob},
      {"elastic_alpha", &RunConfig::elastic_alpha},
      {"elastic_sigma", &RunConfig::elastic_sigma},
      {"conf", &RunConfig::conf},
      {"mask_bin", &RunConfig::mask_bin},
      {"use_nms", &RunConfig::use_nms},
      {"nms_sigma", &RunConfig::nms_sigma},
      {"post_nms_floor", &RunConfig::post_nms_floor},
      {"tile", &RunConfig::tile},
      {"tile_overlap", &RunConfig::tile_overlap},
      {"segmentor_chunk", &RunConfig::segmentor_chunk},
      {"det_radius", &RunConfig::det_radius},
      {"synth_images", &RunConfig::synth_images},
      {"synth_size", &RunConfig::synth_size},
      {"synth_min_instances", &RunConfig::synth_min_instances},
      {"synth_max_instances", &RunConfig::synth_max_instances},
      {"synth_classes", &RunConfig::synth_classes},
      {"synth_axis_min", &RunConfig::synth_axis_min},
      {"synth_axis_max", &RunConfig::synth_axis_max},
      {"synth_overlap", &RunConfig::synth_overlap},
      {"synth_noise", &RunConfig::synth_noise},
  };
  return keys;
}

inline std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

}  // namespace detail

inline void apply_preset(RunConfig& cfg, const std::string& preset) {
  if (preset == "default") {
    cfg.backbone = "hr-large";
    cfg.backbone_width = 64;
    cfg.head_depth = 7;
  } else if (preset == "m") {
    cfg.backbone = "hr-large";
    cfg.backbone_width = 32;
    cfg.head_depth = 4;
  } else if (preset == "s") {
    cfg.backbone = "hr-small";
    cfg.backbone_width = 16;
    cfg.head_depth = 4;
  } else if (!preset.empty()) {
    throw ConfigError("unknown preset '" + preset + "' (default|m|s)");
  }
  cfg.preset = preset;
}

inline void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "preset") {
    apply_preset(cfg, detail::trim(value));
    return;
  }
  for (const auto& desc : detail::config_keys()) {
    if (key != desc.name) continue;
    const std::string v = detail::trim(value);
    try {
      std::visit(
          [&](auto member) {
            using T = std::remove_reference_t<decltype(cfg.*member)>;
            if constexpr (std::is_same_v<T, int>)
              cfg.*member = std::stoi(v);
            else if constexpr (std::is_same_v<T, double>)
              cfg.*member = std::stod(v);
            else if constexpr (std::is_same_v<T, bool>)
              cfg.*member = detail::parse_bool(v, key);
            else if constexpr (std::is_same_v<T, uint64_t>)
              cfg.*member = std::stoull(v);
            else
              cfg.*member = v;
          },
          desc.member);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': cannot parse value '" + value + "'");
    }
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    set_config_key(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

/// Full dump of the resolved configuration; reusable as a config file.
inline std::string echo_config(const RunConfig& cfg) {
  std::ostringstream os;
  os.precision(12);
  for (const auto& desc : detail::config_keys()) {
    os << desc.name << " = ";
    std::visit(
        [&](auto member) {
          using T = std::remove_reference_t<decltype(cfg.*member)>;
          if constexpr (std::is_same_v<T, bool>)
            os << ((cfg.*member) ? "true" : "false");
          else
            os << cfg.*member;
        },
        desc.member);
    os << "\n";
  }
  return os.str();
}

inline std::map<std::string, std::string> config_as_map(const RunConfig& cfg) {
  std::map<std::string, std::string> out;
  std::istringstream is(echo_config(cfg));
  std::string line;
  while (std::getline(is, line)) {
    const size_t eq = line.find(" = ");
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Materialization into the module configs
// ---------------------------------------------------------------------------

inline ModelConfig make_model_config(const RunConfig& cfg, int dataset_classes) {
  ModelConfig m;
  if (cfg.num_classes > 0 && dataset_classes > 0 && cfg.num_classes != dataset_classes)
    throw ConfigError("num_classes " + std::to_string(cfg.num_classes) +
                      " disagrees with the dataset manifest (" + std::to_string(dataset_classes) +
                      ")");
  m.num_classes = cfg.num_classes > 0 ? cfg.num_classes : dataset_classes;
  if (m.num_classes <= 0) throw ConfigError("num_classes unresolved (no dataset manifest)");
  m.embed_dim = cfg.embed_dim;
  m.stride = cfg.stride;
  m.head_depth = cfg.head_depth;
  m.head_channels = cfg.head_channels;
  m.backbone = cfg.backbone;
  m.backbone_width = cfg.backbone_width;
  m.backbone_blocks = cfg.backbone_blocks;
  m.neck = cfg.neck;
  m.jpfm_branch_channels = cfg.jpfm_branch_channels;
  m.jpfm_out_channels = cfg.jpfm_out_channels;
  m.segmentor = cfg.segmentor;
  m.standard_grid = cfg.standard_grid > 0 ? cfg.standard_grid : cfg.crop_size / cfg.stride;
  m.init_seed = cfg.init_seed;
  m.validate();
  return m;
}

inline TrainConfig make_train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.epochs;
  t.base_lr = cfg.base_lr;
  t.weight_decay = cfg.weight_decay;
  t.batch_size = cfg.batch_size;
  t.lr_drop_epochs.clear();
  std::stringstream ss(cfg.lr_drop_epochs);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = detail::trim(tok);
    if (tok.empty()) continue;
    try {
      t.lr_drop_epochs.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ConfigError("lr_drop_epochs: cannot parse '" + tok + "'");
    }
  }
  t.lr_drop_factor = cfg.lr_drop_factor;
  t.seed = cfg.seed;
  t.val_fraction = cfg.val_fraction;
  t.lambda_mask = cfg.lambda_mask;
  t.tau = static_cast<float>(cfg.tau);
  t.grad_clip = cfg.grad_clip;
  t.detector_target = cfg.detector_target;
  t.detector_loss = cfg.detector_loss;
  t.workers = cfg.workers;
  t.augment.enabled = cfg.aug_enabled;
  t.augment.random_crop = cfg.aug_crop;
  t.augment.crop_size = cfg.crop_size;
  t.augment.flip = cfg.aug_flip;
  t.augment.color_jitter = cfg.aug_color;
  t.augment.blur = cfg.aug_blur;
  t.augment.elastic = cfg.aug_elastic;
  t.augment.color_amount = cfg.color_amount;
  t.augment.blur_prob = cfg.blur_prob;
  t.augment.blur_sigma_max = cfg.blur_sigma_max;
  t.augment.elastic_prob = cfg.elastic_prob;
  t.augment.elastic_alpha = cfg.elastic_alpha;
  t.augment.elastic_sigma = cfg.elastic_sigma;
  if (cfg.crop_size % 32 != 0)
    throw ConfigError("crop_size must be a multiple of 32 (network input contract)");
  t.validate();
  return t;
}

inline InferConfig make_infer_config(const RunConfig& cfg) {
  InferConfig i;
  i.decode.conf = static_cast<float>(cfg.conf);
  i.decode.mask_bin = static_cast<float>(cfg.mask_bin);
  i.decode.use_nms = cfg.use_nms;
  i.decode.nms_sigma = cfg.nms_sigma;
  i.decode.post_nms_floor = static_cast<float>(cfg.post_nms_floor);
  i.decode.chunk = cfg.segmentor_chunk;
  i.tile = cfg.tile;
  i.overlap = cfg.tile_overlap;
  i.det_radius = cfg.det_radius;
  i.validate();
  return i;
}

inline SyntheticConfig make_synth_config(const RunConfig& cfg) {
  SyntheticConfig s;
  s.num_images = cfg.synth_images;
  s.image_size = cfg.synth_size;
  s.min_instances = cfg.synth_min_instances;
  s.max_instances = cfg.synth_max_instances;
  s.num_classes = cfg.synth_classes;
  s.axis_min = cfg.synth_axis_min;
  s.axis_max = cfg.synth_axis_max;
  s.overlap_allowance = cfg.synth_overlap;
  s.noise_amplitude = cfg.synth_noise;
  s.seed = cfg.seed;
  s.validate();
  return s;
}

}  // namespace nuseg
