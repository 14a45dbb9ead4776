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

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>

#include "nuseg/model/network.hpp"
#include "nuseg/nn/adamw.hpp"

namespace nuseg {

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {
      {"num_classes", c.num_classes},
      {"embed_dim", c.embed_dim},
      {"stride", c.stride},
      {"head_depth", c.head_depth},
      {"head_channels", c.head_channels},
      {"backbone", c.backbone},
      {"backbone_width", c.backbone_width},
      {"backbone_blocks", c.backbone_blocks},
      {"neck", c.neck},
      {"jpfm_branch_channels", c.jpfm_branch_channels},
      {"jpfm_out_channels", c.jpfm_out_channels},
      {"segmentor", c.segmentor},
      {"standard_grid", c.standard_grid},
      {"init_seed", c.init_seed},
  };
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_classes = j.at("num_classes");
  c.embed_dim = j.at("embed_dim");
  c.stride = j.at("stride");
  c.head_depth = j.at("head_depth");
  c.head_channels = j.at("head_channels");
  c.backbone = j.at("backbone");
  c.backbone_width = j.at("backbone_width");
  c.backbone_blocks = j.at("backbone_blocks");
  c.neck = j.at("neck");
  c.jpfm_branch_channels = j.at("jpfm_branch_channels");
  c.jpfm_out_channels = j.at("jpfm_out_channels");
  c.segmentor = j.at("segmentor");
  c.standard_grid = j.at("standard_grid");
  c.init_seed = j.at("init_seed");
  return c;
}

struct CheckpointMeta {
  int epoch = 0;
  double best_val_bpq = 0.0;
  int64_t adam_step = 0;
  std::map<std::string, std::string> run_echo;
};

/// Self-describing binary container: magic + version header, a JSON
/// directory (config echo, tensor table, training state), then raw
/// little-endian float32 payloads.
inline constexpr char kCheckpointMagic[8] = {'N', 'U', 'S', 'E', 'G', 'C', 'K', '1'};

inline void save_checkpoint(const std::string& path, Network& net, const CheckpointMeta& meta,
                            const nn::AdamW* optimizer = nullptr) {
  nn::ParamList params = net.params();
  nlohmann::json dir;
  dir["version"] = 1;
  dir["model"] = model_config_to_json(net.config());
  dir["training"] = {{"epoch", meta.epoch},
                     {"best_val_bpq", meta.best_val_bpq},
                     {"adam_step", optimizer ? optimizer->step_count() : meta.adam_step}};
  dir["run"] = meta.run_echo;
  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  auto add_entry = [&](const std::string& name, const Tensor& t) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += static_cast<uint64_t>(t.numel()) * sizeof(float);
  };
  for (const auto& p : params) add_entry(p.name, *p.value);
  if (optimizer)
    for (const auto& [name, t] : optimizer->state()) add_entry("adam/" + name, t);
  dir["tensors"] = tensors;

  const std::string header = dir.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint64_t json_len = header.size();
  out.write(reinterpret_cast<const char*>(&json_len), sizeof(json_len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& p : params)
    out.write(reinterpret_cast<const char*>(p.value->ptr()),
              static_cast<std::streamsize>(p.value->numel() * sizeof(float)));
  if (optimizer)
    for (const auto& [name, t] : optimizer->state())
      out.write(reinterpret_cast<const char*>(t.ptr()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!out) throw IoError("short write while saving checkpoint: " + path);
}

struct LoadedCheckpoint {
  std::unique_ptr<Network> net;
  CheckpointMeta meta;
  std::map<std::string, Tensor> adam_state;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("not a checkpoint file: " + path);
  uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
  uint64_t json_len = 0;
  in.read(reinterpret_cast<char*>(&json_len), sizeof(json_len));
  std::string header(json_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(json_len));
  if (!in) throw IoError("truncated checkpoint header: " + path);
  nlohmann::json dir = nlohmann::json::parse(header);

  LoadedCheckpoint result;
  result.net = std::make_unique<Network>(model_config_from_json(dir.at("model")));
  result.meta.epoch = dir.at("training").at("epoch");
  result.meta.best_val_bpq = dir.at("training").at("best_val_bpq");
  result.meta.adam_step = dir.at("training").at("adam_step");
  if (dir.contains("run"))
    result.meta.run_echo = dir.at("run").get<std::map<std::string, std::string>>();

  nn::ParamList params = result.net->params();
  std::map<std::string, Tensor*> by_name;
  for (auto& p : params) by_name[p.name] = p.value;

  const std::streampos payload_start = in.tellg();
  for (const auto& entry : dir.at("tensors")) {
    const std::string name = entry.at("name");
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const uint64_t offset = entry.at("offset");
    Tensor* dst = nullptr;
    if (name.rfind("adam/", 0) == 0) {
      dst = &result.adam_state.emplace(name.substr(5), Tensor(shape)).first->second;
    } else {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw IoError("checkpoint tensor '" + name + "' has no slot");
      if (it->second->shape() != shape)
        throw IoError("checkpoint tensor '" + name + "' shape mismatch");
      dst = it->second;
    }
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(dst->ptr()),
            static_cast<std::streamsize>(dst->numel() * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint payload at '" + name + "'");
  }
  return result;
}

}  // namespace nuseg
