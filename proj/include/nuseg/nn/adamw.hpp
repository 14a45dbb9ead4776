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

#include <cmath>
#include <map>
#include <string>

#include "nuseg/nn/layers.hpp"

namespace nuseg::nn {

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// name so optimizer state survives checkpoint round trips.
class AdamW {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void step(const ParamList& params, double lr, double weight_decay) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, t_);
    const double bc2 = 1.0 - std::pow(beta2, t_);
    for (const ParamRef& p : params) {
      Tensor& m = buffer(p.name + ".m", p.value->shape());
      Tensor& v = buffer(p.name + ".v", p.value->shape());
      Tensor& w = *p.value;
      const Tensor& g = *p.grad;
      for (int64_t i = 0; i < w.numel(); ++i) {
        m[i] = static_cast<float>(beta1 * m[i] + (1.0 - beta1) * g[i]);
        v[i] = static_cast<float>(beta2 * v[i] + (1.0 - beta2) * static_cast<double>(g[i]) * g[i]);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] = static_cast<float>(w[i] - lr * (mhat / (std::sqrt(vhat) + eps) +
                                               weight_decay * w[i]));
      }
    }
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }

  std::map<std::string, Tensor>& state() { return state_; }
  const std::map<std::string, Tensor>& state() const { return state_; }

 private:
  Tensor& buffer(const std::string& key, const std::vector<int>& shape) {
    auto it = state_.find(key);
    if (it == state_.end()) it = state_.emplace(key, Tensor(shape)).first;
    return it->second;
  }

  std::map<std::string, Tensor> state_;
  int64_t t_ = 0;
};

inline void zero_grads(const ParamList& params) {
  for (const ParamRef& p : params) p.grad->zero();
}

inline double global_grad_norm(const ParamList& params) {
  double sq = 0.0;
  for (const ParamRef& p : params)
    for (int64_t i = 0; i < p.grad->numel(); ++i)
      sq += static_cast<double>((*p.grad)[i]) * (*p.grad)[i];
  return std::sqrt(sq);
}

inline void clip_grad_norm(const ParamList& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm <= max_norm || norm == 0.0) return;
  const float scale = static_cast<float>(max_norm / norm);
  for (const ParamRef& p : params)
    for (int64_t i = 0; i < p.grad->numel(); ++i) (*p.grad)[i] *= scale;
}

}  // namespace nuseg::nn
