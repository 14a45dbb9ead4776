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

#include "nuseg/core/tensor.hpp"

namespace nuseg {

/// One forward pass worth of predictions.
///  heatmap: {C, H/R, W/R}, sigmoid outputs in (0,1)
///  kernels: {E, H/R, W/R}, raw per-cell mask kernels
///  feature: {E, H, W}, shared full-resolution mask feature
/// When the network runs the standard (non-dynamic) segmentation branch,
/// kernels/feature are empty and standard_logits holds a (H/R * W/R)-channel
/// stride-R logit stack, one channel per cell.
struct NetworkOutput {
  Tensor heatmap;
  Tensor kernels;
  Tensor feature;
  Tensor standard_logits;
  int stride = 4;

  bool uses_dynamic_masks() const { return !kernels.empty(); }
};

}  // namespace nuseg
