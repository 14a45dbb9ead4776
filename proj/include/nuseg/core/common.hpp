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

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nuseg {

/// Bad or inconsistent user configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Missing/corrupt files, unreadable paths (CLI exit code 1).
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite values reached the optimizer (CLI exit code 3).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// Optional sink for non-fatal diagnostics. Operations that can degrade
/// gracefully (dropped supervision, majority-vote disagreements, ...) append
/// one line per event when a sink is supplied.
using WarningSink = std::vector<std::string>;

inline void warn(WarningSink* sink, std::string msg) {
  if (sink != nullptr) sink->push_back(std::move(msg));
}

}  // namespace nuseg
