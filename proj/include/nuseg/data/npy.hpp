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

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nuseg/core/common.hpp"

namespace nuseg {

/// N-dimensional numeric array loaded from a .npy file, values widened to
/// float. Covers the formats the importer needs (v1/v2 headers, C order,
/// the common little-endian numeric dtypes).
struct NpyArray {
  std::vector<int64_t> shape;
  std::vector<float> data;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }
  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
  }
};

inline NpyArray read_npy(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open npy file: " + path);
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0)
    throw IoError("not an npy file: " + path);
  unsigned char major = 0, minor = 0;
  in.read(reinterpret_cast<char*>(&major), 1);
  in.read(reinterpret_cast<char*>(&minor), 1);
  uint32_t header_len = 0;
  if (major == 1) {
    uint16_t len16 = 0;
    in.read(reinterpret_cast<char*>(&len16), 2);
    header_len = len16;
  } else {
    in.read(reinterpret_cast<char*>(&header_len), 4);
  }
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  if (!in) throw IoError("truncated npy header: " + path);

  auto field = [&](const std::string& key) {
    const size_t k = header.find("'" + key + "'");
    if (k == std::string::npos) throw IoError("npy header missing " + key + ": " + path);
    return k;
  };
  // descr
  size_t p = header.find(':', field("descr"));
  size_t q1 = header.find('\'', p);
  size_t q2 = header.find('\'', q1 + 1);
  const std::string descr = header.substr(q1 + 1, q2 - q1 - 1);
  // fortran_order
  p = header.find(':', field("fortran_order"));
  if (header.find("True", p) != std::string::npos &&
      header.find("True", p) < header.find(',', p))
    throw IoError("fortran-order npy unsupported: " + path);
  // shape tuple
  p = header.find('(', field("shape"));
  size_t e = header.find(')', p);
  std::string tuple = header.substr(p + 1, e - p - 1);
  NpyArray arr;
  std::stringstream ss(tuple);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const std::string trimmed = tok.substr(tok.find_first_not_of(" \t") == std::string::npos
                                               ? tok.size()
                                               : tok.find_first_not_of(" \t"));
    if (trimmed.empty()) continue;
    arr.shape.push_back(std::stoll(trimmed));
  }

  const int64_t n = arr.numel();
  arr.data.resize(static_cast<size_t>(n));
  auto read_as = [&](auto sample) {
    using T = decltype(sample);
    std::vector<T> buf(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(T)));
    if (!in) throw IoError("truncated npy payload: " + path);
    for (int64_t i = 0; i < n; ++i) arr.data[static_cast<size_t>(i)] = static_cast<float>(buf[static_cast<size_t>(i)]);
  };
  if (descr == "<f4" || descr == "|f4")
    read_as(float{});
  else if (descr == "<f8")
    read_as(double{});
  else if (descr == "|u1")
    read_as(uint8_t{});
  else if (descr == "|i1")
    read_as(int8_t{});
  else if (descr == "<u2")
    read_as(uint16_t{});
  else if (descr == "<i2")
    read_as(int16_t{});
  else if (descr == "<i4")
    read_as(int32_t{});
  else if (descr == "<u4")
    read_as(uint32_t{});
  else if (descr == "<i8")
    read_as(int64_t{});
  else
    throw IoError("unsupported npy dtype '" + descr + "': " + path);
  return arr;
}

/// float32 writer (round-trip partner of read_npy for tests and fixtures).
inline void write_npy(const std::string& path, const std::vector<int64_t>& shape,
                      const std::vector<float>& data) {
  std::ostringstream dict;
  dict << "{'descr': '<f4', 'fortran_order': False, 'shape': (";
  for (size_t i = 0; i < shape.size(); ++i) dict << shape[i] << (shape.size() == 1 ? "," : i + 1 < shape.size() ? ", " : "");
  dict << "), }";
  std::string header = dict.str();
  const size_t base = 6 + 2 + 2;
  const size_t pad = 64 - ((base + header.size() + 1) % 64);
  header.append(pad, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write npy file: " + path);
  out.write("\x93NUMPY", 6);
  out.put(1).put(0);
  const uint16_t len = static_cast<uint16_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!out) throw IoError("short write: " + path);
}

}  // namespace nuseg
