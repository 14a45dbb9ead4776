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
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace nuseg {

/// Worker count for coarse-grained parallel sections. Determinism does not
/// depend on this value for read-only work; gradient reductions are always
/// ordered by item index.
inline int worker_count() {
  static const int n = [] {
    if (const char* env = std::getenv("NUSEG_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return n;
}

/// Runs fn(worker, begin, end) over [0, n) split into contiguous chunks,
/// one per worker. Chunk boundaries depend only on (n, workers), so any
/// per-worker partial results can be reduced in worker order for a
/// schedule-independent total.
inline void parallel_chunks(int n, int workers,
                            const std::function<void(int, int, int)>& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers <= 1 || n <= 1) {
    if (n > 0) fn(0, 0, n);
    return;
  }
  const int base = n / workers;
  const int extra = n % workers;
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(workers) - 1);
  int begin = 0;
  for (int w = 0; w < workers; ++w) {
    const int len = base + (w < extra ? 1 : 0);
    const int end = begin + len;
    if (w + 1 == workers) {
      fn(w, begin, end);  // last chunk on the calling thread
    } else {
      threads.emplace_back(fn, w, begin, end);
    }
    begin = end;
  }
  for (auto& t : threads) t.join();
}

}  // namespace nuseg
