// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace mpl {

// Applies fn(i) for i in [0, n) across a few worker threads and collects the
// results in index order. fn must be safe to call concurrently (read-only
// over shared state). Used for generation/evaluation fan-out only; training
// itself stays single-threaded.
template <typename Result>
std::vector<Result> parallel_map(size_t n, const std::function<Result(size_t)>& fn) {
  std::vector<Result> out(n);
  if (n == 0) return out;
  const size_t workers =
      std::min<size_t>({n, std::max(1u, std::thread::hardware_concurrency()), 8});
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        out[i] = fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
  return out;
}

}  // namespace mpl
