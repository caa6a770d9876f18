#pragma once

#include <algorithm>
#include <functional>
#include <thread>
#include <vector>

namespace falcon {

/// Runs fn(i) for i in [0, count) across a few threads. Work items must be
/// independent; results land in caller-owned per-index slots so the outcome
/// does not depend on scheduling.
inline void parallel_for(int count, const std::function<void(int)>& fn,
                         int threads = 0) {
  if (threads <= 0) {
    threads = static_cast<int>(std::thread::hardware_concurrency());
  }
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < count; i += threads) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace falcon
