#pragma once

#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace instformer::core {

// Runs fn(i) for i in [0, n) across up to `workers` threads. Each index is an
// independent unit of work (per-video generation/inference); callers make
// determinism hold by keying all randomness off the index, never the thread.
// The first worker exception is rethrown on the calling thread.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn, int workers = 0) {
  if (workers <= 0) workers = int(std::thread::hardware_concurrency());
  if (workers < 1) workers = 1;
  if (n <= 1 || workers == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  int tcount = int(std::min<int64_t>(workers, n));
  pool.reserve(size_t(tcount));
  std::exception_ptr first_error;
  std::mutex error_mutex;
  for (int t = 0; t < tcount; ++t) {
    pool.emplace_back([t, tcount, n, &fn, &first_error, &error_mutex] {
      for (int64_t i = t; i < n; i += tcount) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace instformer::core
