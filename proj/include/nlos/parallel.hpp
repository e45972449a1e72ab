// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace nlos {

namespace detail {
inline int& thread_count_ref() {
  static int count = [] {
    if (const char* env = std::getenv("NLOS_THREADS")) {
      const int n = std::atoi(env);
      if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return count;
}
}  // namespace detail

inline int thread_count() { return detail::thread_count_ref(); }
inline void set_thread_count(int n) {
  if (n > 0) detail::thread_count_ref() = n;
}

/// Run fn(chunk_id, begin, end) over n items split into n_chunks
/// contiguous chunks. Chunk boundaries depend only on (n, n_chunks), so
/// per-chunk results can be reduced in chunk order for output that is
/// independent of the worker count.
inline void parallel_chunks(std::size_t n, std::size_t n_chunks,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  if (n_chunks == 0) n_chunks = 1;
  if (n_chunks > n) n_chunks = n;

  const int workers = std::min<int>(thread_count(), static_cast<int>(n_chunks));
  if (workers <= 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) {
      const std::size_t begin = c * n / n_chunks;
      const std::size_t end = (c + 1) * n / n_chunks;
      fn(c, begin, end);
    }
    return;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    try {
      for (;;) {
        const std::size_t c = next.fetch_add(1);
        if (c >= n_chunks) return;
        const std::size_t begin = c * n / n_chunks;
        const std::size_t end = (c + 1) * n / n_chunks;
        fn(c, begin, end);
      }
    } catch (...) {
      std::lock_guard lock(error_mutex);
      if (!error) error = std::current_exception();
      next.store(n_chunks);  // drain remaining chunks
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers) - 1);
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Element-wise parallel loop; items must be independent.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t chunks = std::max<std::size_t>(1, static_cast<std::size_t>(thread_count()) * 4);
  parallel_chunks(n, chunks, [&](std::size_t, std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
  });
}

}  // namespace nlos
