#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace msae {

// Run fn(i) for i in [0, n) on up to `threads` workers. The first exception
// (lowest index) is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex m;
  std::size_t err_index = n;
  std::exception_ptr err;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; !failed && (i = next++) < n;) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard l(m);
            if (i < err_index) err_index = i, err = std::current_exception();
            failed = true;
          }
        }
      });
  }
  if (err) std::rethrow_exception(err);
}

inline std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

}  // namespace msae
