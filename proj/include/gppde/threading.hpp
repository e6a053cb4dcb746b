#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace gppde {

inline int& global_thread_count() {
  static int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return n;
}

/// Deterministic mode (default): static block partition of [0, n), so entry
/// writes and per-thread reduction groupings are identical on every run.
/// Fast mode: dynamic chunk scheduling; the row-to-thread assignment varies
/// between runs, so floating-point reductions may differ in the last bits.
/// Acceptance runs keep the deterministic mode.
inline bool& deterministic_mode() {
  static bool v = true;
  return v;
}

inline void parallel_for(size_t n, const std::function<void(size_t, size_t, int)>& body) {
  const int nt = std::max(1, std::min<int>(global_thread_count(), static_cast<int>(n)));
  if (nt == 1 || n < 256) {
    body(0, n, 0);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(nt));
  if (deterministic_mode()) {
    const size_t chunk = (n + static_cast<size_t>(nt) - 1) / static_cast<size_t>(nt);
    for (int t = 0; t < nt; ++t) {
      const size_t lo = static_cast<size_t>(t) * chunk;
      const size_t hi = std::min(n, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([&body, lo, hi, t] { body(lo, hi, t); });
    }
  } else {
    auto counter = std::make_shared<std::atomic<size_t>>(0);
    const size_t chunk = std::max<size_t>(16, n / (static_cast<size_t>(nt) * 16));
    for (int t = 0; t < nt; ++t) {
      pool.emplace_back([&body, counter, chunk, n, t] {
        for (;;) {
          const size_t lo = counter->fetch_add(chunk);
          if (lo >= n) break;
          body(lo, std::min(n, lo + chunk), t);
        }
      });
    }
  }
  for (auto& th : pool) th.join();
}

}  // namespace gppde
