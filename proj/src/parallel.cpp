#include "gsfield/parallel.hpp"

#include <algorithm>
#include <atomic>

namespace gsf {

namespace {
std::atomic<int> g_threads{1};
}

int thread_count() { return g_threads.load(std::memory_order_relaxed); }

void set_thread_count(int n) {
  g_threads.store(std::max(1, n), std::memory_order_relaxed);
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t, int)>& body) {
  int nt = thread_count();
  if (n <= 0) return;
  if (nt <= 1 || n == 1) {
    body(0, n, 0);
    return;
  }
  nt = int(std::min<int64_t>(nt, n));
  int64_t chunk = (n + nt - 1) / nt;
  std::vector<std::thread> workers;
  workers.reserve(nt);
  for (int t = 0; t < nt; ++t) {
    int64_t lo = t * chunk;
    int64_t hi = std::min<int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    workers.emplace_back([&body, lo, hi, t] { body(lo, hi, t); });
  }
  for (auto& w : workers) w.join();
}

}  // namespace gsf
