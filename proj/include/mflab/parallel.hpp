#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace mflab {

// Work is cut into fixed-size blocks that do not depend on the worker count,
// and any cross-block reduction must combine per-block partials in block
// order. That keeps floating-point results bit-identical for any --threads.
constexpr int kParallelBlock = 2048;

inline int num_blocks(int n_items) {
  return (n_items + kParallelBlock - 1) / kParallelBlock;
}

// body(block_index, begin, end) with [begin,end) an item range
inline void parallel_blocks(int n_items, int n_threads,
                            const std::function<void(int, int, int)>& body) {
  const int nb = num_blocks(n_items);
  if (nb == 0) return;
  if (n_threads <= 1 || nb == 1) {
    for (int b = 0; b < nb; ++b)
      body(b, b * kParallelBlock, std::min(n_items, (b + 1) * kParallelBlock));
    return;
  }
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int b = next.fetch_add(1);
      if (b >= nb) return;
      body(b, b * kParallelBlock, std::min(n_items, (b + 1) * kParallelBlock));
    }
  };
  std::vector<std::thread> pool;
  const int nt = std::min(n_threads, nb);
  pool.reserve(static_cast<size_t>(nt - 1));
  for (int i = 0; i < nt - 1; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
}

// sum of per-item doubles, reduced deterministically (serial combine in
// block order regardless of scheduling)
inline double parallel_sum(int n_items, int n_threads,
                           const std::function<double(int)>& item) {
  const int nb = num_blocks(n_items);
  std::vector<double> partial(static_cast<size_t>(nb), 0.0);
  parallel_blocks(n_items, n_threads, [&](int b, int i0, int i1) {
    double s = 0.0;
    for (int i = i0; i < i1; ++i) s += item(i);
    partial[static_cast<size_t>(b)] = s;
  });
  double total = 0.0;
  for (double p : partial) total += p;
  return total;
}

}  // namespace mflab
