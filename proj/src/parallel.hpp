#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace cjmix::detail {

// Chunk boundaries depend only on n and chunk, never on the thread count,
// so per-chunk partial results reduced in chunk order are bitwise stable.
inline int chunk_count(int n, int chunk) { return n <= 0 ? 0 : (n + chunk - 1) / chunk; }

template <class Fn>
void for_each_chunk(int n, int chunk, int threads, Fn&& fn) {
  const int chunks = chunk_count(n, chunk);
  auto run = [&](int c) {
    const int begin = c * chunk;
    fn(c, begin, std::min(n, begin + chunk));
  };
  const int workers = std::min(std::max(threads, 1), chunks);
  if (workers <= 1) {
    for (int c = 0; c < chunks; ++c) run(c);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (int c = w; c < chunks; c += workers) run(c);
    });
}

}  // namespace cjmix::detail
