#pragma once

// Deterministic data-parallel reductions: the sample range is cut into a
// fixed number of chunks independent of the worker count, and chunk results
// are combined in chunk order, so sums are bit-identical for any thread count.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace vbltr {

/// Worker count: explicit request, else VBLTR_THREADS, else hardware.
inline unsigned resolve_threads(unsigned requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("VBLTR_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<unsigned>(v);
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline constexpr std::size_t kReductionChunks = 64;

/// Runs chunk(begin, end) -> T over [0, n) and folds the partial results
/// left to right with combine(acc, part).
template <class T, class ChunkFn, class CombineFn>
T chunked_reduce(std::size_t n, unsigned threads, T init, ChunkFn&& chunk,
                 CombineFn&& combine) {
  if (n == 0) return init;
  const std::size_t chunks = std::min(n, kReductionChunks);
  std::vector<std::size_t> bounds(chunks + 1);
  for (std::size_t c = 0; c <= chunks; ++c) bounds[c] = n * c / chunks;

  std::vector<T> parts;
  parts.reserve(chunks);
  for (std::size_t c = 0; c < chunks; ++c) parts.push_back(init);

  const unsigned workers =
      static_cast<unsigned>(std::min<std::size_t>(resolve_threads(threads), chunks));
  if (workers <= 1) {
    for (std::size_t c = 0; c < chunks; ++c) parts[c] = chunk(bounds[c], bounds[c + 1]);
  } else {
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t c = next++; c < chunks; c = next++) {
        parts[c] = chunk(bounds[c], bounds[c + 1]);
      }
    };
    std::vector<std::thread> pool;
    for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
  }
  T acc = std::move(init);
  for (auto& p : parts) combine(acc, p);
  return acc;
}

/// Runs body(i) for i in [0, n) across workers; body must only touch slot i.
template <class Body>
void parallel_for(std::size_t n, unsigned threads, Body&& body) {
  const unsigned workers =
      static_cast<unsigned>(std::min<std::size_t>(resolve_threads(threads), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) body(i);
  };
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
}

/// splitmix64 finaliser; derives independent stream seeds from (seed, tags).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <class... Tags>
std::uint64_t derive_seed(std::uint64_t seed, Tags... tags) {
  ((seed = mix_seed(seed, static_cast<std::uint64_t>(tags))), ...);
  return seed;
}

}  // namespace vbltr
