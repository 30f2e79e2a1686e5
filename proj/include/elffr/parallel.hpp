#pragma once

#include <elffr/types.hpp>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace elffr {

/// Worker count: explicit request if positive, else ELFFR_WORKERS, else hardware threads.
inline int resolve_workers(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("ELFFR_WORKERS")) {
    const int value = std::atoi(env);
    if (value > 0) return value;
  }
  return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
}

/// Runs fn(i) for i in [0, n). Each index writes its own output slot, so
/// results never depend on the worker count. The exception from the lowest
/// failing index is rethrown after all workers finish.
template <typename Fn>
void parallel_for(Index n, int workers, Fn&& fn) {
  if (n <= 0) return;
  const int count = std::max(1, std::min<int>(resolve_workers(workers), static_cast<int>(n)));
  std::vector<std::exception_ptr> failures(static_cast<std::size_t>(n));
  auto run = [&](Index i) {
    try {
      fn(i);
    } catch (...) {
      failures[static_cast<std::size_t>(i)] = std::current_exception();
    }
  };
  if (count == 1) {
    for (Index i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<Index> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(count));
    for (int w = 0; w < count; ++w) {
      pool.emplace_back([&] {
        for (Index i = next++; i < n; i = next++) run(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& failure : failures)
    if (failure) std::rethrow_exception(failure);
}

/// SplitMix64 finalizer; derives independent stream seeds from (seed, stream).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

}  // namespace elffr
