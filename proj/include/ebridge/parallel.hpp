#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace ebridge {

/// Worker count, capped by the EB_THREADS environment variable when set.
inline unsigned worker_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("EB_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
    } catch (...) {
    }
  }
  return n;
}

/// Calls body(begin, end) on disjoint contiguous chunks of [0, n). Each
/// chunk must only write to its own index range. An exception thrown by a
/// chunk is rethrown on the calling thread (the lowest chunk wins).
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::size_t workers = std::min<std::size_t>(worker_count(), n);
  if (workers <= 1) {
    if (n > 0) body(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t b = w * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&body, &errors, w, b, e] {
      try {
        body(b, e);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
}

/// Sum of term(i) over [0, n) with a reduction order that depends only on n,
/// never on the worker count.
template <class T, class Term>
T deterministic_sum(std::size_t n, T zero, Term&& term) {
  constexpr std::size_t kChunks = 64;
  std::vector<T> partial(kChunks, zero);
  const std::size_t chunk = (n + kChunks - 1) / kChunks;
  parallel_for(kChunks, [&](std::size_t cb, std::size_t ce) {
    for (std::size_t c = cb; c < ce; ++c) {
      T acc = zero;
      const std::size_t b = c * chunk;
      const std::size_t e = std::min(n, b + chunk);
      for (std::size_t i = b; i < e; ++i) acc += term(i);
      partial[c] = acc;
    }
  });
  T total = zero;
  for (const auto& p : partial) total += p;
  return total;
}

}  // namespace ebridge
