#pragma once

#include <algorithm>
#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ccnext {

namespace detail {
inline int& thread_setting() {
  static int n = 1;
  return n;
}
}  // namespace detail

/// Number of worker threads used by batch-parallel kernels. Results never
/// depend on this value: work is split per independent item and any
/// cross-item reduction happens afterwards in a fixed order.
inline void set_num_threads(int n) { detail::thread_setting() = std::max(1, n); }
inline int num_threads() { return detail::thread_setting(); }

template <class F>
void parallel_for(std::size_t count, F&& body) {
#ifdef _OPENMP
  const int threads = static_cast<int>(std::min<std::size_t>(count, static_cast<std::size_t>(num_threads())));
  if (threads > 1) {
#pragma omp parallel for schedule(static) num_threads(threads)
    for (long long i = 0; i < static_cast<long long>(count); ++i) body(static_cast<std::size_t>(i));
    return;
  }
#endif
  for (std::size_t i = 0; i < count; ++i) body(i);
}

}  // namespace ccnext
