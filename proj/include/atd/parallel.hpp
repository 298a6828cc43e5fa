#pragma once

#include <cstddef>

namespace atd {

/// Worker cap for intra-op parallel loops. Reads ATD_THREADS on first use.
int num_threads();
void set_num_threads(int n);

/// Runs body(i) for i in [0, n). Iterations must write disjoint outputs; the
/// static schedule keeps results bit-identical for any thread count.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
  const long long count = static_cast<long long>(n);
#pragma omp parallel for schedule(static) num_threads(num_threads()) if (count > 1)
  for (long long i = 0; i < count; ++i) body(static_cast<std::size_t>(i));
}

}  // namespace atd
