#include "atd/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace atd {

namespace {

int threads_from_env() {
  int hw = 1;
#ifdef _OPENMP
  hw = omp_get_max_threads();
#endif
  if (const char* env = std::getenv("ATD_THREADS")) {
    try {
      int n = std::stoi(env);
      if (n >= 1) return n < hw ? n : hw;
    } catch (...) {
    }
  }
  return hw;
}

std::atomic<int> g_threads{0};

}  // namespace

int num_threads() {
  int n = g_threads.load(std::memory_order_relaxed);
  if (n == 0) {
    n = threads_from_env();
    g_threads.store(n, std::memory_order_relaxed);
  }
  return n;
}

void set_num_threads(int n) { g_threads.store(n < 1 ? 1 : n, std::memory_order_relaxed); }

}  // namespace atd
