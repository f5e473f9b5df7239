#include "dsem/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace dsem {

namespace {

int threads_from_env() {
  const char* env = std::getenv("DSEM_LAB_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) {
    throw std::invalid_argument(std::string("DSEM_LAB_THREADS must be a positive integer, got '") +
                                env + "'");
  }
  return static_cast<int>(v);
}

std::atomic<int>& thread_setting() {
  static std::atomic<int> value{threads_from_env()};
  return value;
}

}  // namespace

int kernel_threads() { return thread_setting().load(); }

void set_kernel_threads(int threads) {
  if (threads < 1) throw std::invalid_argument("kernel thread count must be >= 1");
  thread_setting().store(threads);
}

void parallel_for(int count, const std::function<void(int)>& fn) {
  const int workers = std::min(kernel_threads(), count);
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      for (int i = t; i < count; i += workers) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace dsem
