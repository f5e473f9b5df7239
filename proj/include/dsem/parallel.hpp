#pragma once

#include <functional>

namespace dsem {

// Kernel-internal worker cap. Defaults to the DSEM_LAB_THREADS environment
// variable, or 1 when unset. Work is split over independent output slices
// only, so results do not depend on the thread count.
int kernel_threads();
void set_kernel_threads(int threads);

// Runs fn(i) for i in [0, count); each i must touch disjoint memory.
void parallel_for(int count, const std::function<void(int)>& fn);

}  // namespace dsem
