#pragma once

#include <functional>

namespace gllvm {

/// Set the global worker-thread cap. 0 restores the hardware default,
/// 1 forces serial execution.
void set_max_threads(int threads);
int max_threads();

/// Apply fn(i) for i in [0, n). Work is split into contiguous chunks; every
/// index is processed exactly once regardless of the thread count. The
/// body must not touch shared mutable state outside its own index.
void parallel_for(int n, const std::function<void(int)>& fn, int grain = 1);

/// Fixed binary-tree reduction: the result is identical for any thread
/// count because the tree shape depends only on n.
double pairwise_sum(const double* x, int n);

}  // namespace gllvm
