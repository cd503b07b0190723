#pragma once

#include <functional>

namespace anet {

/// Worker cap: ANET_THREADS when set to a positive integer, else the
/// hardware concurrency (at least 1).
int worker_count();

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index is
/// handled exactly once; results must be written to per-index slots.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace anet
