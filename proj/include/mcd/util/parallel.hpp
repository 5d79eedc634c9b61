#pragma once

#include <cstddef>
#include <functional>

namespace mcd::util {

// Runs fn(i) for i in [0, n) on up to `workers` threads. Items are claimed
// dynamically; callers write results into per-item slots so the outcome is
// independent of scheduling. The first exception thrown by any item is
// rethrown after all threads join.
void parallel_for(std::size_t n, unsigned workers, const std::function<void(std::size_t)>& fn);

// Worker count from MCD_WORKERS, else 1.
unsigned default_workers();

}  // namespace mcd::util
