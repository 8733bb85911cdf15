#pragma once

#include <cstddef>
#include <functional>

namespace eccdet {

// Worker count: hardware concurrency, capped by ECC_DET_THREADS when set.
int worker_count();

// Calls fn(i) for i in [0, n) across worker_count() threads. Each index is
// visited exactly once; callers write results into per-index slots so the
// outcome does not depend on scheduling. The first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace eccdet
