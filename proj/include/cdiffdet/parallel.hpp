#pragma once

#include <cstddef>
#include <functional>

namespace cdiffdet {

// Worker cap: CDIFFDET_THREADS if set to a positive integer, otherwise the
// hardware concurrency (at least 1).
std::size_t worker_count();

// Runs fn(i) for i in [0, n) on up to worker_count() threads. Work items are
// independent; the first exception thrown is rethrown after all threads join.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace cdiffdet
