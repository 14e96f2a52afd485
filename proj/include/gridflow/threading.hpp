#pragma once

#include <cstddef>
#include <exception>
#include <functional>

namespace gridflow {

// Worker cap from GRIDFLOW_THREADS, else hardware concurrency (at least 1).
std::size_t worker_count();

/// Runs body(i) for i in [0, n) on up to worker_count() threads. Work is split
/// into contiguous index blocks; the first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace gridflow
