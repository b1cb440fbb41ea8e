#pragma once

#include <cstddef>
#include <functional>

namespace hydra {

// Process-wide worker count for independent work items (image synthesis,
// decoding, evaluation batches). Training graphs always run on the caller.
std::size_t thread_count();
void set_thread_count(std::size_t n);  // 0 selects the hardware concurrency

// Calls fn(i) for every i in [0, n), splitting the range into contiguous
// chunks over at most thread_count() threads. Rethrows the exception of the
// lowest failing index after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace hydra
