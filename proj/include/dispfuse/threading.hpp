#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace dispfuse {

/// Max worker threads used inside tensor kernels. Results are bit-identical
/// for any setting: work is split into fixed contiguous chunks and every
/// output element is accumulated by exactly one thread in a fixed order.
void set_num_threads(int n);
int num_threads();

/// Runs fn(i) for i in [0, n). Parallelized only when `cost_hint`
/// (approximate flop count) is large enough to amortize thread spawns.
void parallel_for(std::int64_t n, std::int64_t cost_hint,
                  const std::function<void(std::int64_t)>& fn);

} // namespace dispfuse
