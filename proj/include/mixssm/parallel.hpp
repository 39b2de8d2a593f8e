#pragma once

#include <cstddef>
#include <functional>

namespace mixssm {

/// Worker count from MIXSSM_THREADS (default 1). 1 is the bitwise-reproducible mode;
/// kernels partition work so results do not depend on the count anyway.
std::size_t worker_count();

/// Overrides MIXSSM_THREADS for this process; 0 restores the environment value.
void set_worker_count(std::size_t workers);

/// Runs fn(i) for i in [0, n), splitting contiguous ranges across workers.
/// Each index must write disjoint outputs.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace mixssm
