// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace rmdlab {

/// Worker count from RMD_THREADS (default 1, clamped to [1, 64]).
int worker_count();

/// Runs fn(i) for i in [0, n). Indices are split into contiguous blocks, one
/// per worker; callers write per-index results and reduce them in index order
/// afterwards, so results never depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace rmdlab
