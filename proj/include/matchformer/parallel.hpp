#pragma once

#include <cstddef>
#include <functional>

namespace matchformer {

/// Worker count, capped by the MATCHFORMER_THREADS environment variable.
int thread_count();

/// Overrides the thread count for the current process (0 restores the default).
void set_thread_count(int n);

/// Splits [0, n) into contiguous chunks. Each index is handled by exactly one
/// worker, so results never depend on the thread count as long as `fn` writes
/// only to outputs owned by its indices.
void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace matchformer
