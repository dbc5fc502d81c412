#pragma once

#include <cstddef>
#include <functional>

namespace minibert {

// Upper bound on worker threads used by internal loops. Values < 1 are
// clamped to 1.
void SetNumThreads(int n);
int NumThreads();

// Deterministic mode pins every internal loop to one thread.
void SetDeterministic(bool on);
bool Deterministic();

// Calls fn(begin, end) over disjoint chunks of [0, n). Chunk boundaries
// depend only on n and the thread count, and each index is visited by
// exactly one call, so callers that write to pre-assigned slots get
// results independent of scheduling.
void ParallelFor(std::size_t n, std::size_t min_chunk,
                 const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace minibert
