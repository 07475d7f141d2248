#pragma once

#include <cstdint>
#include <functional>

namespace sshield {

// Fork-join helper with deterministic work partitioning: the index range is
// split into at most `threads()` contiguous chunks with boundaries that depend
// only on n and the thread count, and fn(chunk_index, begin, end) runs once per
// chunk. Callers that reduce must combine per-chunk partials in chunk order;
// callers whose per-index work is independent get bit-identical results for
// ANY thread count by construction.
void set_num_threads(int n);
int num_threads();

void parallel_for(int64_t n, const std::function<void(int chunk, int64_t begin, int64_t end)>& fn);

// Number of chunks parallel_for will use for n items (= min(threads, n), at least 1).
int chunk_count(int64_t n);

}  // namespace sshield
