#pragma once

#include <cstdint>
#include <functional>

namespace axmul {

// Global worker cap for batch-parallel loops (CLI --threads). 0 = hardware
// concurrency. Thread count never changes results: work is split into blocks
// of a fixed size and reductions merge block partials in block order.
void set_max_threads(int n);
int max_threads();

// Fixed block size used to partition batch dimensions. Part of the numeric
// contract (reduction order), so it must not depend on the thread count.
inline constexpr int kBlockSize = 16;

inline int block_count(int n_items) { return (n_items + kBlockSize - 1) / kBlockSize; }

// Runs fn(block_index, begin, end) over [0, n_items) split into kBlockSize
// chunks. Blocks may run on any thread; callers must write only into
// block-indexed or element-indexed slots.
void parallel_blocks(int n_items, const std::function<void(int, int, int)>& fn);

}  // namespace axmul
