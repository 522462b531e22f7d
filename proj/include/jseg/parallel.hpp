#pragma once

#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace jseg {

// Deterministic work sharing: the range is cut into fixed-size blocks whose
// layout depends only on n, never on the thread count. Workers pull blocks
// from an atomic counter. Reductions accumulate per block and are combined
// in block order afterwards, so results are bitwise identical for any
// number of threads.
inline constexpr std::size_t parallel_block = 4096;

template <class Fn> // Fn(size_t begin, size_t end, size_t block_index)
void parallel_blocks(std::size_t n, int nthreads, Fn&& fn) {
    if (n == 0) return;
    std::size_t nblocks = (n + parallel_block - 1) / parallel_block;
    if (nthreads <= 1 || nblocks == 1) {
        for (std::size_t b = 0; b < nblocks; ++b)
            fn(b * parallel_block, std::min(n, (b + 1) * parallel_block), b);
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            std::size_t b = next.fetch_add(1, std::memory_order_relaxed);
            if (b >= nblocks) return;
            fn(b * parallel_block, std::min(n, (b + 1) * parallel_block), b);
        }
    };
    std::vector<std::thread> pool;
    std::size_t nt = std::min<std::size_t>(nthreads, nblocks);
    pool.reserve(nt - 1);
    for (std::size_t t = 1; t < nt; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
}

template <class Fn> // Fn(size_t i)
void parallel_for(std::size_t n, int nthreads, Fn&& fn) {
    parallel_blocks(n, nthreads, [&](std::size_t b, std::size_t e, std::size_t) {
        for (std::size_t i = b; i < e; ++i) fn(i);
    });
}

// Order-independent sum reduction. Acc must be default-constructible;
// Fn(acc, i) accumulates element i, Join(acc, acc) merges.
template <class Acc, class Fn, class Join>
Acc parallel_reduce(std::size_t n, int nthreads, Fn&& fn, Join&& join) {
    if (n == 0) return Acc{};
    std::size_t nblocks = (n + parallel_block - 1) / parallel_block;
    std::vector<Acc> partial(nblocks);
    parallel_blocks(n, nthreads, [&](std::size_t b, std::size_t e, std::size_t blk) {
        Acc acc{};
        for (std::size_t i = b; i < e; ++i) fn(acc, i);
        partial[blk] = acc;
    });
    Acc total{};
    for (std::size_t b = 0; b < nblocks; ++b) join(total, partial[b]);
    return total;
}

} // namespace jseg
