#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace qbsde {

/// Global worker count used by every parallel loop. Defaults to the number
/// of logical cores. Results never depend on it: work is cut into fixed
/// blocks and reductions are merged in block order.
int worker_count();
void set_worker_count(int workers);

/// Fixed block size for per-path loops.
inline constexpr std::size_t kPathBlock = 1024;

/// Runs fn(block_index, begin, end) over [0, n) cut into blocks of `block`
/// items. Blocks are independent; the caller owns any per-block output.
template <class Fn>
void parallel_blocks(std::size_t n, std::size_t block, Fn&& fn) {
    if (n == 0) return;
    block = std::max<std::size_t>(block, 1);
    const std::size_t n_blocks = (n + block - 1) / block;
    const auto run_block = [&](std::size_t b) {
        const std::size_t begin = b * block;
        fn(b, begin, std::min(n, begin + block));
    };
    const std::size_t workers =
        std::min<std::size_t>(static_cast<std::size_t>(std::max(worker_count(), 1)), n_blocks);
    if (workers <= 1) {
        for (std::size_t b = 0; b < n_blocks; ++b) run_block(b);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t b = next.fetch_add(1);
                if (b >= n_blocks) return;
                try {
                    run_block(b);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next.store(n_blocks);
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

/// Same as parallel_blocks with one item per block.
template <class Fn>
void parallel_items(std::size_t n, Fn&& fn) {
    parallel_blocks(n, 1, [&](std::size_t, std::size_t begin, std::size_t) { fn(begin); });
}

}  // namespace qbsde
