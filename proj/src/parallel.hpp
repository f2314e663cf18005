#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace vptq::detail {

// Runs fn(begin, end) over disjoint chunks of [0, n). Chunk boundaries do not
// depend on the thread count, and workers only write their own slots, so
// results are identical for any number of threads.
inline void parallel_for(std::size_t n, std::size_t grain,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
    unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    std::size_t chunks = (n + grain - 1) / grain;
    if (n == 0) return;
    if (chunks <= 1 || hw == 1) {
        fn(0, n);
        return;
    }
    unsigned workers = unsigned(std::min<std::size_t>(hw, chunks));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::atomic<std::size_t> next{0};
    for (unsigned w = 0; w < workers; w++) {
        pool.emplace_back([&] {
            for (;;) {
                std::size_t c = next.fetch_add(1);
                if (c >= chunks) break;
                std::size_t b = c * grain;
                std::size_t e = std::min(n, b + grain);
                fn(b, e);
            }
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace vptq::detail
