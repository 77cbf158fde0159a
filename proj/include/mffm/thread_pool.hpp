#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace mffm {

/// Worker-thread cap from MFFM_THREADS (0 or unset = hardware concurrency).
inline int thread_count() {
    static const int cached = [] {
        const char* env = std::getenv("MFFM_THREADS");
        int n = 0;
        if (env) n = std::atoi(env);
        if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
        return std::max(1, n);
    }();
    return cached;
}

/// Runs fn(thread_index, begin, end) over contiguous chunks of [0, n).
/// Work assignment depends only on (n, threads), and callers reduce
/// per-chunk results in chunk order, so a run is reproducible for a fixed
/// thread count; threads = 1 is strictly sequential.
template <typename Fn>
void parallel_chunks(size_t n, int threads, Fn&& fn) {
    threads = std::max(1, std::min<int>(threads, static_cast<int>(n ? n : 1)));
    if (threads == 1 || n <= 1) {
        fn(0, size_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads - 1);
    const size_t base = n / threads, rem = n % threads;
    size_t begin = 0;
    for (int t = 0; t < threads; ++t) {
        const size_t len = base + (static_cast<size_t>(t) < rem ? 1 : 0);
        const size_t end = begin + len;
        if (t + 1 == threads)
            fn(t, begin, end);
        else
            pool.emplace_back([&fn, t, begin, end] { fn(t, begin, end); });
        begin = end;
    }
    for (auto& th : pool) th.join();
}

}  // namespace mffm
