#pragma once

#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace diffplace {

inline int default_thread_count() {
    if (const char* env = std::getenv("DIFFPLACE_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

// Static-partition parallel loop over [0, n). Work item i always lands in
// chunk i*threads/n, so outputs written to per-index slots are identical for
// any thread count; reductions over slots must happen in index order.
inline void parallel_for(int n, const std::function<void(int)>& fn, int threads = -1) {
    if (n <= 0) return;
    if (threads < 0) threads = default_thread_count();
    if (threads > n) threads = n;
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    std::exception_ptr error;
    std::mutex error_mu;
    for (int t = 0; t < threads; ++t) {
        const int lo = int(std::int64_t(n) * t / threads);
        const int hi = int(std::int64_t(n) * (t + 1) / threads);
        pool.emplace_back([&, lo, hi]() {
            try {
                for (int i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace diffplace
