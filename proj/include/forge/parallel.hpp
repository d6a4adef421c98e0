#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace forge {

// Runs fn(0..n-1) across up to `threads` workers. Callers are responsible for
// making the combination of results order-independent (e.g. write-by-index);
// used only for mutually independent jobs so results do not depend on the
// thread count.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn, int threads = 0) {
    if (n <= 0) return;
    unsigned hw = std::thread::hardware_concurrency();
    int t = threads > 0 ? threads : static_cast<int>(hw ? hw : 1);
    t = static_cast<int>(std::min<int64_t>({static_cast<int64_t>(t), n, 16}));
    if (t <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::exception_ptr error;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(t));
    for (int w = 0; w < t; ++w)
        pool.emplace_back([&] {
            for (;;) {
                int64_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(err_mu);
                    if (!error) error = std::current_exception();
                    return;
                }
            }
        });
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace forge
