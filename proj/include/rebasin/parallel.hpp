// Copyright (c) 2026 moe-rebasin authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace rebasin {

/// Worker cap: MOE_REBASIN_THREADS if set (>= 1), else hardware
/// concurrency. Re-read on every call so tests can vary it in-process.
inline std::size_t max_worker_threads() {
    if (const char* env = std::getenv("MOE_REBASIN_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) return static_cast<std::size_t>(v);
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<std::size_t>(hc);
}

namespace detail {
inline bool& inside_parallel_region() {
    thread_local bool inside = false;
    return inside;
}
}  // namespace detail

/// Runs body(i) for i in [0, count). Each index is processed exactly once
/// and must write only to its own output slot, which keeps results
/// identical for any worker count. Nested regions run serially.
template <typename F>
void parallel_for(std::size_t count, F&& body) {
    const std::size_t workers =
        detail::inside_parallel_region() ? 1 : std::min(max_worker_threads(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            detail::inside_parallel_region() = true;
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    body(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace rebasin
