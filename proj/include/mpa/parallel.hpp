#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace mpa {

/// Worker count: MPA_THREADS if set and positive, else hardware concurrency.
inline std::size_t worker_count() {
    if (const char* env = std::getenv("MPA_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return std::size_t(v);
        } catch (const std::exception&) {
        }
    }
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Calls fn(i) for i in [0, count) on up to worker_count() threads. Each
/// index must write only its own output slot. The first exception (by
/// index) is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
    const auto workers = std::min(worker_count(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(count);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < count;) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace mpa
