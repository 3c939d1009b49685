#pragma once

#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace lsvcmm {

/// Runs fn(i) for i in [0, n) on up to n_threads workers. Tasks must write
/// only to their own output slot; the caller reduces results in index order,
/// so outputs do not depend on the thread count. The lowest-index exception
/// is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, int n_threads, Fn&& fn) {
    if (n == 0) return;
    const std::size_t workers =
        std::min<std::size_t>(n, n_threads < 1 ? 1 : static_cast<std::size_t>(n_threads));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    auto work = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace lsvcmm
