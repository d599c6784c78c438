#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace empcause {

/// Runs fn(i) for i in [0, n) on at most max_parallel threads. Results are expected
/// to be written by index, so output order never depends on scheduling. The
/// exception from the lowest failing index is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, std::size_t max_parallel, Fn &&fn) {
    if (n == 0)
        return;
    const std::size_t workers = std::clamp<std::size_t>(max_parallel, 1, n);
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::atomic<bool> failed{false};
    auto work = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= n || failed.load())
                return;
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
                failed = true;
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back(work);
    }
    for (auto &e : errors)
        if (e)
            std::rethrow_exception(e);
}

/// Counting semaphore with a runtime limit.
class Semaphore {
  public:
    explicit Semaphore(std::size_t permits) : permits_(std::max<std::size_t>(permits, 1)) {}

    void acquire() {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return permits_ > 0; });
        --permits_;
    }
    void release() {
        {
            std::lock_guard lock(mutex_);
            ++permits_;
        }
        cv_.notify_one();
    }

  private:
    std::mutex mutex_;
    std::condition_variable cv_;
    std::size_t permits_;
};

class SemaphoreGuard {
  public:
    explicit SemaphoreGuard(Semaphore &s) : s_(s) { s_.acquire(); }
    ~SemaphoreGuard() { s_.release(); }
    SemaphoreGuard(const SemaphoreGuard &) = delete;
    SemaphoreGuard &operator=(const SemaphoreGuard &) = delete;

  private:
    Semaphore &s_;
};

} // namespace empcause
