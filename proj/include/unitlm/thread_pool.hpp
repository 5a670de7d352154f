#pragma once

#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace unitlm {

// Blocking fork-join pool. parallel_for partitions [0, n) into one contiguous
// chunk per worker, so any reduction that combines per-worker partials in
// worker-index order is deterministic for a fixed worker count.
class ThreadPool {
  public:
    explicit ThreadPool(int workers = 1) : workers_(workers < 1 ? 1 : workers) {
        for (int w = 1; w < workers_; ++w) {
            threads_.emplace_back([this, w] { worker_loop_(w); });
        }
    }

    ~ThreadPool() {
        {
            std::unique_lock<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_start_.notify_all();
        for (auto& t : threads_) {
            t.join();
        }
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    int workers() const { return workers_; }

    // fn(worker_index, begin, end) over a partition of [0, n).
    void parallel_for(int64_t n, const std::function<void(int, int64_t, int64_t)>& fn) {
        if (n <= 0) {
            return;
        }
        if (workers_ == 1 || n == 1) {
            fn(0, 0, n);
            return;
        }
        {
            std::unique_lock<std::mutex> lk(mu_);
            job_ = &fn;
            job_n_ = n;
            pending_ = workers_ - 1;
            ++generation_;
        }
        cv_start_.notify_all();
        run_chunk_(0, fn, n);
        std::unique_lock<std::mutex> lk(mu_);
        cv_done_.wait(lk, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

  private:
    void run_chunk_(int w, const std::function<void(int, int64_t, int64_t)>& fn, int64_t n) {
        const int64_t chunk = (n + workers_ - 1) / workers_;
        const int64_t begin = static_cast<int64_t>(w) * chunk;
        const int64_t end = begin + chunk < n ? begin + chunk : n;
        if (begin < end) {
            fn(w, begin, end);
        }
    }

    void worker_loop_(int w) {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int, int64_t, int64_t)>* job = nullptr;
            int64_t n = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_start_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) {
                    return;
                }
                seen = generation_;
                job = job_;
                n = job_n_;
            }
            if (job != nullptr) {
                run_chunk_(w, *job, n);
            }
            {
                std::unique_lock<std::mutex> lk(mu_);
                if (--pending_ == 0) {
                    cv_done_.notify_all();
                }
            }
        }
    }

    int workers_;
    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_start_;
    std::condition_variable cv_done_;
    const std::function<void(int, int64_t, int64_t)>* job_ = nullptr;
    int64_t job_n_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

} // namespace unitlm
