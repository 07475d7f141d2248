#include "sshield/parallel.hpp"

#include <algorithm>
#include <condition_variable>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

namespace sshield {
namespace {

thread_local bool t_in_parallel_region = false;

struct RegionGuard {
  bool saved = t_in_parallel_region;
  RegionGuard() { t_in_parallel_region = true; }
  ~RegionGuard() { t_in_parallel_region = saved; }
};

// Persistent pool; workers park on a condvar between jobs. The calling thread
// executes chunk 0 itself so a pool of size 1 never context-switches.
class Pool {
 public:
  static Pool& instance() {
    static Pool p;
    return p;
  }

  void resize(int n) {
    std::lock_guard<std::mutex> outer(resize_mu_);
    if (n < 1) throw std::invalid_argument("thread count must be >= 1");
    if (n == target_) return;
    stop_workers();
    target_ = n;
    start_workers();
  }

  int size() const { return target_; }

  void run(int64_t n, const std::function<void(int, int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    int chunks = int(std::min<int64_t>(target_, n));
    // Nested regions run serially on the calling thread; chunk boundaries for
    // the serial fallback still match what the outermost split would produce
    // for one chunk, so reductions stay well defined.
    if (chunks == 1 || t_in_parallel_region) {
      RegionGuard guard;
      fn(0, 0, n);
      return;
    }
    std::lock_guard<std::mutex> outer(resize_mu_);
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_fn_ = &fn;
      job_n_ = n;
      job_chunks_ = chunks;
      next_chunk_ = 1;  // chunk 0 runs on this thread
      pending_ = chunks - 1;
      error_ = nullptr;
      ++generation_;
    }
    cv_.notify_all();
    try {
      run_chunk(0, n, chunks, fn);
    } catch (...) {
      record_error(std::current_exception());
    }
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_fn_ = nullptr;
    // The first failure wins; remaining chunks ran to completion before this.
    if (error_) {
      std::exception_ptr e = error_;
      error_ = nullptr;
      lk.unlock();
      std::rethrow_exception(e);
    }
  }

 private:
  Pool() { start_workers(); }
  ~Pool() { stop_workers(); }

  static void run_chunk(int c, int64_t n, int chunks, const std::function<void(int, int64_t, int64_t)>& fn) {
    int64_t per = (n + chunks - 1) / chunks;
    int64_t b = int64_t(c) * per;
    int64_t e = std::min(n, b + per);
    if (b < e) {
      RegionGuard guard;
      fn(c, b, e);
    }
  }

  void record_error(std::exception_ptr e) {
    std::lock_guard<std::mutex> lk(mu_);
    if (!error_) error_ = e;
  }

  void worker_loop() {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int, int64_t, int64_t)>* fn = nullptr;
      int64_t n = 0;
      int chunks = 0, mine = -1;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || (generation_ != seen && next_chunk_ < job_chunks_); });
        if (stop_) return;
        mine = next_chunk_++;
        if (next_chunk_ >= job_chunks_) seen = generation_;
        fn = job_fn_;
        n = job_n_;
        chunks = job_chunks_;
      }
      try {
        run_chunk(mine, n, chunks, *fn);
      } catch (...) {
        record_error(std::current_exception());
      }
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  void start_workers() {
    stop_ = false;
    for (int i = 1; i < target_; ++i) workers_.emplace_back([this] { worker_loop(); });
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  std::mutex resize_mu_;  // serializes run() calls and resizes
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> workers_;
  int target_ = 1;
  bool stop_ = false;

  const std::function<void(int, int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_n_ = 0;
  int job_chunks_ = 0;
  int next_chunk_ = 0;
  int pending_ = 0;
  uint64_t generation_ = 0;
  std::exception_ptr error_ = nullptr;
};

}  // namespace

void set_num_threads(int n) { Pool::instance().resize(n); }
int num_threads() { return Pool::instance().size(); }

void parallel_for(int64_t n, const std::function<void(int, int64_t, int64_t)>& fn) {
  Pool::instance().run(n, fn);
}

int chunk_count(int64_t n) {
  if (n <= 0) return 1;
  return int(std::min<int64_t>(num_threads(), n));
}

}  // namespace sshield
