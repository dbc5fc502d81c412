#include "minibert/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace minibert {
namespace {

std::atomic<int> g_threads{1};
std::atomic<bool> g_deterministic{false};
thread_local bool t_in_worker = false;  // nested loops run inline

struct WorkerScope {
  bool previous = t_in_worker;
  WorkerScope() { t_in_worker = true; }
  ~WorkerScope() { t_in_worker = previous; }
};

}  // namespace

void SetNumThreads(int n) { g_threads = std::max(1, n); }
int NumThreads() { return g_deterministic ? 1 : g_threads.load(); }

void SetDeterministic(bool on) { g_deterministic = on; }
bool Deterministic() { return g_deterministic; }

void ParallelFor(std::size_t n, std::size_t min_chunk,
                 const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  const std::size_t max_workers =
      std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_chunk));
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(NumThreads()), max_workers);
  if (workers <= 1 || t_in_worker) {
    fn(0, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto run = [&](std::size_t begin, std::size_t end) {
    WorkerScope scope;
    try {
      fn(begin, end);
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mu);
      if (!failure) failure = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back(run, begin, end);
  }
  run(0, std::min(n, chunk));
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace minibert
