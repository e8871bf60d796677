#include "axmul/parallel.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace axmul {

namespace {
std::atomic<int> g_max_threads{0};
}

void set_max_threads(int n) { g_max_threads.store(n < 0 ? 0 : n); }

int max_threads() {
  int n = g_max_threads.load();
  if (n > 0) return n;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_blocks(int n_items, const std::function<void(int, int, int)>& fn) {
  if (n_items <= 0) return;
  const int n_blocks = block_count(n_items);
  const int workers = std::min(max_threads(), n_blocks);

  auto run_block = [&](int b) {
    int begin = b * kBlockSize;
    int end = std::min(n_items, begin + kBlockSize);
    fn(b, begin, end);
  };

  if (workers <= 1) {
    for (int b = 0; b < n_blocks; ++b) run_block(b);
    return;
  }

  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto worker = [&] {
    for (;;) {
      int b = next.fetch_add(1);
      if (b >= n_blocks) return;
      try {
        run_block(b);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
        return;
      }
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace axmul
