#include "dispfuse/threading.hpp"

#include <atomic>

namespace dispfuse {

namespace {
std::atomic<int> g_threads{0}; // 0 = auto
}

void set_num_threads(int n) { g_threads.store(n < 1 ? 1 : n); }

int num_threads() {
    int n = g_threads.load();
    if (n > 0) return n;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(std::int64_t n, std::int64_t cost_hint,
                  const std::function<void(std::int64_t)>& fn) {
    const int nt = num_threads();
    // Spawning threads costs ~tens of microseconds; only worth it for
    // kernels in the multi-megaflop range.
    if (n <= 1 || nt <= 1 || cost_hint < (1 << 21)) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const int workers = static_cast<int>(std::min<std::int64_t>(nt, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers) - 1);
    auto run_range = [&fn](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) fn(i);
    };
    for (int w = 1; w < workers; ++w) {
        std::int64_t lo = n * w / workers;
        std::int64_t hi = n * (w + 1) / workers;
        pool.emplace_back(run_range, lo, hi);
    }
    run_range(0, n / workers);
    for (auto& t : pool) t.join();
}

} // namespace dispfuse
