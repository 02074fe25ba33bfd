#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace cats {

// Scalar type for all in-memory tensors. File formats pin their own widths.
#ifdef CATS_REAL_FLOAT
using real = float;
#else
using real = double;
#endif

// ---------------------------------------------------------------------------
// Errors

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimError : Error { using Error::Error; };        // shape mismatch
struct ParamError : Error { using Error::Error; };      // bad scalar argument
struct ConfigError : Error { using Error::Error; };     // inconsistent configuration
struct UsageError : Error { using Error::Error; };      // API misuse / protocol violation
struct FormatError : Error { using Error::Error; };     // malformed file
struct EvalError : Error { using Error::Error; };       // evaluation on empty/invalid data
struct IoError : Error { using Error::Error; };         // filesystem failure
struct NumericError : Error { using Error::Error; };    // NaN/Inf surfaced by the engine

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

// ---------------------------------------------------------------------------
// Engine parallelism. Work is always split by output row so results are
// bit-identical for any worker count. CATS_THREADS caps the pool.

inline int engine_threads() {
    static const int cached = [] {
        int n = static_cast<int>(std::thread::hardware_concurrency());
        if (n < 1) n = 1;
        if (const char* env = std::getenv("CATS_THREADS")) {
            const int cap = std::atoi(env);
            if (cap >= 1) n = std::min(n, cap);
        }
        return n;
    }();
    return cached;
}

// Runs fn(begin, end) over a partition of [0, n). Falls back to inline
// execution for small n.
inline void parallel_for(std::size_t n, std::size_t grain,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
    const int workers = engine_threads();
    if (workers <= 1 || n <= grain) {
        fn(0, n);
        return;
    }
    const std::size_t chunks = std::min<std::size_t>(workers, (n + grain - 1) / grain);
    const std::size_t per = (n + chunks - 1) / chunks;
    std::vector<std::thread> pool;
    pool.reserve(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t b = c * per;
        const std::size_t e = std::min(n, b + per);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Deterministic RNG (splitmix64 core). Box-Muller draws two uniforms per
// normal sample so the state is a single word and serializes trivially.

struct Rng {
    std::uint64_t state = 0x9e3779b97f4a7c15ULL;

    Rng() = default;
    explicit Rng(std::uint64_t seed) : state(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in (0, 1]
    double uniform_pos() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t uniform_index(std::uint64_t n) { return n ? next_u64() % n : 0; }

    double normal() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }
};

}  // namespace cats
