#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace sttn {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// sign with the fixed convention sign(0) = +1
template <class S>
inline S sgn(S x) {
    return x < S(0) ? S(-1) : S(1);
}

// Global worker-thread count; 0 or 1 means the deterministic single-thread
// mode. Parallel loops split disjoint index ranges, so results are identical
// at any thread count.
inline std::atomic<int>& thread_setting() {
    static std::atomic<int> n{0};
    return n;
}
inline void set_threads(int n) { thread_setting().store(n < 0 ? 0 : n); }
inline int threads() { return thread_setting().load(); }

// fn(begin, end) over [0, n) in contiguous chunks
template <class F>
void parallel_for(int64_t n, F&& fn) {
    const int t = threads();
    if (t <= 1 || n < 2) {
        fn(int64_t(0), n);
        return;
    }
    const int workers = int(std::min<int64_t>(t, n));
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers));
    const int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const int64_t b = w * chunk, e = std::min<int64_t>(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& th : pool) th.join();
}

inline int conv_out_dim(int in, int k, int stride, int pad) {
    if (stride < 1) throw ShapeError("stride must be >= 1");
    if (pad < 0) throw ShapeError("pad must be >= 0");
    int span = in + 2 * pad - k;
    if (span < 0)
        throw ShapeError("kernel " + std::to_string(k) + " larger than padded input " +
                         std::to_string(in + 2 * pad));
    if (span % stride != 0)
        throw ShapeError("non-integral output size: (" + std::to_string(in) + " + 2*" +
                         std::to_string(pad) + " - " + std::to_string(k) + ") not divisible by stride " +
                         std::to_string(stride));
    return span / stride + 1;
}

template <class S>
inline bool all_finite(const std::vector<S>& v) {
    for (S x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

// Deterministic RNG with explicit transforms. mt19937_64 output is fully
// specified by the standard; the distributions here avoid the
// implementation-defined std:: distribution objects so the same seed gives
// the same stream on any platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix(seed)), inc_(splitmix(seed ^ 0x9e3779b97f4a7c15ull) | 1) {}

    uint64_t next_u64() {
        // xorshift128+ style step over two splitmix-derived words
        uint64_t x = state_;
        uint64_t y = inc_;
        state_ = y;
        x ^= x << 23;
        inc_ = x ^ y ^ (x >> 17) ^ (y >> 26);
        return inc_ + y;
    }

    // uniform in [0,1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    uint64_t bounded(uint64_t n) {
        uint64_t threshold = (0ull - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    double gauss() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    uint64_t state_, inc_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace sttn
