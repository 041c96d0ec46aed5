#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <initializer_list>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace deepconn {

using Index = Eigen::Index;

template <typename Real>
using MatrixX = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Real>
using VectorX = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
template <typename Real>
using ArrayX = Eigen::Array<Real, Eigen::Dynamic, 1>;

// ---------------------------------------------------------------------------
// Deterministic randomness.
//
// All stochastic choices in the library (shuffles, initialisation, dropout,
// random embeddings) go through these helpers so that a run is a pure
// function of its seeds on every platform. std::uniform_real_distribution
// and friends are implementation-defined and deliberately avoided.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Mixes a seed with stream labels so independent consumers of one master
/// seed draw from uncorrelated streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t s = seed;
    std::uint64_t h = splitmix64(s);
    for (std::uint64_t p : parts) {
        s ^= p + 0x9e3779b97f4a7c15ULL + (s << 6) + (s >> 2);
        h ^= splitmix64(s);
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // burn-in so nearby seeds diverge immediately
        next_u64();
        next_u64();
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    /// Uniform on [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Box-Muller; pinned algorithm, unlike std::normal_distribution.
    double normal(double mean, double stddev) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = 0.0;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    /// Uniform integer on [0, n). n must be positive.
    std::uint64_t bounded(std::uint64_t n) { return next_u64() % n; }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

template <typename T>
void fisher_yates_shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.bounded(i));
        std::swap(v[i - 1], v[j]);
    }
}

// ---------------------------------------------------------------------------
// Fingerprints
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

/// Number of worker threads a run may use; DEEPCONN_THREADS caps it.
/// Defaults to 1 -- results are deterministic for any count, callers only
/// parallelise work whose reduction order is fixed.
inline int configured_threads() {
    if (const char* env = std::getenv("DEEPCONN_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

/// Runs fn(i) for i in [0, n). Output must go to slot i only. The first
/// exception a worker raises is rethrown on the calling thread after all
/// workers finish.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr error;
    std::mutex error_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                const std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace deepconn
