#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace mudi {

// FNV-1a 64-bit hash. Used for deterministic token hashing and config hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t seed = 14695981039346656037ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(s.data(), s.size());
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Deterministic RNG with an explicit algorithm so that streams are
// reproducible independent of the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {
        // Warm up so that small seeds do not produce correlated streams.
        splitmix64(state_);
        splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        // Modulo bias is negligible for n << 2^64.
        return next_u64() % n;
    }

    // Standard normal via Box-Muller (cached pair).
    double gaussian() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return r * std::cos(theta);
    }

    // Derived stream for per-item seeding (stable across runs).
    Rng fork(std::uint64_t stream) const {
        std::uint64_t s = state_;
        s ^= 0xA5A5A5A5DEADBEEFULL + stream * 0x9E3779B97F4A7C15ULL;
        return Rng(s);
    }

private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

} // namespace mudi
