#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "forge/tensor.hpp"

namespace forge {

// Deterministic RNG. mt19937_64 output is pinned by the standard; the
// distributions below are hand-rolled because std::*_distribution is
// implementation-defined and would break cross-platform reproducibility.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller (one draw per two uniforms; no caching).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        // 1 - u1 is in (0, 1], so the log is finite.
        return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // Integer in [lo, hi] inclusive. Modulo bias is negligible for the tiny
    // ranges used here and keeps the mapping platform-stable.
    int64_t integer(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(eng_() % span);
    }

    Tensor normal_tensor(std::vector<int64_t> dims, double sigma = 1.0) {
        Tensor t(std::move(dims));
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = sigma * normal();
        return t;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(integer(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

// Derives a child seed from a base seed and a label. Used to split the global
// seed into independent per-stage and per-item streams.
inline uint64_t derive_seed(uint64_t base, std::string_view label) {
    return splitmix64(base ^ fnv1a64(label));
}

inline uint64_t derive_seed(uint64_t base, std::string_view label, uint64_t index) {
    return splitmix64(derive_seed(base, label) ^ splitmix64(index + 0x51ed270b0ULL));
}

}  // namespace forge
