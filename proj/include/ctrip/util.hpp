#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace ctrip {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent stream key for (seed, index).
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

// Unbiased draw in [0, bound); portable across standard libraries.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t bound) {
    const std::uint64_t limit = Rng::max() - (Rng::max() % bound);
    std::uint64_t r;
    do { r = rng(); } while (r >= limit);
    return r % bound;
}

inline double uniform01(Rng& rng) {
    return double(rng() >> 11) * 0x1.0p-53;
}

// Box-Muller normal; unlike std::normal_distribution, identical on every platform.
inline double standard_normal(Rng& rng) {
    double u1;
    do { u1 = uniform01(rng); } while (u1 <= 0.0);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

// Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
        std::swap(p[i - 1], p[uniform_index(rng, i)]);
    }
    return p;
}

inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    return permutation(n, rng);
}

// FNV-1a, 64 bit.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[std::size_t(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace ctrip
