#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace ferformer {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b));
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Per-sample augmentation stream: independent of worker scheduling because it
// depends only on (run seed, epoch, sample id).
inline std::mt19937 derive_rng(std::uint64_t seed, std::uint64_t epoch, std::string_view sample_id) {
    std::uint64_t h = hash_combine(hash_combine(seed, epoch), fnv1a(sample_id));
    return std::mt19937(static_cast<std::uint32_t>(h ^ (h >> 32)));
}

template <typename T>
T uniform(std::mt19937& rng, T lo, T hi) {
    std::uniform_real_distribution<T> d(lo, hi);
    return d(rng);
}

// Normal draw rejected outside +-2 sigma.
template <typename T>
T truncated_normal(std::mt19937& rng, T stddev) {
    std::normal_distribution<T> d(T(0), stddev);
    for (;;) {
        T v = d(rng);
        if (v >= T(-2) * stddev && v <= T(2) * stddev) return v;
    }
}

inline std::string serialize_rng(const std::mt19937& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline std::mt19937 deserialize_rng(const std::string& s) {
    std::istringstream is(s);
    std::mt19937 rng;
    is >> rng;
    return rng;
}

} // namespace ferformer
