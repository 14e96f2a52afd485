#pragma once

#include <cstdint>
#include <random>

namespace gridflow {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent child streams.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t child_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix64(mix64(seed) ^ (stream + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) { return Rng(child_seed(seed, stream)); }

inline double uniform(Rng& rng, double low, double high) {
    return std::uniform_real_distribution<double>(low, high)(rng);
}

}  // namespace gridflow
