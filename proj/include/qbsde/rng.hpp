#pragma once

#include <cstdint>
#include <random>

namespace qbsde {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent generator for substream `stream` of a run seeded by `seed`.
/// Every path / restart / cell owns one, so results do not depend on how
/// work is scheduled.
inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(splitmix64(stream)),
                      static_cast<std::uint32_t>(splitmix64(stream) >> 32)};
    return std::mt19937_64(seq);
}

}  // namespace qbsde
