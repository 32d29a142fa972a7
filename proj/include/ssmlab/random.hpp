#pragma once

#include <cstdint>
#include <cstring>
#include <random>
#include <span>

namespace ssmlab {

/// Independent generator per (seed, purpose, index).
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

inline std::uint64_t fnv1a(std::span<const double> values) {
    std::uint64_t h = 14695981039346656037ull;
    for (double v : values) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof v);
        for (unsigned char byte : bytes) {
            h ^= byte;
            h *= 1099511628211ull;
        }
    }
    return h;
}

} // namespace ssmlab
