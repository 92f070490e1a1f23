#pragma once

#include <cstdint>
#include <string_view>

namespace privsim {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Labeled sub-stream of a root seed: every consumer of randomness asks for
/// its own (label, index) stream so adding one consumer never perturbs another.
inline constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view label,
                                           std::uint64_t index = 0) noexcept {
    return splitmix64(splitmix64(root ^ fnv1a(label)) + splitmix64(index + 1));
}

}  // namespace privsim
