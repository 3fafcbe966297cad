#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dicl {

using Rng = std::mt19937_64;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s,
                              std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

// Stable labeled seed derivation. Each pipeline stage draws from its own
// stream, so adding draws in one stage never shifts another.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
  return detail::splitmix64(master ^ detail::fnv1a(label));
}

constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                                    std::uint64_t index) {
  return detail::splitmix64(derive_seed(master, label) + detail::splitmix64(index));
}

}  // namespace dicl
