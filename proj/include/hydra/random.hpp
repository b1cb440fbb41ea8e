#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace hydra {

using Engine = std::mt19937_64;

// 64-bit FNV-1a; stable across platforms so derived seeds are reproducible.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

// Independent stream per (seed, label), e.g. one per parameter name or image.
inline Engine make_engine(std::uint64_t seed, std::string_view label = {}) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a(label)),
                    static_cast<std::uint32_t>(fnv1a(label) >> 32)};
  return Engine(seq);
}

inline Engine make_engine(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    0x9e3779b9u};
  return Engine(seq);
}

inline double uniform(Engine& eng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(eng);
}

inline std::size_t uniform_index(Engine& eng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng);
}

}  // namespace hydra
