#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace saq {

/// Independent, reproducible sub-stream of a run seed, keyed by name
/// ("model", "data", "prompts", "qdrop", ...).
inline std::mt19937_64 make_stream(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  std::uint64_t x = seed ^ h;
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return std::mt19937_64(x);
}

}  // namespace saq
