#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace nsd {

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

// Seed for a named stream under a root seed. Each consumer derives its own
// stream from a purpose label (and optionally an index), so adding a new
// consumer never shifts the draws of an existing one.
std::uint64_t stream_seed(std::uint64_t root, std::string_view label,
                          std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t root, std::string_view label,
                    std::uint64_t index = 0) {
  return Rng(stream_seed(root, label, index));
}

}  // namespace nsd
