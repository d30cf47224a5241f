#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace fairmed {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent sub-seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return mix_seed(base ^ mix_seed(stream + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t hash_tokens(std::span<const int> tokens) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (int t : tokens) h = mix_seed(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)));
  return h;
}

}  // namespace fairmed
