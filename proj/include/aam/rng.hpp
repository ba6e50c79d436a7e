#pragma once

#include <cstdint>
#include <random>

namespace aam {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  return mix_seed(mix_seed(mix_seed(base) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

template <typename Range>
void fill_normal(Range&& out, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : out) v = static_cast<std::remove_reference_t<decltype(v)>>(n(rng));
}

}  // namespace aam
