#pragma once

#include <random>

#include "aam/denoiser.hpp"
#include "aam/rng.hpp"
#include "aam/tensor.hpp"

namespace aam::test {

inline ImageBatch random_batch(int n, int c, int h, int w, std::uint64_t seed, double scale = 1.0) {
  ImageBatch x(n, c, h, w);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  for (double& v : x.values()) v = normal(rng);
  return x;
}

// 8x8 two-level network small enough for exhaustive tests.
inline ArchSpec tiny_arch() {
  ArchSpec a;
  a.image_size = 8;
  a.base_channels = 8;
  a.channel_mult = {1, 2, 2};
  a.attention_resolutions = {8, 4, 2};
  a.groups = 4;
  a.temb_dim = 16;
  a.feature_taps = {5, 7};
  return a;
}

// Weights drawn wider than the default init so that attention and the
// zero-initialized output layers carry signal.
inline Denoiser busy_denoiser(const ArchSpec& arch, std::uint64_t seed) {
  Denoiser d(arch, seed);
  Rng rng(derive_seed(seed, 99));
  std::normal_distribution<float> normal(0.0f, 0.3f);
  auto& w = d.weights();
  for (std::size_t i = 0; i < w.count(); ++i)
    for (float& v : w[static_cast<int>(i)]) v += normal(rng);
  return d;
}

}  // namespace aam::test
