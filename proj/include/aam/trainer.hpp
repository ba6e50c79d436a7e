#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "aam/denoiser.hpp"
#include "aam/schedule.hpp"

namespace aam {

struct TrainConfig {
  long steps = 20000;
  int batch_size = 16;
  double learning_rate = 5e-4;
  int T = 1000;
  bool ema = true;
  double ema_decay = 0.999;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainResult {
  Denoiser params;                // EMA weights when enabled
  std::vector<double> losses;     // per step
};

using TrainProgress = std::function<void(long step, double loss)>;
/// Called with the current (EMA when enabled) weights after every
/// `every` steps.
struct TrainSnapshot {
  long every = 0;
  std::function<void(long step, const Denoiser& weights)> callback;
};

/// DDPM training with the eps-prediction MSE objective, Adam, global-norm
/// gradient clipping and optional weight EMA.
TrainResult train(const ImageBatch& dataset, const TrainConfig& config, const NoiseSchedule& schedule,
                  Denoiser initial, const TrainProgress& progress = {}, const TrainSnapshot& snapshot = {});

/// Scalar Adam state over a ParamStore.
class AdamOptimizer {
 public:
  AdamOptimizer(const nn::ParamStore& layout, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(nn::ParamStore& params, const nn::ParamStore& grads);

 private:
  nn::ParamStore m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

/// Rescales grads in place so that their global L2 norm is at most max_norm;
/// returns the norm before clipping.
double clip_global_norm(nn::ParamStore& grads, double max_norm);

/// eps predictor used by the augmentation pipeline; any callable mapping
/// (x_t, t) to a noise estimate.
using NoisePredictor = std::function<ImageBatch(const ImageBatch& x_t, int t)>;
NoisePredictor predictor_for(const Denoiser& params);

enum class AugmentationTarget { x0_prediction, noisy_input };

struct AugmentedSet {
  ImageBatch images;
  /// Timestep whose embedding is used when extracting features of each
  /// entry; clean originals use 0.
  std::vector<int> timesteps;
};

struct StageBounds {
  int t1 = 0;  // upper (noisier) bound
  int t2 = 0;  // lower bound
};

/// Clean originals once each, followed by per_image entries per (image, t)
/// holding predict_x0(forward_diffuse(x0, t, eps), predictor(x_t, t), t),
/// clamped to [-1.5, 1.5].
AugmentedSet make_noise_augmented_set(const ImageBatch& dataset, const NoiseSchedule& schedule,
                                      const NoisePredictor& predictor, std::span<const int> t_grid, int per_image,
                                      std::uint64_t seed, StageBounds bounds,
                                      AugmentationTarget target = AugmentationTarget::x0_prediction);

}  // namespace aam
