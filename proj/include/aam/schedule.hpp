#pragma once

#include <string_view>
#include <vector>

#include "aam/tensor.hpp"

namespace aam {

enum class ScheduleKind { linear, cosine };

ScheduleKind parse_schedule_kind(std::string_view s);
std::string_view to_string(ScheduleKind k);

/// Timestep index meaning "fully denoised": alpha_bar = 1.
inline constexpr int kCleanStep = -1;

/// Forward-process tables. Timesteps are zero-based; t = 0 is the
/// least-noisy trained step.
struct NoiseSchedule {
  int total_steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  /// alpha_bar at t, with alpha_bar(kCleanStep) == 1.
  double alpha_bar(int t) const;
};

NoiseSchedule build_schedule(int total_steps, ScheduleKind kind = ScheduleKind::linear, double beta_min = 1e-4,
                             double beta_max = 0.02);

/// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
ImageBatch forward_diffuse(const ImageBatch& x0, int t, const ImageBatch& eps, const NoiseSchedule& s);

/// (x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
ImageBatch predict_x0(const ImageBatch& x_t, const ImageBatch& eps_pred, int t, const NoiseSchedule& s);

/// Deterministic DDIM update from t to t_prev (t_prev may be kCleanStep).
/// A positive x0_clip clamps the x0-prediction to [-x0_clip, x0_clip]
/// before recombining; eps_pred is used as given.
ImageBatch ddim_step(const ImageBatch& x_t, const ImageBatch& eps_pred, int t, int t_prev, const NoiseSchedule& s,
                     double x0_clip = 0.0);

/// Uniformly strided visit order, descending: (steps-1)*stride, ..., stride, 0
/// with stride = T / steps.
std::vector<int> ddim_timesteps(int total_steps, int ddim_steps);

}  // namespace aam
