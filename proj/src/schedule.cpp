#include "aam/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace aam {

ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ConfigError("schedule.kind: unknown schedule '" + std::string(s) + "'");
}

std::string_view to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

double NoiseSchedule::alpha_bar(int t) const {
  if (t == kCleanStep) return 1.0;
  if (t < 0 || t >= total_steps)
    throw InputError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(total_steps) + ")");
  return alpha_bars[t];
}

NoiseSchedule build_schedule(int total_steps, ScheduleKind kind, double beta_min, double beta_max) {
  if (total_steps < 2) throw ConfigError("schedule.T: must be >= 2, got " + std::to_string(total_steps));
  if (!(beta_min > 0.0)) throw ConfigError("schedule.beta_min: must be > 0");
  if (!(beta_max < 1.0)) throw ConfigError("schedule.beta_max: must be < 1");
  if (!(beta_min <= beta_max)) throw ConfigError("schedule.beta_min: must not exceed beta_max");

  NoiseSchedule s;
  s.total_steps = total_steps;
  s.betas.resize(total_steps);
  if (kind == ScheduleKind::linear) {
    for (int t = 0; t < total_steps; ++t)
      s.betas[t] = beta_min + (beta_max - beta_min) * static_cast<double>(t) / (total_steps - 1);
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double u) {
      double c = std::cos((u + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int t = 0; t < total_steps; ++t) {
      double b = 1.0 - f(static_cast<double>(t + 1) / total_steps) / f(static_cast<double>(t) / total_steps);
      s.betas[t] = std::clamp(b, beta_min, beta_max);
    }
  }
  s.alphas.resize(total_steps);
  s.alpha_bars.resize(total_steps);
  double prod = 1.0;
  for (int t = 0; t < total_steps; ++t) {
    s.alphas[t] = 1.0 - s.betas[t];
    prod *= s.alphas[t];
    s.alpha_bars[t] = prod;
  }
  return s;
}

ImageBatch forward_diffuse(const ImageBatch& x0, int t, const ImageBatch& eps, const NoiseSchedule& s) {
  require_same_shape(x0, eps, "forward_diffuse");
  const double ab = s.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  ImageBatch out(x0.batch(), x0.channels(), x0.height(), x0.width());
  auto xs = x0.values();
  auto es = eps.values();
  auto os = out.values();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = a * xs[i] + b * es[i];
  out.seed_tag = x0.seed_tag;
  return out;
}

ImageBatch predict_x0(const ImageBatch& x_t, const ImageBatch& eps_pred, int t, const NoiseSchedule& s) {
  require_same_shape(x_t, eps_pred, "predict_x0");
  const double ab = s.alpha_bar(t);
  if (ab < 1e-12) throw NumericalError("predict_x0: alpha_bar below 1e-12 at t=" + std::to_string(t));
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  ImageBatch out(x_t.batch(), x_t.channels(), x_t.height(), x_t.width());
  auto xs = x_t.values();
  auto es = eps_pred.values();
  auto os = out.values();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = (xs[i] - b * es[i]) / a;
  out.seed_tag = x_t.seed_tag;
  return out;
}

ImageBatch ddim_step(const ImageBatch& x_t, const ImageBatch& eps_pred, int t, int t_prev, const NoiseSchedule& s,
                     double x0_clip) {
  if (t_prev >= t)
    throw OrderingError("ddim_step: t_prev (" + std::to_string(t_prev) + ") must be < t (" + std::to_string(t) + ")");
  ImageBatch x0 = predict_x0(x_t, eps_pred, t, s);
  if (x0_clip > 0.0)
    for (double& v : x0.values()) v = std::clamp(v, -x0_clip, x0_clip);
  const double ab_prev = s.alpha_bar(t_prev);
  if (ab_prev == 1.0) return x0;
  const double a = std::sqrt(ab_prev), b = std::sqrt(1.0 - ab_prev);
  auto es = eps_pred.values();
  auto os = x0.values();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = a * os[i] + b * es[i];
  return x0;
}

std::vector<int> ddim_timesteps(int total_steps, int ddim_steps) {
  if (ddim_steps < 1 || ddim_steps > total_steps)
    throw ConfigError("sampler.ddim_steps: must be in [1, T], got " + std::to_string(ddim_steps));
  const int stride = total_steps / ddim_steps;
  std::vector<int> ts(ddim_steps);
  for (int i = 0; i < ddim_steps; ++i) ts[i] = (ddim_steps - 1 - i) * stride;
  return ts;
}

}  // namespace aam
