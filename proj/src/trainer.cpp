#include "aam/trainer.hpp"

#include <cmath>

#include "aam/rng.hpp"

namespace aam {

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train.steps: must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size: must be positive");
  if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate: must be >= 0");
  if (T < 2) throw ConfigError("train.T: must be >= 2");
  if (ema && !(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train.ema_decay: must lie in [0, 1)");
  if (!(grad_clip > 0.0)) throw ConfigError("train.grad_clip: must be > 0");
}

AdamOptimizer::AdamOptimizer(const nn::ParamStore& layout, double lr, double beta1, double beta2, double eps)
    : m_(layout.zeros_like()), v_(layout.zeros_like()), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(nn::ParamStore& params, const nn::ParamStore& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const float step = static_cast<float>(lr_ / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(eps_);
  for (std::size_t i = 0; i < params.count(); ++i) {
    const int id = static_cast<int>(i);
    auto p = params[id];
    auto g = grads[id];
    auto m = m_[id];
    auto v = v_[id];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      p[j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

double clip_global_norm(nn::ParamStore& grads, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.count(); ++i)
    for (float g : grads[static_cast<int>(i)]) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (std::size_t i = 0; i < grads.count(); ++i)
      for (float& g : grads[static_cast<int>(i)]) g *= s;
  }
  return norm;
}

TrainResult train(const ImageBatch& dataset, const TrainConfig& config, const NoiseSchedule& schedule,
                  Denoiser initial, const TrainProgress& progress, const TrainSnapshot& snapshot) {
  config.validate();
  if (dataset.batch() == 0) throw ConfigError("train: dataset is empty");
  if (schedule.total_steps != config.T)
    throw ConfigError("train.T: " + std::to_string(config.T) + " does not match schedule T " +
                      std::to_string(schedule.total_steps));

  Denoiser model = std::move(initial);
  require_same_shape(dataset.slice(0, 1), ImageBatch(1, model.arch().in_channels, model.arch().image_size,
                                                     model.arch().image_size),
                     "train: dataset vs architecture");
  nn::ParamStore ema = model.weights();
  nn::ParamStore grads = model.weights().zeros_like();
  AdamOptimizer adam(model.weights(), config.learning_rate);

  Rng rng(derive_seed(config.seed, 0x7472616eULL));
  std::uniform_int_distribution<int> pick(0, dataset.batch() - 1);
  std::uniform_int_distribution<int> pick_t(0, config.T - 1);
  std::normal_distribution<float> normal(0.0f, 1.0f);

  const int bs = config.batch_size;
  const int per = static_cast<int>(dataset.sample_size());
  TrainResult result{model, {}};
  result.losses.reserve(config.steps);
  ForwardCache cache;
  std::vector<int> ts(bs);
  for (long step = 0; step < config.steps; ++step) {
    Tensor x_t(bs, dataset.channels(), dataset.height(), dataset.width());
    Tensor eps(bs, dataset.channels(), dataset.height(), dataset.width());
    for (int b = 0; b < bs; ++b) {
      const int idx = pick(rng);
      ts[b] = pick_t(rng);
      const double ab = schedule.alpha_bars[ts[b]];
      const float sa = static_cast<float>(std::sqrt(ab)), sn = static_cast<float>(std::sqrt(1.0 - ab));
      auto src = dataset.sample(idx);
      auto xs = x_t.sample(b);
      auto es = eps.sample(b);
      for (int i = 0; i < per; ++i) {
        es[i] = normal(rng);
        xs[i] = sa * static_cast<float>(src[i]) + sn * es[i];
      }
    }
    Tensor pred;
    try {
      pred = model.forward(x_t, ts, AttentionTemperature{}, &cache);
    } catch (const TrainingError&) {
      throw;
    } catch (const NumericalError& e) {
      throw TrainingError(std::string("train: ") + e.what(), step);
    }
    Tensor d_out(pred.batch(), pred.channels(), pred.height(), pred.width());
    double loss = 0.0;
    const float scale = 2.0f / static_cast<float>(pred.size());
    auto pv = pred.values();
    auto ev = eps.values();
    auto dv = d_out.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const float diff = pv[i] - ev[i];
      loss += static_cast<double>(diff) * diff;
      dv[i] = scale * diff;
    }
    loss /= static_cast<double>(pv.size());
    if (!std::isfinite(loss)) throw TrainingError("train: loss is not finite", step);
    result.losses.push_back(loss);

    grads.fill(0.0f);
    model.backward(d_out, cache, grads);
    const double gnorm = clip_global_norm(grads, config.grad_clip);
    if (!std::isfinite(gnorm)) throw TrainingError("train: gradient norm is not finite", step);
    adam.step(model.weights(), grads);
    if (config.ema) {
      const float k = static_cast<float>(1.0 - config.ema_decay);
      for (std::size_t i = 0; i < ema.count(); ++i) {
        auto e = ema[static_cast<int>(i)];
        auto w = model.weights()[static_cast<int>(i)];
        for (std::size_t j = 0; j < e.size(); ++j) e[j] += k * (w[j] - e[j]);
      }
    }
    if (progress) progress(step, loss);
    if (snapshot.callback && snapshot.every > 0 && (step + 1) % snapshot.every == 0 && step + 1 < config.steps) {
      Denoiser view = model;
      if (config.ema) view.weights() = ema;
      snapshot.callback(step + 1, view);
    }
  }
  result.params = std::move(model);
  if (config.ema) result.params.weights() = std::move(ema);
  return result;
}

NoisePredictor predictor_for(const Denoiser& params) {
  return [&params](const ImageBatch& x_t, int t) { return denoise(x_t, t, params).eps_pred; };
}

AugmentedSet make_noise_augmented_set(const ImageBatch& dataset, const NoiseSchedule& schedule,
                                      const NoisePredictor& predictor, std::span<const int> t_grid, int per_image,
                                      std::uint64_t seed, StageBounds bounds, AugmentationTarget target) {
  if (per_image < 0) throw ConfigError("bank.per_image: must be >= 0");
  if (per_image > 0 && t_grid.empty()) throw ConfigError("bank.t_grid: must not be empty when bank.per_image > 0");
  for (int t : t_grid)
    if (t < bounds.t2 || t > bounds.t1 || t >= schedule.total_steps)
      throw ConfigError("bank.t_grid: timestep " + std::to_string(t) + " outside [" + std::to_string(bounds.t2) +
                        ", " + std::to_string(bounds.t1) + "]");
  const int n = dataset.batch();
  const int extra = per_image > 0 ? static_cast<int>(t_grid.size()) * per_image : 0;
  AugmentedSet out;
  out.images = ImageBatch(n * (1 + extra), dataset.channels(), dataset.height(), dataset.width());
  out.timesteps.assign(out.images.batch(), 0);
  const std::size_t per = dataset.sample_size();
  for (int i = 0; i < n; ++i) {
    auto src = dataset.sample(i);
    std::copy(src.begin(), src.end(), out.images.sample(i).begin());
  }
  if (extra == 0) return out;

  // Entry for (image i, grid slot g, draw k) lives at n + (i * extra + g * per_image + k).
  for (std::size_t g = 0; g < t_grid.size(); ++g) {
    const int t = t_grid[g];
    for (int k = 0; k < per_image; ++k) {
      ImageBatch eps(n, dataset.channels(), dataset.height(), dataset.width());
      for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i), g * 1000003ULL + k));
        fill_normal(eps.sample(i), rng);
      }
      ImageBatch x_t = forward_diffuse(dataset, t, eps, schedule);
      ImageBatch entry = target == AugmentationTarget::noisy_input ? x_t : predict_x0(x_t, predictor(x_t, t), t, schedule);
      for (int i = 0; i < n; ++i) {
        const int dst = n + i * extra + static_cast<int>(g) * per_image + k;
        auto s = entry.sample(i);
        auto d = out.images.sample(dst);
        for (std::size_t j = 0; j < per; ++j) d[j] = std::clamp(s[j], -1.5, 1.5);
        out.timesteps[dst] = t;
      }
    }
  }
  return out;
}

}  // namespace aam
