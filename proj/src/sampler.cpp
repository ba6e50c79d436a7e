#include "aam/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <sstream>
#include <mutex>
#include <thread>

#include "aam/error.hpp"
#include "aam/io.hpp"
#include "aam/rng.hpp"

namespace aam {

namespace {

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string num(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace

void SamplerConfig::validate() const {
  if (T < 1) throw ConfigError("sampler.T: must be positive");
  if (!(T >= t1 && t1 >= t2 && t2 >= 0)) throw ConfigError("sampler.T1/T2: need T >= T1 >= T2 >= 0");
  if (max_iterations < 1) throw ConfigError("sampler.N: must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("sampler.eta: must be > 0");
  if (!(grad_threshold >= 0.0)) throw ConfigError("sampler.delta: must be >= 0");
  if (reinit_interval < 1) throw ConfigError("sampler.lambda: must be > 0");
  if (!(fd_step > 0.0)) throw ConfigError("sampler.fd_step: must be > 0");
  if (!(gamma > 0.0)) throw ConfigError("sampler.gamma: must be > 0");
  if (ddim_steps < 1 || ddim_steps > T) throw ConfigError("sampler.ddim_steps: must lie in [1, T]");
  if (modulated_resolutions.empty()) throw ConfigError("sampler.modulated_resolutions: must not be empty");
  if (!(x0_clip >= 0.0)) throw ConfigError("sampler.x0_clip: must be >= 0");
  if (!stage2_empty())
    for (int l : perturb_steps)
      if (!(l > t2 && l <= t1 + 1))
        throw ConfigError("sampler.L: element " + std::to_string(l) + " outside (T2, T1 + 1]");
}

std::string SamplerConfig::fingerprint_text() const {
  std::ostringstream s;
  s << "sampler.T=" << T << "\nsampler.T1=" << t1 << "\nsampler.T2=" << t2 << "\nsampler.N=" << max_iterations
    << "\nsampler.eta=" << num(learning_rate) << "\nsampler.delta=" << num(grad_threshold)
    << "\nsampler.lambda=" << reinit_interval << "\nsampler.L=" << join(perturb_steps)
    << "\nsampler.gamma=" << num(gamma) << "\nsampler.beta_multiplier=" << num(beta_multiplier)
    << "\nsampler.ddim_steps=" << ddim_steps << "\nsampler.modulated_resolutions=" << join(modulated_resolutions)
    << "\nsampler.seed=" << seed << "\nsampler.fd_step=" << num(fd_step)
    << "\nsampler.optimizer=" << (optimizer == TauOptimizer::adam ? "adam" : "sgd")
    << "\nsampler.aggregation=" << (aggregation == ScoreAggregation::max ? "max" : "mean")
    << "\nsampler.feature_timestep=" << (feature_timestep == FeatureTimestep::current ? "current" : "zero")
    << "\nsampler.x0_clip=" << num(x0_clip) << "\n";
  return s.str();
}

std::uint64_t SamplerConfig::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : fingerprint_text()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SamplerConfig default_config(int T) {
  if (T < 100) throw ConfigError("sampler.T: default_config needs T >= 100");
  SamplerConfig c;
  c.T = T;
  c.t1 = static_cast<int>(std::lround(0.92 * T));
  c.t2 = static_cast<int>(std::lround(0.6 * T));
  c.reinit_interval = static_cast<int>(std::lround(0.04 * T));
  c.perturb_steps.clear();
  for (int k = 0; k < 3; ++k) c.perturb_steps.push_back(c.t1 - c.reinit_interval * k + 1);
  c.ddim_steps = std::min(250, T);
  return c;
}

double fd_gradient(const std::function<double(double)>& objective, double tau_logit, double fd_step) {
  const double hi = objective(tau_logit + fd_step);
  const double lo = objective(tau_logit - fd_step);
  if (!std::isfinite(hi) || !std::isfinite(lo)) throw NumericalError("fd_gradient: objective is not finite");
  return (hi - lo) / (2.0 * fd_step);
}

namespace {

void require_stage2(int t, const SamplerConfig& config) {
  if (!(t <= config.t1 && t > config.t2))
    throw InputError("optimize_tau: t=" + std::to_string(t) + " is outside Stage 2 (" + std::to_string(config.t2) +
                     ", " + std::to_string(config.t1) + "]");
}

// Runs the descent loop; the caller fills in the final score.
TraceRecord tune(const std::function<double(double)>& objective, int t, TuningState& state,
                 const SamplerConfig& config) {
  require_stage2(t, config);
  TraceRecord rec;
  rec.timestep = t;
  if ((config.t1 - t) % config.reinit_interval == 0) {
    state.tau_logit = 0.0;
    state.m = state.v = 0.0;
    state.adam_t = 0;
    rec.reinitialized = true;
  }
  const double h = config.fd_step;
  for (int it = 0; it < config.max_iterations; ++it) {
    double hi, lo;
    try {
      hi = objective(state.tau_logit + h);
      lo = objective(state.tau_logit - h);
    } catch (const NumericalError& e) {
      throw NumericalError("t=" + std::to_string(t) + " iteration=" + std::to_string(it) + ": " + e.what());
    }
    if (!std::isfinite(hi) || !std::isfinite(lo))
      throw NumericalError("t=" + std::to_string(t) + " iteration=" + std::to_string(it) +
                           ": objective is not finite");
    const double g = (hi - lo) / (2.0 * h);
    ++rec.evaluations;
    rec.tau_history.push_back(state.tau_logit);
    rec.score_history.push_back(0.5 * (hi + lo));
    state.last_gradient = g;
    if (std::abs(g) < config.grad_threshold) {
      rec.early_stopped = true;
      break;
    }
    if (config.optimizer == TauOptimizer::adam) {
      ++state.adam_t;
      state.m = 0.9 * state.m + 0.1 * g;
      state.v = 0.999 * state.v + 0.001 * g * g;
      const double mhat = state.m / (1.0 - std::pow(0.9, static_cast<double>(state.adam_t)));
      const double vhat = state.v / (1.0 - std::pow(0.999, static_cast<double>(state.adam_t)));
      state.tau_logit -= config.learning_rate * mhat / (std::sqrt(vhat) + 1e-8);
    } else {
      state.tau_logit -= config.learning_rate * g;
    }
    ++rec.iterations;
  }
  rec.tau_history.push_back(state.tau_logit);
  rec.tau_logit = state.tau_logit;
  rec.tau = temperature_from_logit(state.tau_logit, config.gamma);
  rec.last_gradient = state.last_gradient;
  state.iterations_used = rec.iterations;
  return rec;
}

TemperatureControl control(double tau_logit, const SamplerConfig& config) {
  TemperatureControl c;
  c.tau_logit = tau_logit;
  c.gamma = config.gamma;
  c.modulated_resolutions = config.modulated_resolutions;
  return c;
}

ImageBatch clamped_x0(const ImageBatch& x_t, const ImageBatch& eps, int t, const NoiseSchedule& schedule) {
  ImageBatch x0 = predict_x0(x_t, eps, t, schedule);
  for (double& v : x0.values()) v = std::clamp(v, -1.5, 1.5);
  return x0;
}

std::function<double(double)> anomaly_objective(const ImageBatch& x_t, int t, const MemoryBank& bank,
                                                const Denoiser& params, const NoiseSchedule& schedule,
                                                const SamplerConfig& config, const FeatureExtractor& extractor) {
  return [&, t](double tau_logit) {
    const ImageBatch eps = denoise(x_t, t, control(tau_logit, config), params).eps_pred;
    return score(bank, clamped_x0(x_t, eps, t, schedule), extractor, config.feature_t(t), config.aggregation).score;
  };
}

template <typename Fn>
void for_each_sample(int count, int threads, Fn&& fn) {
  threads = std::clamp(threads, 1, std::max(count, 1));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_lock;
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> g(failure_lock);
          if (!failure) failure = std::current_exception();
          next = count;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

ImageBatch gather(const std::vector<ImageBatch>& parts) { return stack<double>(parts); }

constexpr std::uint64_t kNoiseStream = 0x6e6f697365ULL;
constexpr std::uint64_t kZetaStream = 0x7a657461ULL;

}  // namespace

void optimize_tau(const std::function<double(double)>& objective, int t, TuningState& state,
                  const SamplerConfig& config) {
  TraceRecord rec = tune(objective, t, state, config);
  rec.score = objective(state.tau_logit);
  state.trace.push_back(std::move(rec));
}

void optimize_tau(const ImageBatch& x_t, int t, TuningState& state, const MemoryBank& bank, const Denoiser& params,
                  const NoiseSchedule& schedule, const SamplerConfig& config) {
  const DenoiserFeatureExtractor extractor(params);
  optimize_tau(anomaly_objective(x_t, t, bank, params, schedule, config, extractor), t, state, config);
}

PerturbationMask make_mask(const ImageBatch& heatmap, double threshold) {
  PerturbationMask m;
  m.height = heatmap.height();
  m.width = heatmap.width();
  m.threshold = threshold;
  m.mask.resize(static_cast<std::size_t>(m.height) * m.width);
  long on = 0;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const bool hit = heatmap.at(0, 0, y, x) > threshold;
      m.mask[static_cast<std::size_t>(y) * m.width + x] = hit;
      on += hit;
    }
  m.fraction_masked = m.mask.empty() ? 0.0 : static_cast<double>(on) / static_cast<double>(m.mask.size());
  return m;
}

ImageBatch masked_perturb(const ImageBatch& x_next, const ImageBatch& heatmap, double threshold, std::uint64_t seed,
                          PerturbationMask* mask_out) {
  if (heatmap.height() != x_next.height() || heatmap.width() != x_next.width() || heatmap.channels() != 1 ||
      heatmap.batch() != 1 || x_next.batch() != 1)
    throw ShapeError("masked_perturb: heatmap " + heatmap.shape_string() + " does not match image " +
                     x_next.shape_string());
  const PerturbationMask m = make_mask(heatmap, threshold);
  ImageBatch zeta(x_next.batch(), x_next.channels(), x_next.height(), x_next.width());
  Rng rng(seed);
  fill_normal(zeta.values(), rng);
  ImageBatch out = x_next;
  for (int c = 0; c < x_next.channels(); ++c)
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (m.mask[static_cast<std::size_t>(y) * m.width + x]) out.at(0, c, y, x) = zeta.at(0, c, y, x);
  if (mask_out) *mask_out = m;
  return out;
}

std::vector<int> mapped_perturb_steps(const SamplerConfig& config) {
  std::vector<int> out;
  if (config.stage2_empty()) return out;
  const std::vector<int> visited = ddim_timesteps(config.T, config.ddim_steps);
  for (int l : config.perturb_steps) {
    int mapped = -1;
    for (int t : visited)
      if (t <= std::min(l, config.t1)) {
        mapped = t;
        break;
      }
    if (!(mapped <= config.t1 && mapped > config.t2))
      throw ConfigError("sampler.L: element " + std::to_string(l) + " maps to step " + std::to_string(mapped) +
                        " outside Stage 2");
    if (std::find(out.begin(), out.end(), mapped) != out.end())
      throw ConfigError("sampler.L: two elements map to step " + std::to_string(mapped));
    out.push_back(mapped);
  }
  return out;
}

ImageBatch initial_noise(int image_size, int channels, std::uint64_t seed, int index) {
  ImageBatch x(1, channels, image_size, image_size);
  Rng rng(derive_seed(seed, kNoiseStream, static_cast<std::uint64_t>(index)));
  fill_normal(x.values(), rng);
  x.seed_tag = seed;
  return x;
}

SampleOutput sample(const Denoiser& params, const MemoryBank& bank, const NoiseSchedule& schedule,
                    const SamplerConfig& config, int count, std::uint64_t seed, int threads,
                    const std::function<void(int)>& on_sample) {
  config.validate();
  if (!bank.calibrated()) throw ConfigError("sample: memory bank is not calibrated");
  if (schedule.total_steps != config.T) throw ConfigError("sampler.T: does not match the schedule");
  if (count < 1) throw ConfigError("samples: must be >= 1");
  params.validate_temperatures(control(0.0, config));
  if (!config.stage2_empty() && bank.dim() != DenoiserFeatureExtractor(params).feature_dim())
    throw ConfigError("sample: bank dimension does not match the denoiser features");
  const std::vector<int> visited = ddim_timesteps(config.T, config.ddim_steps);
  const std::vector<int> perturb_at = mapped_perturb_steps(config);
  const double beta = bank.threshold(config.beta_multiplier);
  const int size = params.arch().image_size, channels = params.arch().in_channels;
  const DenoiserFeatureExtractor extractor(params);

  std::vector<ImageBatch> images(count);
  std::vector<TuningState> states(count);
  std::mutex report_lock;
  for_each_sample(count, threads, [&](int i) {
    ImageBatch x = initial_noise(size, channels, seed, i);
    TuningState& state = states[i];
    for (std::size_t k = 0; k < visited.size(); ++k) {
      const int t = visited[k];
      const int t_prev = k + 1 < visited.size() ? visited[k + 1] : kCleanStep;
      if (t <= config.t1 && t > config.t2) {
        const auto objective = anomaly_objective(x, t, bank, params, schedule, config, extractor);
        TraceRecord rec = tune(objective, t, state, config);
        const ImageBatch eps = denoise(x, t, control(state.tau_logit, config), params).eps_pred;
        const AnomalyResult res =
            score(bank, clamped_x0(x, eps, t, schedule), extractor, config.feature_t(t), config.aggregation);
        rec.score = res.score;
        ImageBatch next = ddim_step(x, eps, t, t_prev, schedule, config.x0_clip);
        if (std::find(perturb_at.begin(), perturb_at.end(), t) != perturb_at.end()) {
          PerturbationMask mask;
          next = masked_perturb(next, res.heatmap, beta, derive_seed(seed, kZetaStream, (std::uint64_t(i) << 32) | t),
                                &mask);
          rec.perturbed = true;
          rec.masked_fraction = mask.fraction_masked;
        }
        state.trace.push_back(std::move(rec));
        x = std::move(next);
      } else {
        x = ddim_step(x, denoise(x, t, params).eps_pred, t, t_prev, schedule, config.x0_clip);
      }
    }
    images[i] = std::move(x);
    if (on_sample) {
      std::lock_guard<std::mutex> g(report_lock);
      on_sample(i);
    }
  });
  return {gather(images), std::move(states)};
}

ImageBatch fixed_temperature_sample(const Denoiser& params, const NoiseSchedule& schedule, int ddim_steps,
                                    const AttentionTemperature& temps, int count, std::uint64_t seed,
                                    int threads, double x0_clip) {
  if (count < 1) throw ConfigError("samples: must be >= 1");
  if (!(x0_clip >= 0.0)) throw ConfigError("sampler.x0_clip: must be >= 0");
  for (const auto& [res, tau] : temps.per_resolution) {
    TemperatureControl probe;
    probe.modulated_resolutions = {res};
    params.validate_temperatures(probe);
    if (!(tau > 0.0)) throw ConfigError("temperature must be > 0");
  }
  const std::vector<int> visited = ddim_timesteps(schedule.total_steps, ddim_steps);
  const int size = params.arch().image_size, channels = params.arch().in_channels;
  std::vector<ImageBatch> images(count);
  for_each_sample(count, threads, [&](int i) {
    ImageBatch x = initial_noise(size, channels, seed, i);
    for (std::size_t k = 0; k < visited.size(); ++k) {
      const int t = visited[k];
      const int t_prev = k + 1 < visited.size() ? visited[k + 1] : kCleanStep;
      x = ddim_step(x, denoise(x, t, temps, params).eps_pred, t, t_prev, schedule, x0_clip);
    }
    images[i] = std::move(x);
  });
  return gather(images);
}

ImageBatch baseline_sample(const Denoiser& params, const NoiseSchedule& schedule, int ddim_steps, int count,
                           std::uint64_t seed, int threads, double x0_clip) {
  return fixed_temperature_sample(params, schedule, ddim_steps, AttentionTemperature{}, count, seed, threads, x0_clip);
}

std::string format_trace(const TuningState& state, int sample_index) {
  std::string out =
      "# sample timestep iterations evaluations tau_logit tau score last_gradient reinitialized early_stopped "
      "perturbed masked_fraction tau_history\n";
  char buf[512];
  for (const auto& r : state.trace) {
    std::snprintf(buf, sizeof buf, "%d %d %d %d %.17g %.17g %.17g %.17g %d %d %d %.17g ", sample_index, r.timestep,
                  r.iterations, r.evaluations, r.tau_logit, r.tau, r.score, r.last_gradient, r.reinitialized ? 1 : 0,
                  r.early_stopped ? 1 : 0, r.perturbed ? 1 : 0, r.masked_fraction);
    out += buf;
    for (std::size_t j = 0; j < r.tau_history.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%s%.17g", j ? "," : "", r.tau_history[j]);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void write_trace(const std::filesystem::path& path, const TuningState& state, int sample_index) {
  io::write_file_atomic(path, format_trace(state, sample_index));
}

std::vector<TraceRecord> parse_trace(const std::string& text) {
  std::vector<TraceRecord> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    TraceRecord r;
    int sample_index, reinit, early, perturbed;
    std::string history;
    if (!(ls >> sample_index >> r.timestep >> r.iterations >> r.evaluations >> r.tau_logit >> r.tau >> r.score >>
          r.last_gradient >> reinit >> early >> perturbed >> r.masked_fraction >> history))
      throw IoError("trace line " + std::to_string(lineno) + ": malformed record");
    r.reinitialized = reinit != 0;
    r.early_stopped = early != 0;
    r.perturbed = perturbed != 0;
    std::istringstream hs(history);
    std::string item;
    while (std::getline(hs, item, ',')) r.tau_history.push_back(std::stod(item));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace aam
