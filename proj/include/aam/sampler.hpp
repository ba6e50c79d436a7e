#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "aam/anomaly.hpp"
#include "aam/denoiser.hpp"
#include "aam/schedule.hpp"

namespace aam {

enum class TauOptimizer { adam, sgd };

/// Full parameterization of the adaptive sampler.
struct SamplerConfig {
  int T = 1000;
  int t1 = 920;
  int t2 = 600;
  int max_iterations = 10;        // N
  double learning_rate = 0.01;    // eta
  double grad_threshold = 0.001;  // delta
  int reinit_interval = 40;       // lambda
  std::vector<int> perturb_steps{921, 881, 841};  // L
  double gamma = 2.0;
  double beta_multiplier = 1.5;
  int ddim_steps = 250;
  std::vector<int> modulated_resolutions{32, 16, 8};
  std::uint64_t seed = 0;
  double fd_step = 0.01;
  TauOptimizer optimizer = TauOptimizer::adam;
  ScoreAggregation aggregation = ScoreAggregation::max;
  FeatureTimestep feature_timestep = FeatureTimestep::current;
  double x0_clip = 1.0;  // 0 disables

  int feature_t(int t) const { return feature_timestep == FeatureTimestep::current ? t : 0; }
  void validate() const;
  bool stage2_empty() const { return t1 == t2; }
  std::string fingerprint_text() const;
  std::uint64_t fingerprint() const;
};

SamplerConfig default_config(int T);

/// Central difference (f(x + h) - f(x - h)) / 2h.
double fd_gradient(const std::function<double(double)>& objective, double tau_logit, double fd_step);

struct TraceRecord {
  int timestep = 0;
  int iterations = 0;       // descent updates applied
  int evaluations = 0;      // gradient evaluations
  double tau_logit = 0.0;
  double tau = 1.0;
  double score = 0.0;       // anomaly score of x0-prediction at the final tau
  double last_gradient = 0.0;
  bool reinitialized = false;
  bool early_stopped = false;
  bool perturbed = false;
  double masked_fraction = 0.0;
  std::vector<double> tau_history;  // tau_logit at each gradient evaluation, then the final value
  std::vector<double> score_history;  // (f(x + h) + f(x - h)) / 2 at each gradient evaluation
};

struct TuningState {
  double tau_logit = 0.0;
  int iterations_used = 0;
  double last_gradient = 0.0;
  // Adam moments, reset at every re-initialization.
  double m = 0.0, v = 0.0;
  long adam_t = 0;
  std::vector<TraceRecord> trace;
};

/// One timestep of tau-logit descent on an arbitrary objective. Appends one
/// record to state.trace.
void optimize_tau(const std::function<double(double)>& objective, int t, TuningState& state,
                  const SamplerConfig& config);

/// The same with the anomaly objective s(tau_logit) =
/// score(bank, predict_x0(x_t, denoise(x_t, t, tau), t)).
void optimize_tau(const ImageBatch& x_t, int t, TuningState& state, const MemoryBank& bank, const Denoiser& params,
                  const NoiseSchedule& schedule, const SamplerConfig& config);

struct PerturbationMask {
  std::vector<std::uint8_t> mask;  // row-major, 1 where perturbed
  int height = 0, width = 0;
  double threshold = 0.0;
  double fraction_masked = 0.0;
};

PerturbationMask make_mask(const ImageBatch& heatmap, double threshold);

/// M * zeta + (1 - M) * x with zeta ~ N(0, 1) drawn from `seed`.
ImageBatch masked_perturb(const ImageBatch& x_next, const ImageBatch& heatmap, double threshold, std::uint64_t seed,
                          PerturbationMask* mask_out = nullptr);

struct SampleOutput {
  ImageBatch images;
  std::vector<TuningState> traces;  // one per sample
};

/// Maps each L element to the largest visited timestep at or below
/// min(element, T1).
/// Throws ConfigError if a mapped step falls outside Stage 2 or two
/// elements share a step.
std::vector<int> mapped_perturb_steps(const SamplerConfig& config);

/// Per-sample noise x_T for sample index i.
ImageBatch initial_noise(int image_size, int channels, std::uint64_t seed, int index);

/// Adaptive sampler; sample i starts from initial_noise(.., seed, i).
/// `on_sample` (if set) is called with each finished index, under a lock.
SampleOutput sample(const Denoiser& params, const MemoryBank& bank, const NoiseSchedule& schedule,
                    const SamplerConfig& config, int count, std::uint64_t seed, int threads = 1,
                    const std::function<void(int)>& on_sample = {});

/// Plain DDIM chain at temperature 1 from the same seeded x_T.
ImageBatch baseline_sample(const Denoiser& params, const NoiseSchedule& schedule, int ddim_steps, int count,
                           std::uint64_t seed, int threads = 1, double x0_clip = 1.0);

/// DDIM chain at fixed per-resolution temperatures for every step.
ImageBatch fixed_temperature_sample(const Denoiser& params, const NoiseSchedule& schedule, int ddim_steps,
                                    const AttentionTemperature& temps, int count, std::uint64_t seed,
                                    int threads = 1, double x0_clip = 1.0);

/// Trace file: one line per record, whitespace separated.
std::string format_trace(const TuningState& state, int sample_index);
void write_trace(const std::filesystem::path& path, const TuningState& state, int sample_index);
std::vector<TraceRecord> parse_trace(const std::string& text);

}  // namespace aam
