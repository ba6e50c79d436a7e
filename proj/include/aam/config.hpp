#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "aam/denoiser.hpp"
#include "aam/eval.hpp"
#include "aam/sampler.hpp"
#include "aam/shapes.hpp"
#include "aam/trainer.hpp"

namespace aam {

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::linear;
  int T = 1000;
  double beta_min = 1e-4;
  double beta_max = 0.02;
};

struct BankConfig {
  int source_images = 200;
  std::vector<int> t_grid{900, 800, 700, 600};
  int per_image = 1;
  double coreset_fraction = 0.1;
  double holdout_fraction = 0.1;
  AugmentationTarget target = AugmentationTarget::x0_prediction;
};

struct EvalConfig {
  DetectorConfig detector;
  int reference_count = 1000;
  std::uint64_t reference_seed = 7919;
};

struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 0;
  int threads = 1;
  int samples = 200;
  ShapesDatasetSpec dataset;
  ArchSpec model;
  ScheduleConfig schedule;
  TrainConfig train;
  BankConfig bank;
  SamplerConfig sampler;
  EvalConfig eval;
  /// Fixed-temperature settings for the sweep mode, e.g. "32:0.1,16:10".
  std::vector<AttentionTemperature> sweep;

  void validate() const;
  /// Resolved snapshot in the same key=value format load_config reads.
  std::string to_text() const;
};

/// Built-in profiles: "smoke" and "desk".
RunConfig profile_config(const std::string& name);

/// key=value lines with '#' comments. A "profile" key (if present) selects
/// the base profile; every other key overrides one field.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
void apply_override(RunConfig& config, const std::string& key, const std::string& value);

std::string format_temperatures(const AttentionTemperature& t);
AttentionTemperature parse_temperatures(const std::string& s);

NoiseSchedule build_schedule(const ScheduleConfig& c);

/// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(const std::string& text);

}  // namespace aam
