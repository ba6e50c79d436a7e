#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "aam/config.hpp"
#include "aam/eval.hpp"
#include "aam/io.hpp"
#include "aam/sampler.hpp"
#include "aam/shapes.hpp"
#include "json.hpp"

using namespace aam;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Options {
  fs::path desk_metrics;
  fs::path cli;
  fs::path test_dir;
  fs::path work = fs::temp_directory_path() / "aam_acceptance";
  std::vector<int> only;
  std::vector<int> known_fail;
};

int run(const std::string& cmd, const fs::path& log) {
  const int status = std::system((cmd + " >> '" + log.string() + "' 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

struct ArmRow {
  std::string label;
  long n = 0;
  double rate = 0.0;
  double frechet = 0.0;
};

std::optional<ArmRow> last_row(const fs::path& csv, const std::string& label) {
  if (!fs::exists(csv)) return std::nullopt;
  std::optional<ArmRow> found;
  for (const auto& line : split(io::read_file(csv), '\n')) {
    const auto f = split(line, ',');
    if (f.size() != 5 || f[0] != label) continue;
    found = ArmRow{f[0], std::stol(f[2]), std::stod(f[3]), std::stod(f[4])};
  }
  return found;
}

char buf[512];

template <typename... A>
std::string fmt(const char* f, A... a) {
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

Outcome hallucination_reduction(const Options& o) {
  const auto base = last_row(o.desk_metrics, "baseline"), aam = last_row(o.desk_metrics, "aam");
  if (!base || !aam) return {false, "no desk baseline/aam rows in " + o.desk_metrics.string()};
  if (base->n != 200 || aam->n != 200) return {false, fmt("arms have %ld and %ld samples", base->n, aam->n)};
  const double rel = base->rate > 0.0 ? (base->rate - aam->rate) / base->rate : 0.0;
  const std::string d =
      fmt("baseline %.1f%% -> aam %.1f%%, relative reduction %.0f%%", 100 * base->rate, 100 * aam->rate, 100 * rel);
  if (base->rate < 0.03) return {false, d + "; baseline below 3%"};
  return {aam->rate < base->rate && rel >= 0.33, d};
}

Outcome frechet_improvement(const Options& o) {
  const auto base = last_row(o.desk_metrics, "baseline"), aam = last_row(o.desk_metrics, "aam");
  if (!base || !aam) return {false, "no desk baseline/aam rows in " + o.desk_metrics.string()};
  return {aam->frechet <= base->frechet, fmt("baseline %.4f, aam %.4f", base->frechet, aam->frechet)};
}

// Desk-shaped network with widened weights so that the temperature changes the output.
Denoiser probe_network() {
  ArchSpec a;
  a.base_channels = 16;
  a.temb_dim = 64;
  Denoiser d(a, 17);
  Rng rng(derive_seed(17, 1));
  std::normal_distribution<float> normal(0.0f, 0.05f);
  auto& w = d.weights();
  for (std::size_t i = 0; i < w.count(); ++i)
    for (float& v : w[static_cast<int>(i)]) v += normal(rng);
  return d;
}

MemoryBank probe_bank(const Denoiser& d, const NoiseSchedule& s) {
  ShapesDatasetSpec spec;
  spec.count = 12;
  spec.seed = 5;
  const ImageBatch imgs = generate_shapes_dataset(spec);
  const std::vector<int> grid{900, 700};
  const StageBounds bounds{920, 600};
  const AugmentedSet set = make_noise_augmented_set(imgs.slice(0, 8), s, predictor_for(d), grid, 1, 3, bounds);
  MemoryBank bank = build_memory_bank(set, DenoiserFeatureExtractor(d), 0.25, 4);
  calibrate(bank, imgs.slice(8, 4), d, s, grid, bounds, 6);
  return bank;
}

Outcome reduction_identity(const Options&) {
  const Denoiser d = probe_network();
  const NoiseSchedule s = build_schedule(1000);
  MemoryBank bank;
  bank.features = FeatureMatrix::Zero(1, DenoiserFeatureExtractor(d).feature_dim());
  bank.calibration_count = 1;
  SamplerConfig c = default_config(1000);
  c.t1 = c.t2 = 600;
  int equal = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ImageBatch a = sample(d, bank, s, c, 1, seed).images;
    const ImageBatch b = baseline_sample(d, s, c.ddim_steps, 1, seed);
    equal += a == b;
  }
  return {equal == 20, fmt("%d/20 seeds bit-identical", equal)};
}

Outcome trace_conformance(const Options&) {
  const Denoiser d = probe_network();
  const NoiseSchedule s = build_schedule(1000);
  const MemoryBank bank = probe_bank(d, s);
  const SamplerConfig c = default_config(1000);
  const std::vector<int> mapped = mapped_perturb_steps(c);
  if (c.perturb_steps != std::vector<int>{921, 881, 841} || mapped != std::vector<int>{920, 880, 840})
    return {false, "unexpected L mapping"};
  const int count = 2;
  const SampleOutput out = sample(d, bank, s, c, count, 11);
  std::vector<int> stage2;
  for (int t : ddim_timesteps(c.T, c.ddim_steps))
    if (t <= c.t1 && t > c.t2) stage2.push_back(t);
  long records = 0, reinits = 0, perturbs = 0, early = 0, updates = 0;
  for (int i = 0; i < count; ++i) {
    const auto parsed = parse_trace(format_trace(out.traces[i], i));
    if (parsed.size() != stage2.size()) return {false, fmt("sample %d has %zu records", i, parsed.size())};
    std::vector<int> perturbed_at;
    for (std::size_t k = 0; k < parsed.size(); ++k) {
      const TraceRecord& r = parsed[k];
      ++records;
      if (r.timestep != stage2[k]) return {false, fmt("sample %d record %zu at t=%d", i, k, r.timestep)};
      if (r.reinitialized != ((c.t1 - r.timestep) % c.reinit_interval == 0))
        return {false, fmt("re-initialization flag wrong at t=%d", r.timestep)};
      if (r.reinitialized && r.tau_history.front() != 0.0) return {false, fmt("tau not reset at t=%d", r.timestep)};
      if (r.iterations > c.max_iterations || r.evaluations > c.max_iterations)
        return {false, fmt("t=%d used %d iterations", r.timestep, r.iterations)};
      if (r.early_stopped != (std::abs(r.last_gradient) < c.grad_threshold))
        return {false, fmt("early-stop flag inconsistent at t=%d", r.timestep)};
      if (!r.early_stopped && r.iterations != c.max_iterations)
        return {false, fmt("t=%d stopped after %d iterations with |g| >= delta", r.timestep, r.iterations)};
      if (r.early_stopped && r.iterations != r.evaluations - 1)
        return {false, fmt("t=%d updated after the stopping gradient", r.timestep)};
      if (r.perturbed) perturbed_at.push_back(r.timestep);
      reinits += r.reinitialized;
      perturbs += r.perturbed;
      early += r.early_stopped;
      updates += r.iterations;
    }
    if (perturbed_at != mapped) return {false, fmt("sample %d perturbed %zu times", i, perturbed_at.size())};
  }
  return {true, fmt("%ld records, %ld re-inits, %ld perturbations, %ld early stops, %ld updates", records, reinits,
                    perturbs, early, updates)};
}

Outcome property_suites(const Options& o) {
  const std::vector<std::pair<std::string, std::string>> suites{
      {"test_attention", "SoftmaxProperty.*:Temperature.ZeroLogitIsExactlyOne"},
      {"test_denoiser", "Denoiser.ZeroLogitMatchesPlainPathBitwise:Checkpoint.RoundTripIsIdentity"},
      {"test_schedule", "PredictX0.InvertsForwardProcess:DdimStep.TenStepChainIsBitIdentical"},
      {"test_sampler", "FdGradient.*:MaskedPerturb.UnmaskedPixelsAreUntouched"},
      {"test_anomaly", "Score.MatchesBruteForceOnHundredRandomSets:Coreset.GreedyBeatsRandomCoverage:"
                       "BankFile.RoundTripIsIdentity"},
      {"test_eval", "Frechet.SelfDistanceIsZero:Frechet.PointMassesGiveSquaredMeanGap"},
  };
  const fs::path log = o.work / "properties.log";
  int ok = 0;
  std::string failed;
  for (const auto& [bin, filter] : suites) {
    if (run("'" + (o.test_dir / bin).string() + "' --gtest_filter='" + filter + "'", log) == 0)
      ++ok;
    else
      failed += " " + bin;
  }
  return {ok == static_cast<int>(suites.size()),
          fmt("%d/%zu suites green", ok, suites.size()) + (failed.empty() ? "" : ";" + failed + " (see " +
                                                                                    log.string() + ")")};
}

Outcome detector_consistency(const Options&) {
  ShapesDatasetSpec spec;
  spec.count = 2000;
  spec.seed = 2024;
  const ImageBatch clean = generate_shapes_dataset(spec);
  int flagged = 0;
  for (int i = 0; i < clean.batch(); ++i) flagged += detect_shape_hallucination(clean.slice(i, 1)).is_hallucinated;
  return {flagged == 0, fmt("%d/2000 clean images flagged", flagged)};
}

bool is_png(const fs::path& p) {
  if (!fs::exists(p)) return false;
  const std::string b = io::read_file(p);
  return b.size() > 8 && b.compare(0, 8, "\x89PNG\r\n\x1a\n") == 0;
}

Outcome smoke_end_to_end(const Options& o) {
  const fs::path dir = o.work / "smoke", log = o.work / "smoke.log";
  fs::remove_all(dir);
  fs::create_directories(dir);
  fs::remove(log);
  const std::string cli = "'" + o.cli.string() + "' ";
  const std::string ckpt = " --checkpoint " + (dir / "train" / "checkpoint.aamd").string();
  const auto start = std::chrono::steady_clock::now();
  const std::vector<std::string> steps{
      "train --profile smoke --out " + (dir / "train").string(),
      "build-bank --profile smoke" + ckpt + " --out " + (dir / "bank").string(),
      "sample --profile smoke --mode baseline" + ckpt + " --out " + (dir / "baseline").string(),
      "sample --profile smoke --mode aam" + ckpt + " --bank " + (dir / "bank" / "bank.aamb").string() + " --out " +
          (dir / "aam").string(),
      "eval --profile smoke --label baseline --generated " + (dir / "baseline").string() + ckpt + " --metrics " +
          (dir / "metrics.csv").string() + " --out " + (dir / "eval_baseline").string(),
      "eval --profile smoke --label aam --generated " + (dir / "aam").string() + ckpt + " --metrics " +
          (dir / "metrics.csv").string() + " --out " + (dir / "eval_aam").string(),
  };
  for (const auto& s : steps)
    if (const int code = run(cli + s, log); code != 0) return {false, "'" + s.substr(0, s.find(' ')) + "' exited " +
                                                                   std::to_string(code)};
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  try {
    const RunConfig c = load_config(dir / "train" / "config.txt");
    const auto loss = split(io::read_file(dir / "train" / "loss.csv"), '\n');
    if (loss.empty() || loss[0] != "step,loss" || static_cast<long>(loss.size()) != c.train.steps + 1)
      return {false, "loss.csv malformed"};
    for (std::size_t i = 1; i < loss.size(); ++i)
      if (!std::isfinite(std::stod(split(loss[i], ',').at(1)))) return {false, "non-finite loss"};
    const Denoiser d = load_checkpoint(dir / "train" / "checkpoint.aamd");
    if (d.arch().descriptor() != c.model.descriptor()) return {false, "checkpoint architecture differs"};
    if (!load_dataset_cache(dir / "train" / "dataset.aams", c.dataset)) return {false, "dataset cache unreadable"};
    const MemoryBank bank = load_bank(dir / "bank" / "bank.aamb");
    if (!bank.calibrated() || bank.dim() != DenoiserFeatureExtractor(d).feature_dim())
      return {false, "bank not calibrated or wrong width"};
    for (const char* arm : {"baseline", "aam"}) {
      const ImageBatch imgs = io::load_images(dir / arm / "samples.aami");
      if (imgs.batch() != c.samples || imgs.height() != c.model.image_size) return {false, std::string(arm) + " samples shape"};
      for (double v : imgs.values())
        if (!std::isfinite(v)) return {false, std::string(arm) + " samples not finite"};
      if (!is_png(dir / arm / "samples.png")) return {false, std::string(arm) + " contact sheet missing"};
      if (!fs::exists(dir / arm / "config.txt")) return {false, std::string(arm) + " snapshot missing"};
      const auto report = nlohmann::json::parse(io::read_file(dir / ("eval_" + std::string(arm)) / "report.json"));
      if (report.at("label") != arm || report.at("n") != c.samples) return {false, "report.json malformed"};
    }
    for (int i = 0; i < c.samples; ++i) {
      const fs::path t = dir / "aam" / "traces" / fmt("sample_%04d.trace", i);
      if (parse_trace(io::read_file(t)).empty()) return {false, t.filename().string() + " empty"};
    }
    const auto rows = split(io::read_file(dir / "metrics.csv"), '\n');
    if (rows.size() != 3 || rows[0] != MetricsReport::csv_header() || rows[1].rfind("baseline,", 0) != 0 ||
        rows[2].rfind("aam,", 0) != 0)
      return {false, "metrics.csv malformed"};
  } catch (const std::exception& e) {
    return {false, std::string("artifact check: ") + e.what()};
  }
  return {secs < 600.0, fmt("%.0f s, artifacts valid", secs)};
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"Acceptance criteria"};
  app.add_option("--desk-metrics", o.desk_metrics, "metrics CSV holding the desk baseline and aam rows")->required();
  app.add_option("--cli", o.cli, "aam executable")->required();
  app.add_option("--test-dir", o.test_dir, "directory holding the unit-test executables")->required();
  app.add_option("--work", o.work, "scratch directory");
  app.add_option("--only", o.only, "criteria to run");
  app.add_option("--known-fail", o.known_fail, "criteria whose failure does not affect the exit status");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(o.work);

  const std::vector<std::pair<std::string, std::function<Outcome(const Options&)>>> criteria{
      {"hallucination reduction at desk scale", hallucination_reduction},
      {"Frechet improvement at desk scale", frechet_improvement},
      {"reduction identity with Stage 2 emptied", reduction_identity},
      {"trace conformance at T=1000 defaults", trace_conformance},
      {"property suites", property_suites},
      {"generator/detector consistency", detector_consistency},
      {"smoke end-to-end", smoke_end_to_end},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!o.only.empty() && std::find(o.only.begin(), o.only.end(), id) == o.only.end()) continue;
    Outcome r;
    try {
      r = criteria[i].second(o);
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    const bool known = std::find(o.known_fail.begin(), o.known_fail.end(), id) != o.known_fail.end();
    failures += !r.pass && !known;
    std::printf("criterion %d %s: %s (%s)%s\n", id, r.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                r.detail.c_str(), !r.pass && known ? " [known failure]" : "");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
