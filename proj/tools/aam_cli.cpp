#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "aam/config.hpp"
#include "aam/error.hpp"
#include "aam/eval.hpp"
#include "aam/io.hpp"
#include "aam/rng.hpp"
#include "aam/shapes.hpp"
#include "aam/sampler.hpp"
#include "aam/trainer.hpp"

namespace fs = std::filesystem;
using namespace aam;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string profile;
  std::vector<std::string> overrides;
  long long seed = -1;
  int threads = 0;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "key=value configuration file");
  cmd->add_option("--profile", a.profile, "built-in profile (smoke, desk)");
  cmd->add_option("--set", a.overrides, "override, e.g. --set sampler.N=5");
  cmd->add_option("--seed", a.seed, "global seed");
  cmd->add_option("--threads", a.threads, "worker threads");
  cmd->add_option("--out", a.out, "output directory");
}

RunConfig resolve(const CommonArgs& a) {
  std::string text;
  if (!a.profile.empty()) text += "profile=" + a.profile + "\n";
  if (!a.config_path.empty()) text += io::read_file(a.config_path) + "\n";
  for (const auto& o : a.overrides) {
    if (o.find('=') == std::string::npos) throw ConfigError("--set: expected key=value, got '" + o + "'");
    text += o + "\n";
  }
  if (a.seed >= 0) text += "seed=" + std::to_string(a.seed) + "\n";
  if (a.threads > 0) text += "threads=" + std::to_string(a.threads) + "\n";
  return parse_config(text);
}

fs::path out_dir(const CommonArgs& a, const std::string& verb) {
  fs::path dir;
  if (!a.out.empty())
    dir = a.out;
  else if (const char* root = std::getenv("AAM_ARTIFACT_DIR"))
    dir = fs::path(root) / verb;
  else
    dir = fs::path("artifacts") / verb;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

std::string config_hash(const RunConfig& c) { return fnv1a_hex(c.to_text()); }

void write_snapshot(const fs::path& dir, const RunConfig& c) { io::write_file_atomic(dir / "config.txt", c.to_text()); }

ImageBatch load_dataset(const RunConfig& c, const fs::path& dir) {
  const fs::path cache = dir / "dataset.aams";
  if (auto hit = load_dataset_cache(cache, c.dataset)) return *hit;
  ImageBatch images = generate_shapes_dataset(c.dataset);
  save_dataset_cache(cache, c.dataset, images);
  return images;
}

int cmd_train(const CommonArgs& a, long snapshot_every) {
  const RunConfig c = resolve(a);
  const fs::path dir = out_dir(a, "train");
  write_snapshot(dir, c);
  const ImageBatch data = load_dataset(c, dir);
  const NoiseSchedule schedule = build_schedule(c.schedule);
  Denoiser init(c.model, c.train.seed);
  std::ostringstream loss_csv;
  loss_csv << "step,loss\n";
  const auto start = std::chrono::steady_clock::now();
  double window = 0.0;
  auto progress = [&](long step, double loss) {
    loss_csv << step << ',' << loss << '\n';
    window += loss;
    if ((step + 1) % 100 == 0 || step + 1 == c.train.steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      const long n = (step + 1) % 100 == 0 ? 100 : (step + 1) % 100;
      std::printf("step %ld/%ld loss %.5f (%.0fs)\n", step + 1, c.train.steps, window / n, secs);
      std::fflush(stdout);
      window = 0.0;
    }
  };
  TrainSnapshot snap;
  snap.every = snapshot_every;
  snap.callback = [&](long step, const Denoiser& w) {
    fs::create_directories(dir / "snapshots");
    save_checkpoint(dir / "snapshots" / ("step" + std::to_string(step) + ".aamd"), w);
    io::write_file_atomic(dir / "loss.csv", loss_csv.str());
  };
  TrainResult r = train(data, c.train, schedule, std::move(init), progress, snap);
  save_checkpoint(dir / "checkpoint.aamd", r.params);
  io::write_file_atomic(dir / "loss.csv", loss_csv.str());
  std::printf("checkpoint %s\nconfig_hash %s\n", (dir / "checkpoint.aamd").string().c_str(),
              config_hash(c).c_str());
  return 0;
}

fs::path default_input(const std::string& given, const std::string& verb, const std::string& file) {
  if (!given.empty()) return given;
  const char* root = std::getenv("AAM_ARTIFACT_DIR");
  return (root ? fs::path(root) : fs::path("artifacts")) / verb / file;
}

Denoiser checkpoint_for(const RunConfig& c, const fs::path& path) {
  Denoiser d = load_checkpoint(path);
  if (d.arch().descriptor() != c.model.descriptor())
    throw ConfigError("checkpoint " + path.string() + " architecture '" + d.arch().descriptor() +
                      "' does not match model.* settings '" + c.model.descriptor() + "'");
  return d;
}

int cmd_build_bank(const CommonArgs& a, const std::string& checkpoint) {
  const RunConfig c = resolve(a);
  const fs::path dir = out_dir(a, "bank");
  write_snapshot(dir, c);
  const Denoiser params = checkpoint_for(c, default_input(checkpoint, "train", "checkpoint.aamd"));
  const ImageBatch data = load_dataset(c, dir);
  const int n_source = std::min(c.bank.source_images, data.batch());
  const int n_holdout = static_cast<int>(std::ceil(c.bank.holdout_fraction * n_source));
  if (n_holdout < 1 || n_source + n_holdout > data.batch())
    throw ConfigError("bank.holdout_fraction: no training images left for the holdout split");
  const NoiseSchedule schedule = build_schedule(c.schedule);
  const StageBounds bounds{c.sampler.t1, c.sampler.t2};
  const ImageBatch source = data.slice(0, n_source);
  const ImageBatch holdout = data.slice(n_source, n_holdout);

  auto start = std::chrono::steady_clock::now();
  AugmentedSet aug = make_noise_augmented_set(source, schedule, predictor_for(params), c.bank.t_grid,
                                              c.bank.per_image, derive_seed(c.seed, 1), bounds, c.bank.target);
  AugmentedSet held = make_noise_augmented_set(holdout, schedule, predictor_for(params), c.bank.t_grid, 1,
                                               derive_seed(c.seed, 2), bounds, c.bank.target);
  AugmentedSet calib;
  calib.images = held.images.slice(n_holdout, held.images.batch() - n_holdout);
  calib.timesteps.assign(held.timesteps.begin() + n_holdout, held.timesteps.end());
  for (auto* s : {&aug, &calib})
    for (int& t : s->timesteps) t = c.sampler.feature_t(t);

  const DenoiserFeatureExtractor extractor(params);
  MemoryBank bank = build_memory_bank(aug, extractor, c.bank.coreset_fraction, derive_seed(c.seed, 3));
  calibrate(bank, calib, extractor, c.sampler.aggregation);
  save_bank(dir / "bank.aamb", bank);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("bank %s\nrows %ld dim %d from %d augmented images (%.0fs)\n", (dir / "bank.aamb").string().c_str(),
              static_cast<long>(bank.features.rows()), bank.dim(), aug.images.batch(), secs);
  std::printf("mu_s %.6f\nsigma_s %.6f\nbeta %.6f\n", bank.mu, bank.sigma, bank.threshold(c.sampler.beta_multiplier));
  return 0;
}

void write_arm(const fs::path& dir, const ImageBatch& images) {
  fs::create_directories(dir);
  io::save_images(dir / "samples.aami", images);
  io::write_contact_sheet(dir / "samples.png", images, 8, 8);
}

int cmd_sample(const CommonArgs& a, const std::string& mode, const std::string& checkpoint,
               const std::string& bank_path) {
  const RunConfig c = resolve(a);
  if (mode != "baseline" && mode != "aam" && mode != "sweep")
    throw ConfigError("--mode: expected baseline, aam or sweep, got '" + mode + "'");
  if (mode == "aam" && !fs::exists(default_input(bank_path, "bank", "bank.aamb")))
    throw ConfigError("--bank: aam mode needs a memory bank (" + default_input(bank_path, "bank", "bank.aamb").string() +
                      " not found)");
  const Denoiser params = checkpoint_for(c, default_input(checkpoint, "train", "checkpoint.aamd"));
  const NoiseSchedule schedule = build_schedule(c.schedule);
  const fs::path dir = out_dir(a, "sample-" + mode);
  auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  RunConfig snapshot = c;
  if (mode == "baseline") {
    write_snapshot(dir, snapshot);
    write_arm(dir, baseline_sample(params, schedule, c.sampler.ddim_steps, c.samples, c.seed, c.threads,
                                   c.sampler.x0_clip));
  } else if (mode == "aam") {
    const MemoryBank bank = load_bank(default_input(bank_path, "bank", "bank.aamb"));
    write_snapshot(dir, snapshot);
    int finished = 0;
    SampleOutput out = sample(params, bank, schedule, c.sampler, c.samples, c.seed, c.threads, [&](int) {
      if (++finished % 10 == 0 || finished == c.samples) {
        std::printf("aam %d/%d (%.0fs)\n", finished, c.samples, elapsed());
        std::fflush(stdout);
      }
    });
    write_arm(dir, out.images);
    fs::create_directories(dir / "traces");
    long iterations = 0, records = 0, perturbed = 0;
    for (std::size_t i = 0; i < out.traces.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "sample_%04zu.trace", i);
      write_trace(dir / "traces" / name, out.traces[i], static_cast<int>(i));
      for (const auto& r : out.traces[i].trace) {
        iterations += r.iterations;
        perturbed += r.perturbed;
        ++records;
      }
    }
    std::printf("stage-2 records %ld, mean iterations %.2f, perturbations %ld\n", records,
                records ? static_cast<double>(iterations) / records : 0.0, perturbed);
  } else {
    if (c.sweep.empty()) throw ConfigError("sweep.settings: sweep mode needs at least one temperature setting");
    write_snapshot(dir, snapshot);
    for (std::size_t k = 0; k < c.sweep.size(); ++k) {
      const fs::path sub = dir / ("setting_" + std::to_string(k));
      write_arm(sub, fixed_temperature_sample(params, schedule, c.sampler.ddim_steps, c.sweep[k], c.samples, c.seed,
                                              c.threads, c.sampler.x0_clip));
      io::write_file_atomic(sub / "temperatures.txt", format_temperatures(c.sweep[k]) + "\n");
      std::printf("setting %zu: %s\n", k, format_temperatures(c.sweep[k]).c_str());
    }
  }
  std::printf("%s samples %d -> %s (%.0fs)\n", mode.c_str(), c.samples, dir.string().c_str(), elapsed());
  return 0;
}

ImageBatch load_generated(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "samples.aami" : path;
  if (fs::is_directory(path) && !fs::exists(file))
    throw ConfigError("generated directory " + path.string() + " holds no samples.aami");
  ImageBatch images = io::load_images(file);
  if (images.batch() == 0) throw ConfigError("generated set " + file.string() + " is empty");
  return images;
}

ImageBatch reference_set(const RunConfig& c, const std::string& reference) {
  if (!reference.empty()) {
    ImageBatch r = fs::is_directory(reference) ? io::load_images(fs::path(reference) / "samples.aami")
                                               : io::load_images(reference);
    if (r.batch() == 0) throw ConfigError("reference set " + reference + " is empty");
    return r;
  }
  ShapesDatasetSpec spec = c.dataset;
  spec.count = c.eval.reference_count;
  spec.seed = c.eval.reference_seed;
  return generate_shapes_dataset(spec);
}

std::string metrics_hash(const RunConfig& c) { return fnv1a_hex(c.sampler.fingerprint_text()); }

MetricsReport run_eval(const RunConfig& c, const Denoiser& params, const ImageBatch& generated,
                       const ImageBatch& reference, const std::string& label, const fs::path& csv) {
  MetricsReport r = evaluate_arm(generated, reference, params, label, c.eval.detector, metrics_hash(c));
  append_metrics_csv(csv, r);
  std::printf("%s\n", r.to_json().c_str());
  std::printf("%s: %ld/%ld hallucinated (%.1f%%), frechet %.4f\n", label.c_str(), r.hallucinated, r.sample_count,
              100.0 * r.hallucination_rate, r.frechet);
  return r;
}

int cmd_eval(const CommonArgs& a, const std::string& generated, const std::string& reference,
             const std::string& checkpoint, std::string label, const std::string& metrics) {
  const RunConfig c = resolve(a);
  if (generated.empty()) throw ConfigError("--generated: path to a sample directory is required");
  const ImageBatch gen = load_generated(generated);
  const ImageBatch ref = reference_set(c, reference);
  const Denoiser params = checkpoint_for(c, default_input(checkpoint, "train", "checkpoint.aamd"));
  const fs::path dir = out_dir(a, "eval");
  write_snapshot(dir, c);
  if (label.empty()) label = fs::path(generated).filename().string();
  const MetricsReport r = run_eval(c, params, gen, ref, label, metrics.empty() ? dir / "metrics.csv" : fs::path(metrics));
  io::write_file_atomic(dir / "report.json", r.to_json() + "\n");
  return 0;
}

int cmd_sweep_report(const CommonArgs& a, const std::string& generated, const std::string& reference,
                     const std::string& checkpoint) {
  const RunConfig c = resolve(a);
  const fs::path root = generated.empty() ? default_input("", "sample-sweep", "") : fs::path(generated);
  std::vector<fs::path> settings;
  for (int k = 0; fs::exists(root / ("setting_" + std::to_string(k))); ++k)
    settings.push_back(root / ("setting_" + std::to_string(k)));
  if (settings.empty()) throw ConfigError("sweep-report: no setting_* directories under " + root.string());
  const Denoiser params = checkpoint_for(c, default_input(checkpoint, "train", "checkpoint.aamd"));
  const ImageBatch ref = reference_set(c, reference);
  const fs::path dir = out_dir(a, "sweep-report");
  write_snapshot(dir, c);
  std::string table = "setting,temperatures,n,hal_rate,frechet\n";
  for (std::size_t k = 0; k < settings.size(); ++k) {
    std::string temps = io::read_file(settings[k] / "temperatures.txt");
    while (!temps.empty() && (temps.back() == '\n' || temps.back() == '\r')) temps.pop_back();
    const MetricsReport r =
        run_eval(c, params, load_generated(settings[k]), ref, "sweep:" + temps, dir / "metrics.csv");
    char row[256];
    std::snprintf(row, sizeof row, "%zu,\"%s\",%ld,%.6f,%.6f\n", k, temps.c_str(), r.sample_count,
                  r.hallucination_rate, r.frechet);
    table += row;
  }
  io::write_file_atomic(dir / "sweep_report.csv", table);
  std::printf("report %s\n", (dir / "sweep_report.csv").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive attention modulation for a small diffusion model"};
  app.require_subcommand(1);

  CommonArgs train_args;
  long snapshot_every = 0;
  auto* train_cmd = app.add_subcommand("train", "train the denoiser");
  add_common(train_cmd, train_args);
  train_cmd->add_option("--snapshot-every", snapshot_every, "also save EMA weights every N steps");

  CommonArgs bank_args;
  std::string bank_checkpoint;
  auto* bank_cmd = app.add_subcommand("build-bank", "build and calibrate the anomaly memory bank");
  add_common(bank_cmd, bank_args);
  bank_cmd->add_option("--checkpoint", bank_checkpoint, "denoiser checkpoint");

  CommonArgs sample_args;
  std::string mode = "baseline", sample_checkpoint, sample_bank;
  auto* sample_cmd = app.add_subcommand("sample", "generate images");
  add_common(sample_cmd, sample_args);
  sample_cmd->add_option("--mode", mode, "baseline, aam or sweep");
  sample_cmd->add_option("--checkpoint", sample_checkpoint, "denoiser checkpoint");
  sample_cmd->add_option("--bank", sample_bank, "memory bank (aam mode)");

  CommonArgs eval_args;
  std::string generated, reference, eval_checkpoint, label, metrics;
  auto* eval_cmd = app.add_subcommand("eval", "score a generated set");
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--generated", generated, "sample directory or .aami file");
  eval_cmd->add_option("--reference", reference, "reference .aami (default: fresh Shapes set)");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "denoiser checkpoint (feature backbone)");
  eval_cmd->add_option("--label", label, "arm label");
  eval_cmd->add_option("--metrics", metrics, "CSV file to append to");

  CommonArgs report_args;
  std::string report_generated, report_reference, report_checkpoint;
  auto* report_cmd = app.add_subcommand("sweep-report", "evaluate every setting of a sweep run");
  add_common(report_cmd, report_args);
  report_cmd->add_option("--generated", report_generated, "sweep output directory");
  report_cmd->add_option("--reference", report_reference, "reference .aami");
  report_cmd->add_option("--checkpoint", report_checkpoint, "denoiser checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) return cmd_train(train_args, snapshot_every);
    if (*bank_cmd) return cmd_build_bank(bank_args, bank_checkpoint);
    if (*sample_cmd) return cmd_sample(sample_args, mode, sample_checkpoint, sample_bank);
    if (*eval_cmd) return cmd_eval(eval_args, generated, reference, eval_checkpoint, label, metrics);
    if (*report_cmd) return cmd_sweep_report(report_args, report_generated, report_reference, report_checkpoint);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e);
  }
  return 0;
}
