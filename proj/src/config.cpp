#include "aam/config.hpp"

#include <charconv>
#include <sstream>

#include "aam/io.hpp"

namespace aam {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<int> to_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(static_cast<int>(to_int(key, item)));
  }
  return out;
}

std::string ints(const std::vector<int>& v) {
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

std::string format_temperatures(const AttentionTemperature& t) {
  std::string s;
  for (auto& [res, tau] : t.per_resolution) s += (s.empty() ? "" : ",") + std::to_string(res) + ":" + num(tau);
  return s.empty() ? "default" : s;
}

AttentionTemperature parse_temperatures(const std::string& text) {
  AttentionTemperature t;
  if (trim(text) == "default") return t;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("sweep.settings: expected resolution:tau, got '" + item + "'");
    const int res = static_cast<int>(to_int("sweep.settings", trim(item.substr(0, colon))));
    const double tau = to_double("sweep.settings", trim(item.substr(colon + 1)));
    if (!(tau > 0.0)) throw ConfigError("sweep.settings: temperatures must be > 0");
    t.per_resolution[res] = tau;
  }
  return t;
}

RunConfig profile_config(const std::string& name) {
  RunConfig c;
  c.profile = name;
  if (name == "desk") {
    c.dataset.count = 5000;
    c.dataset.image_size = 32;
    c.schedule.T = 1000;
    c.train.T = 1000;
    c.train.steps = 8000;
    c.train.batch_size = 16;
    c.train.learning_rate = 5e-4;
    c.sampler = default_config(1000);
    c.samples = 200;
    return c;
  }
  if (name == "smoke") {
    c.dataset.count = 500;
    c.dataset.image_size = 8;
    c.dataset.min_area = 1;
    c.model.image_size = 8;
    c.model.base_channels = 16;
    c.model.temb_dim = 64;
    c.model.attention_resolutions = {8, 4, 2};
    c.schedule.T = 100;
    c.train.T = 100;
    c.train.steps = 200;
    c.train.batch_size = 8;
    c.train.learning_rate = 1e-3;
    c.train.ema_decay = 0.99;
    c.bank.source_images = 40;
    c.bank.t_grid = {90, 75, 60};
    c.bank.coreset_fraction = 0.25;
    c.bank.holdout_fraction = 0.25;
    c.sampler = default_config(100);
    c.sampler.ddim_steps = 50;
    c.sampler.modulated_resolutions = {8, 4, 2};
    c.eval.detector.min_area = 1;
    c.eval.reference_count = 100;
    c.samples = 20;
    c.sweep = {parse_temperatures("8:1"), parse_temperatures("8:0.1,4:0.1"), parse_temperatures("8:10,4:10")};
    return c;
  }
  throw ConfigError("profile: unknown profile '" + name + "' (expected smoke or desk)");
}

void apply_override(RunConfig& c, const std::string& key, const std::string& v) {
  // run
  if (key == "seed") c.seed = to_u64(key, v);
  else if (key == "threads") c.threads = static_cast<int>(to_int(key, v));
  else if (key == "samples") c.samples = static_cast<int>(to_int(key, v));
  // dataset
  else if (key == "dataset.count") c.dataset.count = static_cast<int>(to_int(key, v));
  else if (key == "dataset.image_size") c.dataset.image_size = static_cast<int>(to_int(key, v));
  else if (key == "dataset.shape_probability") c.dataset.shape_probability = to_double(key, v);
  else if (key == "dataset.seed") c.dataset.seed = to_u64(key, v);
  else if (key == "dataset.min_area") c.dataset.min_area = static_cast<int>(to_int(key, v));
  // model
  else if (key == "model.image_size") c.model.image_size = static_cast<int>(to_int(key, v));
  else if (key == "model.base_channels") c.model.base_channels = static_cast<int>(to_int(key, v));
  else if (key == "model.channel_mult") c.model.channel_mult = to_ints(key, v);
  else if (key == "model.attention_resolutions") c.model.attention_resolutions = to_ints(key, v);
  else if (key == "model.groups") c.model.groups = static_cast<int>(to_int(key, v));
  else if (key == "model.temb_dim") c.model.temb_dim = static_cast<int>(to_int(key, v));
  else if (key == "model.feature_taps") c.model.feature_taps = to_ints(key, v);
  // schedule
  else if (key == "schedule.kind") c.schedule.kind = parse_schedule_kind(v);
  else if (key == "schedule.T") c.schedule.T = static_cast<int>(to_int(key, v));
  else if (key == "schedule.beta_min") c.schedule.beta_min = to_double(key, v);
  else if (key == "schedule.beta_max") c.schedule.beta_max = to_double(key, v);
  // train
  else if (key == "train.steps") c.train.steps = to_int(key, v);
  else if (key == "train.batch_size") c.train.batch_size = static_cast<int>(to_int(key, v));
  else if (key == "train.learning_rate") c.train.learning_rate = to_double(key, v);
  else if (key == "train.T") c.train.T = static_cast<int>(to_int(key, v));
  else if (key == "train.ema") c.train.ema = to_bool(key, v);
  else if (key == "train.ema_decay") c.train.ema_decay = to_double(key, v);
  else if (key == "train.grad_clip") c.train.grad_clip = to_double(key, v);
  else if (key == "train.seed") c.train.seed = to_u64(key, v);
  // bank
  else if (key == "bank.source_images") c.bank.source_images = static_cast<int>(to_int(key, v));
  else if (key == "bank.t_grid") c.bank.t_grid = to_ints(key, v);
  else if (key == "bank.per_image") c.bank.per_image = static_cast<int>(to_int(key, v));
  else if (key == "bank.coreset_fraction") c.bank.coreset_fraction = to_double(key, v);
  else if (key == "bank.holdout_fraction") c.bank.holdout_fraction = to_double(key, v);
  else if (key == "bank.target") {
    if (v == "x0_prediction") c.bank.target = AugmentationTarget::x0_prediction;
    else if (v == "noisy_input") c.bank.target = AugmentationTarget::noisy_input;
    else throw ConfigError(key + ": expected x0_prediction or noisy_input");
  }
  // sampler
  else if (key == "sampler.T") c.sampler.T = static_cast<int>(to_int(key, v));
  else if (key == "sampler.T1") c.sampler.t1 = static_cast<int>(to_int(key, v));
  else if (key == "sampler.T2") c.sampler.t2 = static_cast<int>(to_int(key, v));
  else if (key == "sampler.N") c.sampler.max_iterations = static_cast<int>(to_int(key, v));
  else if (key == "sampler.eta") c.sampler.learning_rate = to_double(key, v);
  else if (key == "sampler.delta") c.sampler.grad_threshold = to_double(key, v);
  else if (key == "sampler.lambda") c.sampler.reinit_interval = static_cast<int>(to_int(key, v));
  else if (key == "sampler.L") c.sampler.perturb_steps = to_ints(key, v);
  else if (key == "sampler.gamma") c.sampler.gamma = to_double(key, v);
  else if (key == "sampler.beta_multiplier") c.sampler.beta_multiplier = to_double(key, v);
  else if (key == "sampler.ddim_steps") c.sampler.ddim_steps = static_cast<int>(to_int(key, v));
  else if (key == "sampler.modulated_resolutions") c.sampler.modulated_resolutions = to_ints(key, v);
  else if (key == "sampler.seed") c.sampler.seed = to_u64(key, v);
  else if (key == "sampler.fd_step") c.sampler.fd_step = to_double(key, v);
  else if (key == "sampler.x0_clip") c.sampler.x0_clip = to_double(key, v);
  else if (key == "sampler.optimizer") {
    if (v == "adam") c.sampler.optimizer = TauOptimizer::adam;
    else if (v == "sgd") c.sampler.optimizer = TauOptimizer::sgd;
    else throw ConfigError(key + ": expected adam or sgd");
  } else if (key == "sampler.feature_timestep") {
    if (v == "current") c.sampler.feature_timestep = FeatureTimestep::current;
    else if (v == "zero") c.sampler.feature_timestep = FeatureTimestep::zero;
    else throw ConfigError(key + ": expected current or zero");
  } else if (key == "sampler.aggregation") {
    if (v == "max") c.sampler.aggregation = ScoreAggregation::max;
    else if (v == "mean") c.sampler.aggregation = ScoreAggregation::mean;
    else throw ConfigError(key + ": expected max or mean");
  }
  // eval
  else if (key == "eval.threshold") c.eval.detector.threshold = to_double(key, v);
  else if (key == "eval.min_area") c.eval.detector.min_area = static_cast<int>(to_int(key, v));
  else if (key == "eval.reference_count") c.eval.reference_count = static_cast<int>(to_int(key, v));
  else if (key == "eval.reference_seed") c.eval.reference_seed = to_u64(key, v);
  // sweep
  else if (key == "sweep.settings") {
    c.sweep.clear();
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ';'))
      if (!trim(item).empty()) c.sweep.push_back(parse_temperatures(trim(item)));
  } else
    throw ConfigError("unknown configuration key '" + key + "'");
}

RunConfig parse_config(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::string profile = "desk";
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "profile")
      profile = value;
    else
      entries.emplace_back(key, value);
  }
  RunConfig c = profile_config(profile);
  for (auto& [k, v] : entries) apply_override(c, k, v);
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) { return parse_config(io::read_file(path)); }

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads: must be >= 1");
  if (samples < 1) throw ConfigError("samples: must be >= 1");
  dataset.validate();
  model.validate();
  train.validate();
  sampler.validate();
  if (dataset.image_size != model.image_size)
    throw ConfigError("model.image_size: must equal dataset.image_size");
  if (schedule.T != train.T) throw ConfigError("train.T: must equal schedule.T");
  if (schedule.T != sampler.T) throw ConfigError("sampler.T: must equal schedule.T");
  if (bank.source_images < 1) throw ConfigError("bank.source_images: must be positive");
  if (!(bank.coreset_fraction > 0.0 && bank.coreset_fraction <= 1.0))
    throw ConfigError("bank.coreset_fraction: must lie in (0, 1]");
  if (!(bank.holdout_fraction > 0.0 && bank.holdout_fraction < 1.0))
    throw ConfigError("bank.holdout_fraction: must lie in (0, 1)");
  for (int r : sampler.modulated_resolutions) {
    bool found = false;
    for (int a : model.attention_resolutions) found = found || a == r;
    if (!found)
      throw ConfigError("sampler.modulated_resolutions: " + std::to_string(r) + " has no attention block");
  }
  if (eval.detector.min_area < 1) throw ConfigError("eval.min_area: must be >= 1");
  if (eval.reference_count < 2) throw ConfigError("eval.reference_count: must be >= 2");
}

std::string RunConfig::to_text() const {
  std::ostringstream s;
  s << "# resolved configuration\n";
  s << "profile=" << profile << "\n";
  s << "seed=" << seed << "\nthreads=" << threads << "\nsamples=" << samples << "\n";
  s << "dataset.count=" << dataset.count << "\ndataset.image_size=" << dataset.image_size
    << "\ndataset.shape_probability=" << num(dataset.shape_probability) << "\ndataset.seed=" << dataset.seed
    << "\ndataset.min_area=" << dataset.min_area << "\n";
  s << "model.image_size=" << model.image_size << "\nmodel.base_channels=" << model.base_channels
    << "\nmodel.channel_mult=" << ints(model.channel_mult)
    << "\nmodel.attention_resolutions=" << ints(model.attention_resolutions) << "\nmodel.groups=" << model.groups
    << "\nmodel.temb_dim=" << model.temb_dim << "\nmodel.feature_taps=" << ints(model.feature_taps) << "\n";
  s << "schedule.kind=" << to_string(schedule.kind) << "\nschedule.T=" << schedule.T
    << "\nschedule.beta_min=" << num(schedule.beta_min) << "\nschedule.beta_max=" << num(schedule.beta_max) << "\n";
  s << "train.steps=" << train.steps << "\ntrain.batch_size=" << train.batch_size
    << "\ntrain.learning_rate=" << num(train.learning_rate) << "\ntrain.T=" << train.T
    << "\ntrain.ema=" << (train.ema ? "true" : "false") << "\ntrain.ema_decay=" << num(train.ema_decay)
    << "\ntrain.grad_clip=" << num(train.grad_clip) << "\ntrain.seed=" << train.seed << "\n";
  s << "bank.source_images=" << bank.source_images << "\nbank.t_grid=" << ints(bank.t_grid)
    << "\nbank.per_image=" << bank.per_image << "\nbank.coreset_fraction=" << num(bank.coreset_fraction)
    << "\nbank.holdout_fraction=" << num(bank.holdout_fraction)
    << "\nbank.target=" << (bank.target == AugmentationTarget::x0_prediction ? "x0_prediction" : "noisy_input") << "\n";
  s << sampler.fingerprint_text();
  s << "eval.threshold=" << num(eval.detector.threshold) << "\neval.min_area=" << eval.detector.min_area
    << "\neval.reference_count=" << eval.reference_count << "\neval.reference_seed=" << eval.reference_seed << "\n";
  std::string sweep_text;
  for (std::size_t i = 0; i < sweep.size(); ++i) sweep_text += (i ? ";" : "") + format_temperatures(sweep[i]);
  s << "sweep.settings=" << sweep_text << "\n";
  return s.str();
}

NoiseSchedule build_schedule(const ScheduleConfig& c) { return build_schedule(c.T, c.kind, c.beta_min, c.beta_max); }

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace aam
