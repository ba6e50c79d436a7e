#include "aam/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "aam/io.hpp"

namespace aam {

namespace {

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoi(item));
  return out;
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

int encoder_block_count(const ArchSpec& a) {
  const auto ladder = a.resolution_ladder();
  int count = 1;
  for (std::size_t l = 0; l < ladder.size(); ++l) {
    count += 1;
    if (contains(a.attention_resolutions, ladder[l])) count += 1;
    if (l + 1 < ladder.size()) count += 1;
  }
  return count;
}

}  // namespace

std::vector<int> ArchSpec::resolution_ladder() const {
  std::vector<int> r;
  for (std::size_t l = 0; l < channel_mult.size(); ++l) r.push_back(image_size >> l);
  return r;
}

std::string ArchSpec::descriptor() const {
  std::ostringstream s;
  s << "image_size=" << image_size << ";in_channels=" << in_channels << ";base_channels=" << base_channels
    << ";channel_mult=" << join(channel_mult) << ";attention_resolutions=" << join(attention_resolutions)
    << ";groups=" << groups << ";temb_dim=" << temb_dim << ";feature_taps=" << join(feature_taps);
  return s.str();
}

ArchSpec ArchSpec::parse_descriptor(const std::string& text) {
  ArchSpec a;
  std::stringstream ss(text);
  std::string field;
  while (std::getline(ss, field, ';')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw IoError("architecture descriptor: malformed field '" + field + "'");
    const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
    if (key == "image_size") a.image_size = std::stoi(val);
    else if (key == "in_channels") a.in_channels = std::stoi(val);
    else if (key == "base_channels") a.base_channels = std::stoi(val);
    else if (key == "channel_mult") a.channel_mult = split_ints(val);
    else if (key == "attention_resolutions") a.attention_resolutions = split_ints(val);
    else if (key == "groups") a.groups = std::stoi(val);
    else if (key == "temb_dim") a.temb_dim = std::stoi(val);
    else if (key == "feature_taps") a.feature_taps = split_ints(val);
    else throw IoError("architecture descriptor: unknown field '" + key + "'");
  }
  a.validate();
  return a;
}

void ArchSpec::validate() const {
  if (!is_power_of_two(image_size) || image_size < 8)
    throw ConfigError("model.image_size: must be a power of two >= 8");
  if (in_channels < 1) throw ConfigError("model.in_channels: must be positive");
  if (base_channels < 2 || base_channels % 2 != 0) throw ConfigError("model.base_channels: must be even and >= 2");
  if (channel_mult.empty()) throw ConfigError("model.channel_mult: must not be empty");
  if ((image_size >> (channel_mult.size() - 1)) < 1) throw ConfigError("model.channel_mult: too many levels");
  for (int m : channel_mult)
    if (m < 1 || (base_channels * m) % groups != 0)
      throw ConfigError("model.channel_mult: channels must be positive multiples of model.groups");
  if (temb_dim < 1) throw ConfigError("model.temb_dim: must be positive");
  const auto ladder = resolution_ladder();
  for (int r : attention_resolutions)
    if (!contains(ladder, r))
      throw ConfigError("model.attention_resolutions: " + std::to_string(r) + " is not in the resolution ladder");
  const int blocks = encoder_block_count(*this);
  if (feature_taps.empty()) throw ConfigError("model.feature_taps: must not be empty");
  for (int t : feature_taps)
    if (t < 0 || t >= blocks)
      throw ConfigError("model.feature_taps: index " + std::to_string(t) + " outside encoder [0, " +
                        std::to_string(blocks) + ")");
}

AttentionTemperature TemperatureControl::resolve() const {
  AttentionTemperature out;
  const double t = tau();
  for (int r : modulated_resolutions) out.per_resolution[r] = t;
  return out;
}

Tensor sinusoidal_embedding(std::span<const int> timesteps, int dim) {
  const int half = dim / 2;
  Tensor e(static_cast<int>(timesteps.size()), dim, 1, 1);
  for (std::size_t n = 0; n < timesteps.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = timesteps[n] * freq;
      e.at(static_cast<int>(n), i, 0, 0) = static_cast<float>(std::sin(arg));
      e.at(static_cast<int>(n), half + i, 0, 0) = static_cast<float>(std::cos(arg));
    }
  }
  return e;
}

ResBlock ResBlock::create(nn::ParamStore& store, const std::string& name, int in, int out, int temb_dim, int groups,
                          Rng& rng) {
  ResBlock b;
  b.in = in;
  b.out = out;
  b.norm1 = nn::GroupNorm::create(store, name + ".norm1", in, groups);
  b.conv1 = nn::Conv2d::create(store, name + ".conv1", in, out, 3, 1, rng);
  b.temb_proj = nn::Linear::create(store, name + ".temb", temb_dim, out, rng);
  b.norm2 = nn::GroupNorm::create(store, name + ".norm2", out, groups);
  b.conv2 = nn::Conv2d::create(store, name + ".conv2", out, out, 3, 1, rng, /*zero_init=*/true);
  b.has_skip = in != out;
  if (b.has_skip) b.skip = nn::Conv2d::create(store, name + ".skip", in, out, 1, 1, rng);
  return b;
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& temb_act, const nn::ParamStore& p, Cache* cache) const {
  Tensor n1 = norm1.forward(x, p);
  Tensor s1 = nn::silu(n1);
  Tensor h = conv1.forward(s1, p);
  Tensor e = temb_proj.forward(temb_act, p);
  for (int n = 0; n < h.batch(); ++n)
    for (int c = 0; c < out; ++c) {
      float* d = h.channel_ptr(n, c);
      const float add = e.at(n, c, 0, 0);
      for (int i = 0; i < h.plane(); ++i) d[i] += add;
    }
  Tensor n2 = norm2.forward(h, p);
  Tensor s2 = nn::silu(n2);
  Tensor y = conv2.forward(s2, p);
  if (has_skip)
    nn::add_inplace(y, skip.forward(x, p));
  else
    nn::add_inplace(y, x);
  if (cache) *cache = Cache{std::move(n1), std::move(s1), std::move(h), std::move(n2), std::move(s2)};
  return y;
}

Tensor ResBlock::backward(const Tensor& x, const Tensor& dy, const Tensor& temb_act, const Cache& cache,
                          const nn::ParamStore& p, nn::ParamStore& g, Tensor& d_temb_act) const {
  Tensor ds2 = conv2.backward(cache.s2, dy, p, g);
  Tensor dn2 = nn::silu_backward(cache.n2, ds2);
  Tensor dh = norm2.backward(cache.h, dn2, p, g);
  Tensor de(dh.batch(), out, 1, 1);
  for (int n = 0; n < dh.batch(); ++n)
    for (int c = 0; c < out; ++c) {
      const float* d = dh.channel_ptr(n, c);
      double s = 0.0;
      for (int i = 0; i < dh.plane(); ++i) s += d[i];
      de.at(n, c, 0, 0) = static_cast<float>(s);
    }
  nn::add_inplace(d_temb_act, temb_proj.backward(temb_act, de, p, g));
  Tensor ds1 = conv1.backward(cache.s1, dh, p, g);
  Tensor dn1 = nn::silu_backward(cache.n1, ds1);
  Tensor dx = norm1.backward(x, dn1, p, g);
  if (has_skip)
    nn::add_inplace(dx, skip.backward(x, dy, p, g));
  else
    nn::add_inplace(dx, dy);
  return dx;
}

Denoiser::Denoiser(ArchSpec arch, std::uint64_t init_seed) : arch_(std::move(arch)) {
  arch_.validate();
  Rng rng(init_seed);
  const int base = arch_.base_channels, g = arch_.groups;
  temb1_ = nn::Linear::create(weights_, "temb.fc1", base, arch_.temb_dim, rng);
  temb2_ = nn::Linear::create(weights_, "temb.fc2", arch_.temb_dim, arch_.temb_dim, rng);

  const auto ladder = arch_.resolution_ladder();
  const int levels = static_cast<int>(ladder.size());
  auto has_attn = [&](int r) { return contains(arch_.attention_resolutions, r); };

  int ch = base * arch_.channel_mult[0];
  {
    Block b;
    b.kind = BlockKind::conv;
    b.resolution = ladder[0];
    b.name = "enc.in";
    b.conv = nn::Conv2d::create(weights_, b.name, arch_.in_channels, ch, 3, 1, rng);
    encoder_.push_back(std::move(b));
  }
  for (int l = 0; l < levels; ++l) {
    const int cl = base * arch_.channel_mult[l];
    const std::string pfx = "enc." + std::to_string(ladder[l]);
    Block r;
    r.kind = BlockKind::res;
    r.resolution = ladder[l];
    r.name = pfx + ".res";
    r.res = ResBlock::create(weights_, r.name, ch, cl, arch_.temb_dim, g, rng);
    encoder_.push_back(std::move(r));
    ch = cl;
    if (has_attn(ladder[l])) {
      Block a;
      a.kind = BlockKind::attn;
      a.resolution = ladder[l];
      a.name = pfx + ".attn";
      a.attn = AttentionBlock::create(weights_, a.name, ch, ladder[l], g, rng);
      encoder_.push_back(std::move(a));
    }
    encoder_.back().emits_skip = true;
    if (l + 1 < levels) {
      Block d;
      d.kind = BlockKind::down;
      d.resolution = ladder[l + 1];
      d.name = pfx + ".down";
      d.conv = nn::Conv2d::create(weights_, d.name, ch, ch, 3, 2, rng);
      encoder_.push_back(std::move(d));
    }
  }
  mid_.kind = BlockKind::res;
  mid_.resolution = ladder.back();
  mid_.name = "mid.res";
  mid_.res = ResBlock::create(weights_, mid_.name, ch, ch, arch_.temb_dim, g, rng);

  for (int l = levels - 1; l >= 0; --l) {
    const int cl = base * arch_.channel_mult[l];
    const std::string pfx = "dec." + std::to_string(ladder[l]);
    Block r;
    r.kind = BlockKind::res;
    r.resolution = ladder[l];
    r.takes_skip = true;
    r.name = pfx + ".res";
    r.res = ResBlock::create(weights_, r.name, ch + cl, cl, arch_.temb_dim, g, rng);
    decoder_.push_back(std::move(r));
    ch = cl;
    if (has_attn(ladder[l])) {
      Block a;
      a.kind = BlockKind::attn;
      a.resolution = ladder[l];
      a.name = pfx + ".attn";
      a.attn = AttentionBlock::create(weights_, a.name, ch, ladder[l], g, rng);
      decoder_.push_back(std::move(a));
    }
    if (l > 0) {
      Block u;
      u.kind = BlockKind::up;
      u.resolution = ladder[l - 1];
      u.name = pfx + ".up";
      u.conv = nn::Conv2d::create(weights_, u.name, ch, ch, 3, 1, rng);
      decoder_.push_back(std::move(u));
    }
  }
  out_norm_ = nn::GroupNorm::create(weights_, "out.norm", ch, g);
  out_conv_ = nn::Conv2d::create(weights_, "out.conv", ch, arch_.in_channels, 3, 1, rng, /*zero_init=*/true);
}

Tensor Denoiser::run_block(const Block& b, const Tensor& x, const Tensor& temb_act, const AttentionTemperature& temps,
                           BlockCache* cache) const {
  switch (b.kind) {
    case BlockKind::conv:
    case BlockKind::down:
      return b.conv.forward(x, weights_);
    case BlockKind::res:
      return b.res.forward(x, temb_act, weights_, cache ? &cache->res : nullptr);
    case BlockKind::attn:
      return b.attn.forward(x, weights_, temps.at(b.resolution), cache ? &cache->attn : nullptr);
    case BlockKind::up: {
      Tensor up = nn::upsample_nearest2x(x);
      Tensor y = b.conv.forward(up, weights_);
      if (cache) cache->upsampled = std::move(up);
      return y;
    }
  }
  return {};
}

Tensor Denoiser::backprop_block(const Block& b, const Tensor& dy, const Tensor& temb_act, const BlockCache& cache,
                                nn::ParamStore& g, Tensor& d_temb_act) const {
  switch (b.kind) {
    case BlockKind::conv:
    case BlockKind::down:
      return b.conv.backward(cache.input, dy, weights_, g);
    case BlockKind::res:
      return b.res.backward(cache.input, dy, temb_act, cache.res, weights_, g, d_temb_act);
    case BlockKind::attn:
      return b.attn.backward(cache.input, dy, cache.attn, weights_, g);
    case BlockKind::up:
      return nn::upsample_nearest2x_backward(b.conv.backward(cache.upsampled, dy, weights_, g));
  }
  return {};
}

Tensor Denoiser::forward(const Tensor& x, std::span<const int> timesteps, const AttentionTemperature& temps,
                         ForwardCache* cache, std::vector<Tensor>* taps, int stop_after_encoder) const {
  if (x.channels() != arch_.in_channels || x.height() != arch_.image_size || x.width() != arch_.image_size)
    throw ShapeError("denoiser: input " + x.shape_string() + " does not match architecture image size " +
                     std::to_string(arch_.image_size));
  if (static_cast<int>(timesteps.size()) != x.batch()) throw ShapeError("denoiser: one timestep per sample required");

  Tensor sinusoid = sinusoidal_embedding(timesteps, arch_.base_channels);
  Tensor pre = temb1_.forward(sinusoid, weights_);
  Tensor hidden = nn::silu(pre);
  Tensor temb = temb2_.forward(hidden, weights_);
  Tensor temb_act = nn::silu(temb);

  if (taps) taps->assign(arch_.feature_taps.size(), Tensor{});
  if (cache) {
    cache->input = x;
    cache->timesteps.assign(timesteps.begin(), timesteps.end());
    cache->encoder.assign(encoder_.size(), BlockCache{});
    cache->decoder.assign(decoder_.size(), BlockCache{});
    cache->skip_channels.clear();
  }

  std::vector<Tensor> skips;
  Tensor h = x;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    BlockCache* bc = cache ? &cache->encoder[i] : nullptr;
    if (bc) bc->input = h;
    h = run_block(encoder_[i], h, temb_act, temps, bc);
    if (taps) {
      for (std::size_t k = 0; k < arch_.feature_taps.size(); ++k)
        if (arch_.feature_taps[k] == static_cast<int>(i)) (*taps)[k] = h;
    }
    if (encoder_[i].emits_skip) skips.push_back(h);
    if (static_cast<int>(i) == stop_after_encoder) return {};
  }
  if (cache) cache->mid.input = h;
  h = run_block(mid_, h, temb_act, temps, cache ? &cache->mid : nullptr);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    if (decoder_[i].takes_skip) {
      if (cache) cache->skip_channels.push_back(skips.back().channels());
      h = nn::concat_channels(h, skips.back());
      skips.pop_back();
    }
    BlockCache* bc = cache ? &cache->decoder[i] : nullptr;
    if (bc) bc->input = h;
    h = run_block(decoder_[i], h, temb_act, temps, bc);
  }
  Tensor on = out_norm_.forward(h, weights_);
  Tensor oa = nn::silu(on);
  Tensor y = out_conv_.forward(oa, weights_);
  if (cache) {
    cache->sinusoid = std::move(sinusoid);
    cache->temb_hidden_pre = std::move(pre);
    cache->temb_hidden = std::move(hidden);
    cache->temb = std::move(temb);
    cache->temb_act = std::move(temb_act);
    cache->out_pre_norm = std::move(h);
    cache->out_norm = std::move(on);
    cache->out_act = std::move(oa);
  }
  return y;
}

void Denoiser::backward(const Tensor& d_out, const ForwardCache& cache, nn::ParamStore& g) const {
  if (!g.same_layout(weights_)) throw ShapeError("denoiser backward: gradient store layout mismatch");
  Tensor d = out_conv_.backward(cache.out_act, d_out, weights_, g);
  d = nn::silu_backward(cache.out_norm, d);
  d = out_norm_.backward(cache.out_pre_norm, d, weights_, g);

  Tensor d_temb_act(cache.temb_act.batch(), cache.temb_act.channels(), 1, 1);
  const std::size_t n_skips = cache.skip_channels.size();
  std::vector<Tensor> d_skips(n_skips);
  std::size_t skip_use = n_skips;  // decoder consumes skips in reverse push order
  for (std::size_t i = decoder_.size(); i-- > 0;) {
    d = backprop_block(decoder_[i], d, cache.temb_act, cache.decoder[i], g, d_temb_act);
    if (decoder_[i].takes_skip) {
      --skip_use;
      // skip_use-th decoder concat consumed encoder skip (n_skips - 1 - skip_use)
      const int skip_ch = cache.skip_channels[skip_use];
      Tensor dh, ds;
      nn::split_channels(d, d.channels() - skip_ch, dh, ds);
      d_skips[n_skips - 1 - skip_use] = std::move(ds);
      d = std::move(dh);
    }
  }
  d = backprop_block(mid_, d, cache.temb_act, cache.mid, g, d_temb_act);
  std::size_t skip_idx = n_skips;
  for (std::size_t i = encoder_.size(); i-- > 0;) {
    if (encoder_[i].emits_skip) nn::add_inplace(d, d_skips[--skip_idx]);
    d = backprop_block(encoder_[i], d, cache.temb_act, cache.encoder[i], g, d_temb_act);
  }

  Tensor d_temb = nn::silu_backward(cache.temb, d_temb_act);
  Tensor d_hidden = temb2_.backward(cache.temb_hidden, d_temb, weights_, g);
  Tensor d_pre = nn::silu_backward(cache.temb_hidden_pre, d_hidden);
  temb1_.backward(cache.sinusoid, d_pre, weights_, g);
}

void Denoiser::validate_temperatures(const TemperatureControl& temps) const {
  for (int r : temps.modulated_resolutions)
    if (!contains(arch_.attention_resolutions, r))
      throw ConfigError("sampler.modulated_resolutions: no attention block at resolution " + std::to_string(r));
  if (!(temps.gamma > 0.0)) throw ConfigError("sampler.gamma: must be > 0");
}

std::vector<int> Denoiser::tap_resolutions() const {
  std::vector<int> r;
  for (int t : arch_.feature_taps) r.push_back(encoder_[t].resolution);
  return r;
}

std::vector<int> Denoiser::tap_channels() const {
  std::vector<int> out;
  for (int t : arch_.feature_taps) {
    const Block& b = encoder_[t];
    switch (b.kind) {
      case BlockKind::conv:
      case BlockKind::down:
      case BlockKind::up:
        out.push_back(b.conv.out);
        break;
      case BlockKind::res:
        out.push_back(b.res.out);
        break;
      case BlockKind::attn:
        out.push_back(b.attn.channels);
        break;
    }
  }
  return out;
}

DenoiseResult denoise(const ImageBatch& x_t, int t, const AttentionTemperature& temps, const Denoiser& params) {
  Tensor x = cast<float>(x_t);
  std::vector<int> ts(x_t.batch(), t);
  DenoiseResult r;
  Tensor eps = params.forward(x, ts, temps, nullptr, &r.tapped_features);
  r.eps_pred = cast<double>(eps);
  r.eps_pred.seed_tag = x_t.seed_tag;
  return r;
}

DenoiseResult denoise(const ImageBatch& x_t, int t, const TemperatureControl& temps, const Denoiser& params) {
  params.validate_temperatures(temps);
  return denoise(x_t, t, temps.resolve(), params);
}

DenoiseResult denoise(const ImageBatch& x_t, int t, const Denoiser& params) {
  return denoise(x_t, t, AttentionTemperature{}, params);
}

void save_checkpoint(const std::filesystem::path& path, const Denoiser& params) {
  io::ByteWriter w;
  w.bytes("AAMD");
  w.u32(1);
  w.text(params.arch().descriptor());
  const auto& store = params.weights();
  w.u32(static_cast<std::uint32_t>(store.count()));
  for (std::size_t i = 0; i < store.count(); ++i) w.f32_array(store[static_cast<int>(i)]);
  io::write_file_atomic(path, w.buffer());
}

Denoiser load_checkpoint(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path), path.string());
  r.expect_magic("AAMD");
  const auto version = r.u32();
  if (version != 1) throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  Denoiser d(ArchSpec::parse_descriptor(r.text()));
  auto& store = d.weights();
  if (r.u32() != store.count()) throw IoError(path.string() + ": parameter count does not match architecture");
  for (std::size_t i = 0; i < store.count(); ++i) r.f32_array(store[static_cast<int>(i)]);
  r.expect_end();
  return d;
}

}  // namespace aam
