#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "aam/attention.hpp"
#include "aam/nn.hpp"
#include "aam/tensor.hpp"

namespace aam {

/// UNet shape. Resolutions run image_size, image_size/2, ... one level per
/// channel multiplier.
struct ArchSpec {
  int image_size = 32;
  int in_channels = 1;
  int base_channels = 32;
  std::vector<int> channel_mult{1, 2, 2};
  std::vector<int> attention_resolutions{32, 16, 8};
  int groups = 8;
  int temb_dim = 128;
  /// Encoder block indices (forward order) whose outputs are exported.
  std::vector<int> feature_taps{5, 7};

  std::vector<int> resolution_ladder() const;
  std::string descriptor() const;
  static ArchSpec parse_descriptor(const std::string& text);
  void validate() const;
};

/// Per-resolution attention temperatures; resolutions not listed use 1.
struct AttentionTemperature {
  std::map<int, double> per_resolution;
  double at(int resolution) const {
    auto it = per_resolution.find(resolution);
    return it == per_resolution.end() ? 1.0 : it->second;
  }
};

/// One scalar logit shared by every modulated resolution.
struct TemperatureControl {
  double tau_logit = 0.0;
  double gamma = 2.0;
  std::vector<int> modulated_resolutions;

  double tau() const { return temperature_from_logit(tau_logit, gamma); }
  AttentionTemperature resolve() const;
};

struct ResBlock {
  int in = 0, out = 0;
  nn::GroupNorm norm1;
  nn::Conv2d conv1;
  nn::Linear temb_proj;
  nn::GroupNorm norm2;
  nn::Conv2d conv2;
  bool has_skip = false;
  nn::Conv2d skip;

  static ResBlock create(nn::ParamStore& store, const std::string& name, int in, int out, int temb_dim, int groups,
                         Rng& rng);

  struct Cache {
    Tensor n1, s1, h, n2, s2;
  };
  Tensor forward(const Tensor& x, const Tensor& temb_act, const nn::ParamStore& p, Cache* cache) const;
  Tensor backward(const Tensor& x, const Tensor& dy, const Tensor& temb_act, const Cache& cache,
                  const nn::ParamStore& p, nn::ParamStore& g, Tensor& d_temb_act) const;
};

enum class BlockKind { conv, res, attn, down, up };

struct Block {
  BlockKind kind = BlockKind::conv;
  int resolution = 0;
  bool takes_skip = false;  // decoder: concat the matching encoder skip before this block
  bool emits_skip = false;  // encoder: push output onto the skip stack
  nn::Conv2d conv;
  ResBlock res;
  AttentionBlock attn;
  std::string name;
};

struct BlockCache {
  Tensor input;
  Tensor upsampled;
  ResBlock::Cache res;
  AttentionBlock::Cache attn;
};

struct ForwardCache {
  Tensor input;
  std::vector<int> timesteps;
  Tensor sinusoid, temb_hidden_pre, temb_hidden, temb, temb_act;
  std::vector<BlockCache> encoder, decoder;
  BlockCache mid;
  Tensor out_pre_norm, out_norm, out_act;
  std::vector<int> skip_channels;
};

/// Denoiser weights plus the layer graph derived from the architecture.
class Denoiser {
 public:
  explicit Denoiser(ArchSpec arch, std::uint64_t init_seed = 0);

  const ArchSpec& arch() const noexcept { return arch_; }
  nn::ParamStore& weights() noexcept { return weights_; }
  const nn::ParamStore& weights() const noexcept { return weights_; }
  const std::vector<Block>& encoder_blocks() const noexcept { return encoder_; }

  /// Network forward. `taps`, when given, receives one map per
  /// arch().feature_taps entry. If `stop_after_encoder` >= 0 the pass ends
  /// after that encoder block and the returned tensor is empty.
  Tensor forward(const Tensor& x, std::span<const int> timesteps, const AttentionTemperature& temps,
                 ForwardCache* cache = nullptr, std::vector<Tensor>* taps = nullptr,
                 int stop_after_encoder = -1) const;

  /// Accumulates dL/dweights into grads given dL/doutput.
  void backward(const Tensor& d_out, const ForwardCache& cache, nn::ParamStore& grads) const;

  /// Checks that every modulated resolution has an attention block.
  void validate_temperatures(const TemperatureControl& temps) const;

  /// Spatial size of each tap, in tap order.
  std::vector<int> tap_resolutions() const;
  std::vector<int> tap_channels() const;

 private:
  Tensor run_block(const Block& b, const Tensor& x, const Tensor& temb_act, const AttentionTemperature& temps,
                   BlockCache* cache) const;
  Tensor backprop_block(const Block& b, const Tensor& dy, const Tensor& temb_act, const BlockCache& cache,
                        nn::ParamStore& g, Tensor& d_temb_act) const;

  ArchSpec arch_;
  nn::ParamStore weights_;
  nn::Linear temb1_, temb2_;
  std::vector<Block> encoder_;
  Block mid_;
  std::vector<Block> decoder_;
  nn::GroupNorm out_norm_;
  nn::Conv2d out_conv_;
};

Tensor sinusoidal_embedding(std::span<const int> timesteps, int dim);

struct DenoiseResult {
  ImageBatch eps_pred;
  std::vector<Tensor> tapped_features;
};

/// eps-prediction at timestep t with modulated attention temperatures.
DenoiseResult denoise(const ImageBatch& x_t, int t, const TemperatureControl& temps, const Denoiser& params);
/// Plain forward pass (every attention at temperature 1).
DenoiseResult denoise(const ImageBatch& x_t, int t, const Denoiser& params);
/// Fixed per-resolution temperatures.
DenoiseResult denoise(const ImageBatch& x_t, int t, const AttentionTemperature& temps, const Denoiser& params);

/// Checkpoint container: "AAMD", version, length-prefixed architecture
/// descriptor, parameter count, then raw little-endian float32 arrays.
void save_checkpoint(const std::filesystem::path& path, const Denoiser& params);
Denoiser load_checkpoint(const std::filesystem::path& path);

}  // namespace aam
