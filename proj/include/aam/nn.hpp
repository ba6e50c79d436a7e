#pragma once

#include <span>
#include <string>
#include <vector>

#include "aam/rng.hpp"
#include "aam/tensor.hpp"

/// Minimal layer toolkit for the denoiser: each layer has a forward pass and
/// a hand-written backward pass that recomputes what it needs from the layer
/// input. Parameters live in a flat ParamStore addressed by integer handles.
namespace aam::nn {

struct Param {
  std::string name;
  AlignedVector<float> value;
};

class ParamStore {
 public:
  int add(std::string name, std::size_t count);

  std::span<float> operator[](int id) { return params_[id].value; }
  std::span<const float> operator[](int id) const { return params_[id].value; }

  std::size_t count() const noexcept { return params_.size(); }
  std::size_t total_size() const noexcept;
  const Param& param(int id) const { return params_[id]; }
  Param& param(int id) { return params_[id]; }

  /// Same layout, all values zero.
  ParamStore zeros_like() const;
  void fill(float v);
  bool same_layout(const ParamStore& o) const;
  bool operator==(const ParamStore& o) const;

 private:
  std::vector<Param> params_;
};

void init_uniform(std::span<float> w, float bound, Rng& rng);

struct Conv2d {
  int in = 0, out = 0, kernel = 3, stride = 1;
  int weight = -1, bias = -1;

  static Conv2d create(ParamStore& store, const std::string& name, int in, int out, int kernel, int stride, Rng& rng,
                       bool zero_init = false);
  int pad() const { return kernel / 2; }
  int out_size(int in_size) const { return (in_size + 2 * pad() - kernel) / stride + 1; }

  Tensor forward(const Tensor& x, const ParamStore& p) const;
  /// Accumulates weight/bias gradients into g and returns dL/dx.
  Tensor backward(const Tensor& x, const Tensor& dy, const ParamStore& p, ParamStore& g) const;
};

struct GroupNorm {
  int channels = 0, groups = 1;
  int gamma = -1, beta = -1;
  float eps = 1e-5f;

  static GroupNorm create(ParamStore& store, const std::string& name, int channels, int groups);
  Tensor forward(const Tensor& x, const ParamStore& p) const;
  Tensor backward(const Tensor& x, const Tensor& dy, const ParamStore& p, ParamStore& g) const;
};

/// Rows of x are samples: x is [N, in, 1, 1].
struct Linear {
  int in = 0, out = 0;
  int weight = -1, bias = -1;

  static Linear create(ParamStore& store, const std::string& name, int in, int out, Rng& rng);
  Tensor forward(const Tensor& x, const ParamStore& p) const;
  Tensor backward(const Tensor& x, const Tensor& dy, const ParamStore& p, ParamStore& g) const;
};

Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& dy);

Tensor upsample_nearest2x(const Tensor& x);
Tensor upsample_nearest2x_backward(const Tensor& dy);

/// Concatenate along channels; split is its adjoint.
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& d, int channels_a, Tensor& da, Tensor& db);

void add_inplace(Tensor& acc, const Tensor& x);

}  // namespace aam::nn
