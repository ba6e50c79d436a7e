#include "aam/nn.hpp"

#include <Eigen/Core>
#include <cmath>

namespace aam::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

// cols is [in*k*k, out_h*out_w] row-major.
void im2col(const float* x, int c, int h, int w, int k, int stride, int pad, int oh, int ow, float* cols) {
  const int p = oh * ow;
  for (int ci = 0; ci < c; ++ci) {
    const float* plane = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = cols + (static_cast<std::size_t>(ci * k + ky) * k + kx) * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          float* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0f);
            continue;
          }
          const float* src = plane + iy * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* cols, int c, int h, int w, int k, int stride, int pad, int oh, int ow, float* dx) {
  const int p = oh * ow;
  for (int ci = 0; ci < c; ++ci) {
    float* plane = dx + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = cols + (static_cast<std::size_t>(ci * k + ky) * k + kx) * p;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const float* src = row + oy * ow;
          float* dst = plane + iy * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

int ParamStore::add(std::string name, std::size_t count) {
  params_.push_back({std::move(name), AlignedVector<float>(count, 0.0f)});
  return static_cast<int>(params_.size() - 1);
}

std::size_t ParamStore::total_size() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore z = *this;
  z.fill(0.0f);
  return z;
}

void ParamStore::fill(float v) {
  for (auto& p : params_) std::fill(p.value.begin(), p.value.end(), v);
}

bool ParamStore::same_layout(const ParamStore& o) const {
  if (params_.size() != o.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name != o.params_[i].name || params_[i].value.size() != o.params_[i].value.size()) return false;
  return true;
}

bool ParamStore::operator==(const ParamStore& o) const {
  if (!same_layout(o)) return false;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].value != o.params_[i].value) return false;
  return true;
}

void init_uniform(std::span<float> w, float bound, Rng& rng) {
  std::uniform_real_distribution<float> u(-bound, bound);
  for (auto& v : w) v = u(rng);
}

Conv2d Conv2d::create(ParamStore& store, const std::string& name, int in, int out, int kernel, int stride, Rng& rng,
                      bool zero_init) {
  Conv2d c;
  c.in = in;
  c.out = out;
  c.kernel = kernel;
  c.stride = stride;
  c.weight = store.add(name + ".weight", static_cast<std::size_t>(out) * in * kernel * kernel);
  c.bias = store.add(name + ".bias", out);
  if (!zero_init) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(in * kernel * kernel));
    init_uniform(store[c.weight], bound, rng);
    init_uniform(store[c.bias], bound, rng);
  }
  return c;
}

Tensor Conv2d::forward(const Tensor& x, const ParamStore& p) const {
  if (x.channels() != in) throw ShapeError("conv2d: expected " + std::to_string(in) + " input channels");
  const int oh = out_size(x.height()), ow = out_size(x.width());
  const int k = in * kernel * kernel, np = oh * ow;
  Tensor y(x.batch(), out, oh, ow);
  ConstRowMap w(p[weight].data(), out, k);
  Eigen::Map<const Eigen::VectorXf> b(p[bias].data(), out);
  const bool pointwise = kernel == 1 && stride == 1;
  AlignedVector<float> cols(pointwise ? 0 : static_cast<std::size_t>(k) * np);
  for (int n = 0; n < x.batch(); ++n) {
    const float* src = x.channel_ptr(n, 0);
    if (!pointwise) {
      im2col(src, in, x.height(), x.width(), kernel, stride, pad(), oh, ow, cols.data());
      src = cols.data();
    }
    RowMap yn(y.channel_ptr(n, 0), out, np);
    yn.noalias() = w * ConstRowMap(src, k, np);
    yn.colwise() += b;
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& dy, const ParamStore& p, ParamStore& g) const {
  const int oh = dy.height(), ow = dy.width();
  const int k = in * kernel * kernel, np = oh * ow;
  Tensor dx(x.batch(), in, x.height(), x.width());
  ConstRowMap w(p[weight].data(), out, k);
  RowMap dw(g[weight].data(), out, k);
  Eigen::Map<Eigen::VectorXf> db(g[bias].data(), out);
  const bool pointwise = kernel == 1 && stride == 1;
  AlignedVector<float> cols(pointwise ? 0 : static_cast<std::size_t>(k) * np);
  AlignedVector<float> dcols(pointwise ? 0 : static_cast<std::size_t>(k) * np);
  for (int n = 0; n < x.batch(); ++n) {
    const float* src = x.channel_ptr(n, 0);
    if (!pointwise) {
      im2col(src, in, x.height(), x.width(), kernel, stride, pad(), oh, ow, cols.data());
      src = cols.data();
    }
    ConstRowMap dyn(dy.channel_ptr(n, 0), out, np);
    dw.noalias() += dyn * ConstRowMap(src, k, np).transpose();
    db += dyn.rowwise().sum();
    if (pointwise) {
      RowMap(dx.channel_ptr(n, 0), k, np).noalias() = w.transpose() * dyn;
    } else {
      RowMap(dcols.data(), k, np).noalias() = w.transpose() * dyn;
      col2im(dcols.data(), in, x.height(), x.width(), kernel, stride, pad(), oh, ow, dx.channel_ptr(n, 0));
    }
  }
  return dx;
}

GroupNorm GroupNorm::create(ParamStore& store, const std::string& name, int channels, int groups) {
  if (channels % groups != 0) throw ConfigError(name + ": channels not divisible by groups");
  GroupNorm gn;
  gn.channels = channels;
  gn.groups = groups;
  gn.gamma = store.add(name + ".gamma", channels);
  gn.beta = store.add(name + ".beta", channels);
  std::fill(store[gn.gamma].begin(), store[gn.gamma].end(), 1.0f);
  return gn;
}

Tensor GroupNorm::forward(const Tensor& x, const ParamStore& p) const {
  Tensor y(x.batch(), x.channels(), x.height(), x.width());
  const int cpg = channels / groups;
  const std::size_t m = static_cast<std::size_t>(cpg) * x.plane();
  auto gamma_v = p[gamma];
  auto beta_v = p[beta];
  for (int n = 0; n < x.batch(); ++n) {
    for (int gi = 0; gi < groups; ++gi) {
      const float* src = x.channel_ptr(n, gi * cpg);
      double sum = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        sum += src[i];
        sq += static_cast<double>(src[i]) * src[i];
      }
      const double mean = sum / m;
      const double var = std::max(sq / m - mean * mean, 0.0);
      const float rstd = static_cast<float>(1.0 / std::sqrt(var + eps));
      const float meanf = static_cast<float>(mean);
      for (int c = 0; c < cpg; ++c) {
        const int ch = gi * cpg + c;
        const float* s = x.channel_ptr(n, ch);
        float* d = y.channel_ptr(n, ch);
        const float a = rstd * gamma_v[ch];
        const float b = beta_v[ch] - meanf * a;
        for (int i = 0; i < x.plane(); ++i) d[i] = s[i] * a + b;
      }
    }
  }
  return y;
}

Tensor GroupNorm::backward(const Tensor& x, const Tensor& dy, const ParamStore& p, ParamStore& g) const {
  Tensor dx(x.batch(), x.channels(), x.height(), x.width());
  const int cpg = channels / groups;
  const int hw = x.plane();
  const std::size_t m = static_cast<std::size_t>(cpg) * hw;
  auto gamma_v = p[gamma];
  auto dgamma = g[gamma];
  auto dbeta = g[beta];
  for (int n = 0; n < x.batch(); ++n) {
    for (int gi = 0; gi < groups; ++gi) {
      const float* src = x.channel_ptr(n, gi * cpg);
      double sum = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        sum += src[i];
        sq += static_cast<double>(src[i]) * src[i];
      }
      const double mean = sum / m;
      const double var = std::max(sq / m - mean * mean, 0.0);
      const double rstd = 1.0 / std::sqrt(var + eps);
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int c = 0; c < cpg; ++c) {
        const int ch = gi * cpg + c;
        const float* s = x.channel_ptr(n, ch);
        const float* d = dy.channel_ptr(n, ch);
        double dg = 0.0, db = 0.0;
        for (int i = 0; i < hw; ++i) {
          const double xhat = (s[i] - mean) * rstd;
          dg += d[i] * xhat;
          db += d[i];
          const double dxhat = d[i] * gamma_v[ch];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        dgamma[ch] += static_cast<float>(dg);
        dbeta[ch] += static_cast<float>(db);
      }
      const double inv_m = 1.0 / m;
      for (int c = 0; c < cpg; ++c) {
        const int ch = gi * cpg + c;
        const float* s = x.channel_ptr(n, ch);
        const float* d = dy.channel_ptr(n, ch);
        float* o = dx.channel_ptr(n, ch);
        for (int i = 0; i < hw; ++i) {
          const double xhat = (s[i] - mean) * rstd;
          const double dxhat = d[i] * gamma_v[ch];
          o[i] = static_cast<float>(rstd * (dxhat - inv_m * sum_dxhat - xhat * inv_m * sum_dxhat_xhat));
        }
      }
    }
  }
  return dx;
}

Linear Linear::create(ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", static_cast<std::size_t>(out) * in);
  l.bias = store.add(name + ".bias", out);
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  init_uniform(store[l.weight], bound, rng);
  init_uniform(store[l.bias], bound, rng);
  return l;
}

Tensor Linear::forward(const Tensor& x, const ParamStore& p) const {
  if (x.channels() != in || x.plane() != 1) throw ShapeError("linear: bad input shape " + x.shape_string());
  Tensor y(x.batch(), out, 1, 1);
  ConstRowMap w(p[weight].data(), out, in);
  Eigen::Map<const Eigen::RowVectorXf> b(p[bias].data(), out);
  RowMap ym(y.data(), x.batch(), out);
  ym.noalias() = ConstRowMap(x.data(), x.batch(), in) * w.transpose();
  ym.rowwise() += b;
  return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& dy, const ParamStore& p, ParamStore& g) const {
  Tensor dx(x.batch(), in, 1, 1);
  ConstRowMap w(p[weight].data(), out, in);
  ConstRowMap dym(dy.data(), x.batch(), out);
  RowMap(g[weight].data(), out, in).noalias() += dym.transpose() * ConstRowMap(x.data(), x.batch(), in);
  Eigen::Map<Eigen::RowVectorXf>(g[bias].data(), out) += dym.colwise().sum();
  RowMap(dx.data(), x.batch(), in).noalias() = dym * w;
  return dx;
}

Tensor silu(const Tensor& x) {
  Tensor y(x.batch(), x.channels(), x.height(), x.width());
  Eigen::Map<const Eigen::ArrayXf> a(x.data(), x.size());
  Eigen::Map<Eigen::ArrayXf>(y.data(), y.size()) = a / (1.0f + (-a).exp());
  return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.batch(), x.channels(), x.height(), x.width());
  Eigen::Map<const Eigen::ArrayXf> a(x.data(), x.size());
  Eigen::Map<const Eigen::ArrayXf> d(dy.data(), dy.size());
  Eigen::ArrayXf sig = 1.0f / (1.0f + (-a).exp());
  Eigen::Map<Eigen::ArrayXf>(dx.data(), dx.size()) = d * sig * (1.0f + a * (1.0f - sig));
  return dx;
}

Tensor upsample_nearest2x(const Tensor& x) {
  Tensor y(x.batch(), x.channels(), x.height() * 2, x.width() * 2);
  for (int n = 0; n < x.batch(); ++n)
    for (int c = 0; c < x.channels(); ++c) {
      const float* s = x.channel_ptr(n, c);
      float* d = y.channel_ptr(n, c);
      const int w2 = y.width();
      for (int yy = 0; yy < y.height(); ++yy)
        for (int xx = 0; xx < w2; ++xx) d[yy * w2 + xx] = s[(yy / 2) * x.width() + xx / 2];
    }
  return y;
}

Tensor upsample_nearest2x_backward(const Tensor& dy) {
  Tensor dx(dy.batch(), dy.channels(), dy.height() / 2, dy.width() / 2);
  for (int n = 0; n < dy.batch(); ++n)
    for (int c = 0; c < dy.channels(); ++c) {
      const float* s = dy.channel_ptr(n, c);
      float* d = dx.channel_ptr(n, c);
      for (int yy = 0; yy < dy.height(); ++yy)
        for (int xx = 0; xx < dy.width(); ++xx) d[(yy / 2) * dx.width() + xx / 2] += s[yy * dy.width() + xx];
    }
  return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.batch() != b.batch() || a.height() != b.height() || a.width() != b.width())
    throw ShapeError("concat_channels: " + a.shape_string() + " vs " + b.shape_string());
  Tensor y(a.batch(), a.channels() + b.channels(), a.height(), a.width());
  for (int n = 0; n < a.batch(); ++n) {
    std::copy(a.sample(n).begin(), a.sample(n).end(), y.channel_ptr(n, 0));
    std::copy(b.sample(n).begin(), b.sample(n).end(), y.channel_ptr(n, a.channels()));
  }
  return y;
}

void split_channels(const Tensor& d, int channels_a, Tensor& da, Tensor& db) {
  const int cb = d.channels() - channels_a;
  da = Tensor(d.batch(), channels_a, d.height(), d.width());
  db = Tensor(d.batch(), cb, d.height(), d.width());
  const std::size_t na = static_cast<std::size_t>(channels_a) * d.plane();
  for (int n = 0; n < d.batch(); ++n) {
    const float* s = d.channel_ptr(n, 0);
    std::copy(s, s + na, da.channel_ptr(n, 0));
    std::copy(s + na, s + d.sample_size(), db.channel_ptr(n, 0));
  }
}

void add_inplace(Tensor& acc, const Tensor& x) {
  require_same_shape(acc, x, "add_inplace");
  Eigen::Map<Eigen::ArrayXf>(acc.data(), acc.size()) += Eigen::Map<const Eigen::ArrayXf>(x.data(), x.size());
}

}  // namespace aam::nn
