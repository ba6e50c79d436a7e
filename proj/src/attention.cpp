#include "aam/attention.hpp"

namespace aam {

namespace {
using RowMatF = RowMatrix<float>;
// Feature maps are channel-major, so a [C, HW] plane block viewed column-major
// as [HW, C] gives token rows directly.
using TokenMap = Eigen::Map<Eigen::MatrixXf>;
using ConstTokenMap = Eigen::Map<const Eigen::MatrixXf>;
}  // namespace

AttentionBlock AttentionBlock::create(nn::ParamStore& store, const std::string& name, int channels, int resolution,
                                      int groups, Rng& rng) {
  AttentionBlock b;
  b.channels = channels;
  b.resolution = resolution;
  b.name = name;
  b.norm = nn::GroupNorm::create(store, name + ".norm", channels, groups);
  b.qkv = nn::Conv2d::create(store, name + ".qkv", channels, 3 * channels, 1, 1, rng);
  b.proj = nn::Conv2d::create(store, name + ".proj", channels, channels, 1, 1, rng, /*zero_init=*/true);
  return b;
}

Tensor AttentionBlock::forward(const Tensor& x, const nn::ParamStore& p, double tau, Cache* cache) const {
  Tensor h = norm.forward(x, p);
  Tensor qkv_t = qkv.forward(h, p);
  const int n_tok = x.plane(), c = channels;
  Tensor attended(x.batch(), c, x.height(), x.width());
  RowMatF a;
  RowMatF upd;
  if (cache) cache->attention.resize(x.batch());
  for (int n = 0; n < x.batch(); ++n) {
    ConstTokenMap q(qkv_t.channel_ptr(n, 0), n_tok, c);
    ConstTokenMap k(qkv_t.channel_ptr(n, c), n_tok, c);
    ConstTokenMap v(qkv_t.channel_ptr(n, 2 * c), n_tok, c);
    attention_forward<float>(q, k, v, tau, a, upd, name);
    TokenMap(attended.channel_ptr(n, 0), n_tok, c) = upd;
    if (cache) cache->attention[n] = a;
  }
  Tensor out = proj.forward(attended, p);
  nn::add_inplace(out, x);
  if (cache) {
    cache->h = std::move(h);
    cache->qkv = std::move(qkv_t);
    cache->attended = std::move(attended);
    cache->tau = tau;
  }
  return out;
}

Tensor AttentionBlock::backward(const Tensor& x, const Tensor& dy, const Cache& cache, const nn::ParamStore& p,
                                nn::ParamStore& g) const {
  const int n_tok = x.plane(), c = channels;
  const float scale = static_cast<float>(1.0 / (cache.tau * std::sqrt(static_cast<double>(c))));
  Tensor d_att = proj.backward(cache.attended, dy, p, g);
  Tensor d_qkv(x.batch(), 3 * c, x.height(), x.width());
  RowMatF da, ds;
  for (int n = 0; n < x.batch(); ++n) {
    const RowMatF& a = cache.attention[n];
    ConstTokenMap q(cache.qkv.channel_ptr(n, 0), n_tok, c);
    ConstTokenMap k(cache.qkv.channel_ptr(n, c), n_tok, c);
    ConstTokenMap v(cache.qkv.channel_ptr(n, 2 * c), n_tok, c);
    ConstTokenMap dupd(d_att.channel_ptr(n, 0), n_tok, c);
    TokenMap dq(d_qkv.channel_ptr(n, 0), n_tok, c);
    TokenMap dk(d_qkv.channel_ptr(n, c), n_tok, c);
    TokenMap dv(d_qkv.channel_ptr(n, 2 * c), n_tok, c);
    dv.noalias() = a.transpose() * dupd;
    da.noalias() = dupd * v.transpose();
    // softmax backward: dS = A .* (dA - rowsum(dA .* A))
    Eigen::VectorXf inner = (da.array() * a.array()).rowwise().sum();
    ds = (a.array() * (da.array().colwise() - inner.array())).matrix();
    ds *= scale;
    dq.noalias() = ds * k;
    dk.noalias() = ds.transpose() * q;
  }
  Tensor dh = qkv.backward(cache.h, d_qkv, p, g);
  Tensor dx = norm.backward(x, dh, p, g);
  nn::add_inplace(dx, dy);
  return dx;
}

}  // namespace aam
