#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "aam/error.hpp"
#include "aam/nn.hpp"

namespace aam {

/// tau = 10^(gamma * tanh(tau_logit)); lies in (10^-gamma, 10^gamma).
inline double temperature_from_logit(double tau_logit, double gamma) {
  return std::pow(10.0, gamma * std::tanh(tau_logit));
}

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Single-head attention operands. Rows are tokens.
template <typename Scalar>
struct AttentionContext {
  RowMatrix<Scalar> q, k, v;
  RowMatrix<Scalar> attention;  // tokens x tokens, row-stochastic
  RowMatrix<Scalar> update;     // attention * v
};

/// In-place softmax of each row of `logits` after multiplying by `scale`.
/// Throws NumericalError naming `where` when a row is not finite.
template <typename Scalar>
void scaled_row_softmax(RowMatrix<Scalar>& logits, Scalar scale, const std::string& where) {
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    row *= scale;
    const Scalar mx = row.maxCoeff();
    row.array() = (row.array() - mx).exp();
    const Scalar sum = row.sum();
    if (!std::isfinite(sum) || !std::isfinite(mx) || sum <= Scalar(0))
      throw NumericalError(where + ": non-finite attention logits in row " + std::to_string(i));
    row /= sum;
  }
}

/// A = softmax(Q K^T / (tau * sqrt(d))), update = A V. With tau = 1 this is
/// plain scaled dot-product attention.
template <typename Scalar, typename QMat, typename KMat, typename VMat>
void attention_forward(const QMat& q, const KMat& k, const VMat& v, double tau, RowMatrix<Scalar>& attention,
                       RowMatrix<Scalar>& update, const std::string& where = "attention") {
  if (q.rows() != k.rows() || k.rows() != v.rows())
    throw ShapeError(where + ": Q, K, V must have the same number of tokens");
  if (q.cols() != k.cols() || q.cols() <= 0) throw ShapeError(where + ": Q and K must share a positive head dim");
  if (!(tau > 0.0)) throw InputError(where + ": temperature must be > 0");
  const Scalar scale = static_cast<Scalar>(1.0 / (tau * std::sqrt(static_cast<double>(q.cols()))));
  attention.noalias() = q * k.transpose();
  scaled_row_softmax<Scalar>(attention, scale, where);
  update.noalias() = attention * v;
}

template <typename Scalar>
void attention_forward(AttentionContext<Scalar>& ctx, double tau, const std::string& where = "attention") {
  attention_forward<Scalar>(ctx.q, ctx.k, ctx.v, tau, ctx.attention, ctx.update, where);
}

/// Shannon entropy (nats) of a probability row.
template <typename Derived>
double entropy(const Eigen::MatrixBase<Derived>& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double v = static_cast<double>(p(i));
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

/// Residual self-attention block over a feature map:
///   out = x + proj(attention(GroupNorm(x)))
/// with a single head of dim = channels and temperature applied in the
/// softmax.
struct AttentionBlock {
  int channels = 0;
  int resolution = 0;
  nn::GroupNorm norm;
  nn::Conv2d qkv;
  nn::Conv2d proj;
  std::string name;

  static AttentionBlock create(nn::ParamStore& store, const std::string& name, int channels, int resolution,
                               int groups, Rng& rng);

  struct Cache {
    Tensor h;                    // normalized input
    Tensor qkv;                  // [N, 3C, H, W]
    Tensor attended;             // [N, C, H, W] before projection
    std::vector<RowMatrix<float>> attention;  // per sample
    double tau = 1.0;
  };

  Tensor forward(const Tensor& x, const nn::ParamStore& p, double tau, Cache* cache) const;
  Tensor backward(const Tensor& x, const Tensor& dy, const Cache& cache, const nn::ParamStore& p,
                  nn::ParamStore& g) const;
};

}  // namespace aam
