#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aam/error.hpp"

namespace aam {

/// Storage aligned to Eigen's widest packet, so vectorized kernels see the
/// same alignment (and summation order) on every run.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense NCHW array. Float instances carry network activations; double
/// instances (ImageBatch) carry images and diffusion states.
template <typename Scalar>
class Tensor4 {
 public:
  using value_type = Scalar;

  Tensor4() = default;
  Tensor4(int n, int c, int h, int w, Scalar fill = Scalar(0))
      : n_(n), c_(c), h_(h), w_(w), data_(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int batch() const noexcept { return n_; }
  int channels() const noexcept { return c_; }
  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  int plane() const noexcept { return h_ * w_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Scalar* data() noexcept { return data_.data(); }
  const Scalar* data() const noexcept { return data_.data(); }
  std::span<Scalar> values() noexcept { return data_; }
  std::span<const Scalar> values() const noexcept { return data_; }

  std::size_t sample_size() const noexcept { return static_cast<std::size_t>(c_) * h_ * w_; }
  std::span<Scalar> sample(int n) noexcept { return {data_.data() + n * sample_size(), sample_size()}; }
  std::span<const Scalar> sample(int n) const noexcept {
    return {data_.data() + n * sample_size(), sample_size()};
  }
  Scalar* channel_ptr(int n, int c) noexcept { return data_.data() + (static_cast<std::size_t>(n) * c_ + c) * plane(); }
  const Scalar* channel_ptr(int n, int c) const noexcept {
    return data_.data() + (static_cast<std::size_t>(n) * c_ + c) * plane();
  }

  Scalar& at(int n, int c, int y, int x) noexcept {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x];
  }
  Scalar at(int n, int c, int y, int x) const noexcept {
    return data_[((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x];
  }

  bool same_shape(const Tensor4& o) const noexcept {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  std::string shape_string() const {
    return "[" + std::to_string(n_) + "," + std::to_string(c_) + "," + std::to_string(h_) + "," +
           std::to_string(w_) + "]";
  }

  /// Copy of a contiguous range of samples.
  Tensor4 slice(int first, int count) const {
    Tensor4 out(count, c_, h_, w_);
    std::copy(data_.begin() + first * sample_size(), data_.begin() + (first + count) * sample_size(),
              out.data_.begin());
    return out;
  }

  bool operator==(const Tensor4& o) const { return same_shape(o) && data_ == o.data_; }

  /// RNG seed that produced this batch, when known.
  std::optional<std::uint64_t> seed_tag;

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  AlignedVector<Scalar> data_;
};

using Tensor = Tensor4<float>;
using ImageBatch = Tensor4<double>;

template <typename A, typename B>
void require_same_shape(const Tensor4<A>& a, const Tensor4<B>& b, const char* what) {
  if (a.batch() != b.batch() || a.channels() != b.channels() || a.height() != b.height() ||
      a.width() != b.width()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

template <typename To, typename From>
Tensor4<To> cast(const Tensor4<From>& x) {
  Tensor4<To> out(x.batch(), x.channels(), x.height(), x.width());
  auto src = x.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<To>(src[i]);
  out.seed_tag = x.seed_tag;
  return out;
}

/// Stack single-sample batches (all the same shape) into one batch.
template <typename Scalar>
Tensor4<Scalar> stack(std::span<const Tensor4<Scalar>> items) {
  if (items.empty()) return {};
  const auto& f = items.front();
  int total = 0;
  for (const auto& it : items) {
    if (it.channels() != f.channels() || it.height() != f.height() || it.width() != f.width())
      throw ShapeError("stack: inconsistent sample shapes");
    total += it.batch();
  }
  Tensor4<Scalar> out(total, f.channels(), f.height(), f.width());
  std::size_t off = 0;
  for (const auto& it : items) {
    std::copy(it.values().begin(), it.values().end(), out.values().begin() + off);
    off += it.size();
  }
  return out;
}

inline bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

template <typename Scalar>
bool all_finite(const Tensor4<Scalar>& x) {
  for (Scalar v : x.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace aam
