#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "memscore/error.hpp"

namespace memscore {

/// Dense NCHW tensor. A single image is a tensor with n == 1; flat feature
/// vectors use h == w == 1.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : n_(n), c_(c), h_(h), w_(w), data_(n * c * h * w, fill) {}

  std::size_t n() const { return n_; }
  std::size_t c() const { return c_; }
  std::size_t h() const { return h_; }
  std::size_t w() const { return w_; }
  std::size_t size() const { return data_.size(); }
  /// Elements per sample.
  std::size_t sample_size() const { return c_ * h_ * w_; }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  T& operator()(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) {
    return data_[((i * c_ + ch) * h_ + y) * w_ + x];
  }
  const T& operator()(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) const {
    return data_[((i * c_ + ch) * h_ + y) * w_ + x];
  }

  std::span<T> sample(std::size_t i) { return {data_.data() + i * sample_size(), sample_size()}; }
  std::span<const T> sample(std::size_t i) const {
    return {data_.data() + i * sample_size(), sample_size()};
  }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  std::string shape_string() const {
    return std::to_string(n_) + "x" + std::to_string(c_) + "x" + std::to_string(h_) + "x" +
           std::to_string(w_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Reinterpret as (n, c*h*w, 1, 1).
  Tensor flattened() const {
    Tensor out = *this;
    out.c_ = sample_size();
    out.h_ = out.w_ = 1;
    return out;
  }

  Tensor reshaped(std::size_t c, std::size_t h, std::size_t w) const {
    if (c * h * w != sample_size()) throw ShapeError("reshape changes element count");
    Tensor out = *this;
    out.c_ = c;
    out.h_ = h;
    out.w_ = w;
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(n_, c_, h_, w_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  std::size_t n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<T> data_;
};

/// Single image, pixel values in [0,1] before normalization.
using ImageTensor = Tensor<float>;

inline ImageTensor make_image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f) {
  return ImageTensor(1, c, h, w, fill);
}

/// Stack single-sample tensors of identical shape into one batch.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) return {};
  const auto& f = items.front();
  Tensor<T> out(items.size(), f.c(), f.h(), f.w());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (it.n() != 1 || it.c() != f.c() || it.h() != f.h() || it.w() != f.w())
      throw ShapeError("stack: sample " + std::to_string(i) + " has shape " + it.shape_string() +
                       ", expected 1x" + std::to_string(f.c()) + "x" + std::to_string(f.h()) +
                       "x" + std::to_string(f.w()));
    std::copy(it.data(), it.data() + it.size(), out.sample(i).data());
  }
  return out;
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  return stack(std::span<const Tensor<T>>(items));
}

template <typename T>
Tensor<T> take_sample(const Tensor<T>& batch, std::size_t i) {
  Tensor<T> out(1, batch.c(), batch.h(), batch.w());
  auto s = batch.sample(i);
  std::copy(s.begin(), s.end(), out.data());
  return out;
}

}  // namespace memscore
