#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "memscore/error.hpp"
#include "memscore/rng.hpp"
#include "memscore/tensor.hpp"

namespace memscore::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using VectorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;

struct Shape {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t size() const { return c * h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

template <typename T>
struct Param {
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool frozen = false;

  Param() = default;
  explicit Param(std::vector<std::size_t> s) : shape(std::move(s)) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    value.assign(n, T(0));
    grad.assign(n, T(0));
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
struct NamedParam {
  std::string name;
  Param<T>* param;
};

/// Whatever a layer needs to keep from forward for its backward pass.
template <typename T>
struct Cache {
  Tensor<T> input;
  Tensor<T> output;
  std::vector<std::size_t> index;
  std::vector<Cache> children;
};

struct BackwardMode {
  bool input_grad = true;
  bool param_grads = true;
};

/// He fan-in normal init for weights, zero bias.
template <typename T>
void he_init(Param<T>& weight, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : weight.value) v = static_cast<T>(rng.normal(0.0, stddev));
}

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const = 0;
  /// Accumulates parameter gradients (when mode.param_grads) and returns the
  /// input gradient (empty when !mode.input_grad).
  virtual Tensor<T> backward(const Tensor<T>& dy, const Cache<T>& cache, BackwardMode mode) = 0;
  virtual void collect(const std::string& /*prefix*/, std::vector<NamedParam<T>>& /*out*/) {}
  virtual void init(Rng& /*rng*/) {}
  virtual std::unique_ptr<Layer> clone() const = 0;
  /// Channel count of the output, for filter addressing.
  std::size_t channels(const Shape& in) const { return output_shape(in).c; }
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

namespace detail {

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) throw ShapeError("convolution kernel larger than padded input");
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* cols) {
  const std::size_t p = ho * wo;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = x + ch * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((ch * k + ky) * k + kx) * p;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* dx) {
  const std::size_t p = ho * wo;
  for (std::size_t ch = 0; ch < c; ++ch) {
    T* plane = dx + ch * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ch * k + ky) * k + kx) * p;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * w;
          const T* src = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution, square kernel, zero padding. Weight layout {out, in, k, k}.
template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride = 1, std::size_t pad = 0)
      : in_(in_channels),
        out_(out_channels),
        k_(kernel),
        stride_(stride),
        pad_(pad),
        weight_({out_channels, in_channels, kernel, kernel}),
        bias_({out_channels}) {
    if (!in_ || !out_ || !k_ || !stride_) throw ShapeError("conv2d: zero-sized configuration");
  }

  std::string kind() const override { return "conv2d"; }
  std::size_t in_channels() const { return in_; }
  std::size_t out_channels() const { return out_; }
  std::size_t kernel() const { return k_; }
  std::size_t stride() const { return stride_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  const Param<T>& weight() const { return weight_; }
  const Param<T>& bias() const { return bias_; }

  Shape output_shape(const Shape& in) const override {
    if (in.c != in_)
      throw ShapeError("conv2d expects " + std::to_string(in_) + " channels, got " +
                       std::to_string(in.c));
    return {out_, detail::conv_out(in.h, k_, stride_, pad_), detail::conv_out(in.w, k_, stride_, pad_)};
  }

  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    const Shape os = output_shape({x.c(), x.h(), x.w()});
    const std::size_t kdim = in_ * k_ * k_, p = os.h * os.w;
    Tensor<T> y(x.n(), os.c, os.h, os.w);
    std::vector<T> cols(kdim * p);
    ConstMatrixMap<T> wm(weight_.value.data(), out_, kdim);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias_.value.data(), out_);
    for (std::size_t i = 0; i < x.n(); ++i) {
      detail::im2col(x.sample(i).data(), in_, x.h(), x.w(), k_, stride_, pad_, os.h, os.w, cols.data());
      MatrixMap<T> ym(y.sample(i).data(), out_, p);
      ym.noalias() = wm * ConstMatrixMap<T>(cols.data(), kdim, p);
      ym.colwise() += b;
    }
    cache.input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache<T>& cache, BackwardMode mode) override {
    const Tensor<T>& x = cache.input;
    const std::size_t ho = dy.h(), wo = dy.w(), p = ho * wo, kdim = in_ * k_ * k_;
    std::vector<T> cols(kdim * p);
    Tensor<T> dx;
    if (mode.input_grad) dx = Tensor<T>(x.n(), x.c(), x.h(), x.w());
    MatrixMap<T> dw(weight_.grad.data(), out_, kdim);
    VectorMap<T> db(bias_.grad.data(), out_);
    ConstMatrixMap<T> wm(weight_.value.data(), out_, kdim);
    for (std::size_t i = 0; i < x.n(); ++i) {
      ConstMatrixMap<T> dym(dy.sample(i).data(), out_, p);
      if (mode.param_grads) {
        detail::im2col(x.sample(i).data(), in_, x.h(), x.w(), k_, stride_, pad_, ho, wo, cols.data());
        dw.noalias() += dym * ConstMatrixMap<T>(cols.data(), kdim, p).transpose();
        // Plain loops keep the summation order independent of buffer alignment.
        const T* g = dy.sample(i).data();
        for (std::size_t o = 0; o < out_; ++o) {
          T acc = 0;
          for (std::size_t q = 0; q < p; ++q) acc += g[o * p + q];
          db[o] += acc;
        }
      }
      if (mode.input_grad) {
        MatrixMap<T>(cols.data(), kdim, p).noalias() = wm.transpose() * dym;
        detail::col2im(cols.data(), in_, x.h(), x.w(), k_, stride_, pad_, ho, wo, dx.sample(i).data());
      }
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + "weight", &weight_});
    out.push_back({prefix + "bias", &bias_});
  }

  void init(Rng& rng) override {
    he_init(weight_, in_ * k_ * k_, rng);
    std::fill(bias_.value.begin(), bias_.value.end(), T(0));
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }

 private:
  std::size_t in_, out_, k_, stride_, pad_;
  Param<T> weight_, bias_;
};

/// Fully connected layer over the flattened sample. Weight layout {out, in}.
template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(std::size_t in_features, std::size_t out_features)
      : in_(in_features), out_(out_features), weight_({out_features, in_features}), bias_({out_features}) {
    if (!in_ || !out_) throw ShapeError("linear: zero-sized configuration");
  }

  std::string kind() const override { return "linear"; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != in_)
      throw ShapeError("linear expects " + std::to_string(in_) + " inputs, got " + std::to_string(in.size()));
    return {out_, 1, 1};
  }

  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    output_shape({x.c(), x.h(), x.w()});
    Tensor<T> y(x.n(), out_, 1, 1);
    ConstMatrixMap<T> xm(x.data(), x.n(), in_);
    ConstMatrixMap<T> wm(weight_.value.data(), out_, in_);
    MatrixMap<T> ym(y.data(), x.n(), out_);
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias_.value.data(), out_);
    cache.input = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache<T>& cache, BackwardMode mode) override {
    const Tensor<T>& x = cache.input;
    ConstMatrixMap<T> dym(dy.data(), x.n(), out_);
    if (mode.param_grads) {
      MatrixMap<T>(weight_.grad.data(), out_, in_).noalias() +=
          dym.transpose() * ConstMatrixMap<T>(x.data(), x.n(), in_);
      for (std::size_t r = 0; r < x.n(); ++r)
        for (std::size_t o = 0; o < out_; ++o) bias_.grad[o] += dy.data()[r * out_ + o];
    }
    Tensor<T> dx;
    if (mode.input_grad) {
      dx = Tensor<T>(x.n(), x.c(), x.h(), x.w());
      MatrixMap<T>(dx.data(), x.n(), in_).noalias() =
          dym * ConstMatrixMap<T>(weight_.value.data(), out_, in_);
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    out.push_back({prefix + "weight", &weight_});
    out.push_back({prefix + "bias", &bias_});
  }

  void init(Rng& rng) override {
    he_init(weight_, in_, rng);
    std::fill(bias_.value.begin(), bias_.value.end(), T(0));
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Linear>(*this); }

 private:
  std::size_t in_, out_;
  Param<T> weight_, bias_;
};

template <typename T>
class Relu final : public Layer<T> {
 public:
  std::string kind() const override { return "relu"; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    Tensor<T> y = x;
    for (auto& v : y.values()) v = v > T(0) ? v : T(0);
    cache.output = y;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache<T>& cache, BackwardMode mode) override {
    if (!mode.input_grad) return {};
    Tensor<T> dx = dy;
    const auto& y = cache.output.values();
    auto& d = dx.values();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (!(y[i] > T(0))) d[i] = T(0);
    return dx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Relu>(*this); }
};

template <typename T>
class Sigmoid final : public Layer<T> {
 public:
  std::string kind() const override { return "sigmoid"; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    Tensor<T> y = x;
    for (auto& v : y.values()) v = T(1) / (T(1) + std::exp(-v));
    cache.output = y;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache<T>& cache, BackwardMode mode) override {
    if (!mode.input_grad) return {};
    Tensor<T> dx = dy;
    const auto& y = cache.output.values();
    auto& d = dx.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= y[i] * (T(1) - y[i]);
    return dx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Sigmoid>(*this); }
};

/// Softmax across channels at every pixel (per-pixel class probabilities).
template <typename T>
class ChannelSoftmax final : public Layer<T> {
 public:
  std::string kind() const override { return "softmax"; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    Tensor<T> y(x.n(), x.c(), x.h(), x.w());
    const std::size_t hw = x.h() * x.w();
    for (std::size_t i = 0; i < x.n(); ++i) {
      const T* src = x.sample(i).data();
      T* dst = y.sample(i).data();
      for (std::size_t p = 0; p < hw; ++p) {
        T m = -std::numeric_limits<T>::infinity();
        for (std::size_t ch = 0; ch < x.c(); ++ch) m = std::max(m, src[ch * hw + p]);
        T z = 0;
        for (std::size_t ch = 0; ch < x.c(); ++ch) z += dst[ch * hw + p] = std::exp(src[ch * hw + p] - m);
        for (std::size_t ch = 0; ch < x.c(); ++ch) dst[ch * hw + p] /= z;
      }
    }
    cache.output = y;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache<T>& cache, BackwardMode mode) override {
    if (!mode.input_grad) return {};
    const Tensor<T>& y = cache.output;
    Tensor<T> dx(y.n(), y.c(), y.h(), y.w());
    const std::size_t hw = y.h() * y.w();
    for (std::size_t i = 0; i < y.n(); ++i) {
      const T* ys = y.sample(i).data();
      const T* gs = dy.sample(i).data();
      T* ds = dx.sample(i).data();
      for (std::size_t p = 0; p < hw; ++p) {
        T dot = 0;
        for (std::size_t ch = 0; ch < y.c(); ++ch) dot += ys[ch * hw + p] * gs[ch * hw + p];
        for (std::size_t ch = 0; ch < y.c(); ++ch) ds[ch * hw + p] = ys[ch * hw + p] * (gs[ch * hw + p] - dot);
      }
    }
    return dx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ChannelSoftmax>(*this); }
};

/// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
template <typename T>
class MaxPool2 final : public Layer<T> {
 public:
  std::string kind() const override { return "maxpool"; }
  Shape output_shape(const Shape& in) const override {
    if (in.h < 2 || in.w < 2) throw ShapeError("maxpool input smaller than 2x2");
    return {in.c, in.h / 2, in.w / 2};
  }

  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    const Shape os = output_shape({x.c(), x.h(), x.w()});
    Tensor<T> y(x.n(), os.c, os.h, os.w);
    cache.index.assign(y.size(), 0);
    std::size_t o = 0;
    for (std::size_t i = 0; i < x.n(); ++i)
      for (std::size_t ch = 0; ch < x.c(); ++ch)
        for (std::size_t oy = 0; oy < os.h; ++oy)
          for (std::size_t ox = 0; ox < os.w; ++ox, ++o) {
            std::size_t best = ((i * x.c() + ch) * x.h() + 2 * oy) * x.w() + 2 * ox;
            T bv = x.data()[best];
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t idx = ((i * x.c() + ch) * x.h() + 2 * oy + dy) * x.w() + 2 * ox + dx;
                if (x.data()[idx] > bv) {
                  bv = x.data()[idx];
                  best = idx;
                }
              }
            y.data()[o] = bv;
            cache.index[o] = best;
          }
    cache.input = Tensor<T>(x.n(), x.c(), x.h(), x.w());  // shape only, for dx
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache<T>& cache, BackwardMode mode) override {
    if (!mode.input_grad) return {};
    const Tensor<T>& xs = cache.input;
    Tensor<T> dx(xs.n(), xs.c(), xs.h(), xs.w());
    for (std::size_t o = 0; o < dy.size(); ++o) dx.data()[cache.index[o]] += dy.data()[o];
    return dx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2>(*this); }
};

template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  std::string kind() const override { return "avgpool"; }
  Shape output_shape(const Shape& in) const override { return {in.c, 1, 1}; }

  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    Tensor<T> y(x.n(), x.c(), 1, 1);
    const std::size_t hw = x.h() * x.w();
    for (std::size_t i = 0; i < x.n(); ++i)
      for (std::size_t ch = 0; ch < x.c(); ++ch) {
        const T* p = x.data() + (i * x.c() + ch) * hw;
        T s = 0;
        for (std::size_t k = 0; k < hw; ++k) s += p[k];
        y(i, ch, 0, 0) = s / static_cast<T>(hw);
      }
    cache.input = Tensor<T>(x.n(), x.c(), x.h(), x.w());
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache<T>& cache, BackwardMode mode) override {
    if (!mode.input_grad) return {};
    const Tensor<T>& xs = cache.input;
    Tensor<T> dx(xs.n(), xs.c(), xs.h(), xs.w());
    const std::size_t hw = xs.h() * xs.w();
    for (std::size_t i = 0; i < xs.n(); ++i)
      for (std::size_t ch = 0; ch < xs.c(); ++ch) {
        const T g = dy(i, ch, 0, 0) / static_cast<T>(hw);
        T* p = dx.data() + (i * xs.c() + ch) * hw;
        std::fill(p, p + hw, g);
      }
    return dx;
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }
};

/// relu(conv_b(relu(conv_a(x))) + shortcut(x)); the shortcut is the identity
/// when input and output shapes agree, otherwise a strided 1x1 projection.
template <typename T>
class ResidualBlock final : public Layer<T> {
 public:
  ResidualBlock(std::size_t in_channels, std::size_t out_channels, std::size_t stride = 1)
      : conv_a_(in_channels, out_channels, 3, stride, 1), conv_b_(out_channels, out_channels, 3, 1, 1) {
    if (in_channels != out_channels || stride != 1)
      proj_ = std::make_unique<Conv2d<T>>(in_channels, out_channels, 1, stride, 0);
  }
  ResidualBlock(const ResidualBlock& o)
      : conv_a_(o.conv_a_), conv_b_(o.conv_b_), proj_(o.proj_ ? std::make_unique<Conv2d<T>>(*o.proj_) : nullptr) {}

  std::string kind() const override { return "residual"; }
  bool identity_shortcut() const { return proj_ == nullptr; }
  Conv2d<T>& conv_a() { return conv_a_; }
  Conv2d<T>& conv_b() { return conv_b_; }
  Conv2d<T>* projection() { return proj_.get(); }

  Shape output_shape(const Shape& in) const override {
    return conv_b_.output_shape(conv_a_.output_shape(in));
  }

  Tensor<T> forward(const Tensor<T>& x, Cache<T>& cache) const override {
    cache.children.resize(4);
    Tensor<T> a = conv_a_.forward(x, cache.children[0]);
    a = relu_.forward(a, cache.children[1]);
    Tensor<T> out = conv_b_.forward(a, cache.children[2]);
    if (proj_) {
      const Tensor<T> s = proj_->forward(x, cache.children[3]);
      add_into(out, s);
    } else {
      add_into(out, x);
    }
    Cache<T> tmp;
    out = relu_.forward(out, tmp);
    cache.output = std::move(tmp.output);
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache<T>& cache, BackwardMode mode) override {
    Cache<T> out_cache;
    out_cache.output = cache.output;
    const BackwardMode inner{true, mode.param_grads};
    Tensor<T> dsum = relu_.backward(dy, out_cache, inner);
    Tensor<T> da = conv_b_.backward(dsum, cache.children[2], inner);
    da = relu_.backward(da, cache.children[1], inner);
    Tensor<T> dx = conv_a_.backward(da, cache.children[0], mode);
    if (proj_) {
      Tensor<T> ds = proj_->backward(dsum, cache.children[3], mode);
      if (mode.input_grad) add_into(dx, ds);
    } else if (mode.input_grad) {
      add_into(dx, dsum);
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override {
    conv_a_.collect(prefix + "conv_a.", out);
    conv_b_.collect(prefix + "conv_b.", out);
    if (proj_) proj_->collect(prefix + "proj.", out);
  }

  void init(Rng& rng) override {
    conv_a_.init(rng);
    conv_b_.init(rng);
    if (proj_) proj_->init(rng);
  }

  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ResidualBlock>(*this); }

 private:
  static void add_into(Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("residual add: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
    auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
  }

  Conv2d<T> conv_a_, conv_b_;
  std::unique_ptr<Conv2d<T>> proj_;
  Relu<T> relu_;
};

/// Ordered chain of named layers. Layer outputs are addressable by name.
template <typename T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& o) : names_(o.names_) {
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& o) {
    if (this != &o) *this = Sequential(o);
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  Sequential& add(std::string name, LayerPtr<T> layer) {
    names_.push_back(std::move(name));
    layers_.push_back(std::move(layer));
    return *this;
  }
  template <typename L, typename... Args>
  Sequential& emplace(std::string name, Args&&... args) {
    return add(std::move(name), std::make_unique<L>(std::forward<Args>(args)...));
  }

  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }

  /// Index of the layer called `name`, or size() when absent.
  std::size_t find(const std::string& name) const {
    return static_cast<std::size_t>(std::find(names_.begin(), names_.end(), name) - names_.begin());
  }

  Shape output_shape(Shape in, std::size_t upto) const {
    for (std::size_t i = 0; i <= upto && i < layers_.size(); ++i) in = layers_[i]->output_shape(in);
    return in;
  }
  Shape output_shape(const Shape& in) const { return output_shape(in, layers_.size()); }

  /// Runs layers [0, upto]; caches must outlive the matching backward call.
  Tensor<T> forward(const Tensor<T>& x, std::vector<Cache<T>>& caches, std::size_t upto) const {
    const std::size_t end = std::min(upto + 1, layers_.size());
    caches.assign(end, {});
    Tensor<T> h = x;
    for (std::size_t i = 0; i < end; ++i) h = layers_[i]->forward(h, caches[i]);
    return h;
  }
  Tensor<T> forward(const Tensor<T>& x, std::vector<Cache<T>>& caches) const {
    return forward(x, caches, layers_.size());
  }
  Tensor<T> forward(const Tensor<T>& x) const {
    std::vector<Cache<T>> caches;
    return forward(x, caches);
  }

  /// Backpropagates from the output of the last cached layer to the input.
  Tensor<T> backward(const Tensor<T>& dy, const std::vector<Cache<T>>& caches, BackwardMode mode) {
    Tensor<T> g = dy;
    for (std::size_t i = caches.size(); i-- > 0;) {
      const BackwardMode m{i > 0 || mode.input_grad, mode.param_grads};
      g = layers_[i]->backward(g, caches[i], m);
    }
    return g;
  }

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->collect(prefix + names_[i] + ".", out);
  }

  void init(Rng& rng) {
    for (auto& l : layers_) l->init(rng);
  }

 private:
  std::vector<std::string> names_;
  std::vector<LayerPtr<T>> layers_;
};

}  // namespace memscore::nn
