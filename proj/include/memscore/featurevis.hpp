#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "memscore/error.hpp"
#include "memscore/image_io.hpp"
#include "memscore/models.hpp"
#include "memscore/preprocess.hpp"
#include "memscore/rng.hpp"
#include "memscore/scoring.hpp"

namespace memscore {

struct FeatureSpec {
  std::string layer_id;
  std::size_t filter_index = 0;
};

/// Throws if the layer cannot be resolved or the filter is out of range.
template <typename T>
void validate(const FeatureSpec& spec, const Model<T>& model) {
  const auto s = model.layer_shape(spec.layer_id);
  if (spec.filter_index >= s.c)
    throw ValidationError("filter " + std::to_string(spec.filter_index) + " out of range for '" + spec.layer_id +
                          "' with " + std::to_string(s.c) + " channels");
}

struct VisConfig {
  std::size_t steps = 200;
  /// Largest per-pixel change in one step; halved whenever a step would lower the activation.
  double step_size = 0.05;
  /// Maximum random roll in pixels applied before each gradient evaluation.
  std::size_t jitter = 0;
  double l2_decay = 0.0;
  std::uint64_t seed = 0;
  /// Initial noise is uniform on [0, init_range).
  double init_range = 0.1;
};

inline void validate(const VisConfig& c) {
  if (c.steps < 1) throw DomainError("vis: steps must be >= 1");
  if (!(c.step_size >= 0.0)) throw DomainError("vis: step_size must be >= 0");
  if (!(c.l2_decay >= 0.0 && c.l2_decay < 1.0)) throw DomainError("vis: l2_decay must lie in [0,1)");
  if (!(c.init_range > 0.0 && c.init_range <= 1.0)) throw DomainError("vis: init_range must lie in (0,1]");
}

/// Per-channel affine map from pixel space to model input space.
struct InputNormalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};

  static InputNormalization from(const PipelineConfig& p) {
    if (const auto* s = std::get_if<SimplePipelineConfig>(&p)) return {s->per_channel_mean, s->per_channel_std};
    return {};
  }
};

struct VisResult {
  /// Pixel-space image in [0,1].
  ImageTensor image;
  /// Activation of the un-jittered image: initial value, then one entry per step.
  std::vector<double> trace;
};

namespace detail {

inline ImageTensor roll(const ImageTensor& img, long dy, long dx) {
  ImageTensor out(img.n(), img.c(), img.h(), img.w());
  const long h = static_cast<long>(img.h()), w = static_cast<long>(img.w());
  for (std::size_t i = 0; i < img.n(); ++i)
    for (std::size_t c = 0; c < img.c(); ++c)
      for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x)
          out(i, c, static_cast<std::size_t>(((y + dy) % h + h) % h), static_cast<std::size_t>(((x + dx) % w + w) % w)) =
              img(i, c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  return out;
}

inline ImageTensor normalize(const ImageTensor& px, const InputNormalization& norm) {
  ImageTensor x = px;
  const std::size_t hw = px.h() * px.w();
  for (std::size_t c = 0; c < px.c(); ++c) {
    const auto m = static_cast<float>(norm.mean[c % 3]), s = static_cast<float>(norm.std[c % 3]);
    float* p = x.data() + c * hw;
    for (std::size_t k = 0; k < hw; ++k) p[k] = (p[k] - m) / s;
  }
  return x;
}

}  // namespace detail

/// Mean activation of the filter for a pixel-space image, plus its gradient
/// with respect to the pixels when requested.
inline std::pair<double, ImageTensor> pixel_activation(Model<float>& model, const FeatureSpec& spec,
                                                       const ImageTensor& px, const InputNormalization& norm,
                                                       bool want_grad) {
  auto [values, dx] = model.filter_activation(detail::normalize(px, norm), spec.layer_id, spec.filter_index, want_grad);
  if (want_grad) {
    const std::size_t hw = px.h() * px.w();
    for (std::size_t c = 0; c < px.c(); ++c) {
      const auto s = static_cast<float>(norm.std[c % 3]);
      float* p = dx.data() + c * hw;
      for (std::size_t k = 0; k < hw; ++k) p[k] /= s;
    }
  }
  return {static_cast<double>(values.at(0)), std::move(dx)};
}

/// Gradient ascent on the input pixels to maximize the filter's spatial-mean
/// activation. Steps that would lower the activation are retried at half the
/// step size, so the trace never decreases.
inline VisResult activation_maximize(Model<float>& model, const FeatureSpec& spec, const VisConfig& cfg,
                                     const InputNormalization& norm = {}) {
  validate(cfg);
  validate(spec, model);
  const auto& mc = model.config();
  Rng rng(cfg.seed);
  ImageTensor px(1, mc.input_channels, mc.input_size, mc.input_size);
  for (auto& v : px.values()) v = static_cast<float>(rng.uniform(0.0, cfg.init_range));

  VisResult res;
  double current = pixel_activation(model, spec, px, norm, false).first;
  res.trace.push_back(current);
  double lr = cfg.step_size;
  std::size_t zero_run = 0;
  constexpr std::size_t kDeadLimit = 50;
  constexpr int kMaxHalvings = 30;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    long dy = 0, dx = 0;
    if (cfg.jitter > 0) {
      const auto span = 2 * cfg.jitter + 1;
      dy = static_cast<long>(rng.below(span)) - static_cast<long>(cfg.jitter);
      dx = static_cast<long>(rng.below(span)) - static_cast<long>(cfg.jitter);
    }
    const ImageTensor shifted = (dy || dx) ? detail::roll(px, dy, dx) : px;
    ImageTensor grad = pixel_activation(model, spec, shifted, norm, true).second;
    if (dy || dx) grad = detail::roll(grad, -dy, -dx);

    float gmax = 0.0f;
    for (float g : grad.values()) gmax = std::max(gmax, std::abs(g));
    if (gmax == 0.0f) {
      if (++zero_run > kDeadLimit)
        throw DeadFilterError("dead filter: zero gradient for " + std::to_string(zero_run) + " consecutive steps at '" +
                              spec.layer_id + "' filter " + std::to_string(spec.filter_index));
      res.trace.push_back(current);
      continue;
    }
    zero_run = 0;

    // A step rejected at every size leaves the image unchanged.
    for (int attempt = 0; attempt <= kMaxHalvings; ++attempt) {
      ImageTensor cand = px;
      const auto keep = static_cast<float>(1.0 - cfg.l2_decay), scale = static_cast<float>(lr) / gmax;
      for (std::size_t i = 0; i < cand.size(); ++i)
        cand.data()[i] = std::clamp(keep * cand.data()[i] + scale * grad.data()[i], 0.0f, 1.0f);
      const double value = pixel_activation(model, spec, cand, norm, false).first;
      if (value >= current) {
        px = std::move(cand);
        current = value;
        break;
      }
      lr *= 0.5;
    }
    res.trace.push_back(current);
  }
  res.image = std::move(px);
  return res;
}

struct ActivationHit {
  std::string image_ref;
  double activation = 0;
  std::size_t index = 0;
};

/// Top-k images by mean filter activation, descending; ties keep set order.
inline std::vector<ActivationHit> max_activating_images(Model<float>& model, const FeatureSpec& spec,
                                                        const ImageSet& images, std::size_t k,
                                                        std::size_t batch = 64) {
  if (images.empty()) throw ValidationError("max_activating_images: empty image set");
  if (k < 1) throw DomainError("max_activating_images: k must be >= 1");
  validate(spec, model);
  std::vector<double> act;
  act.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t end = std::min(images.size(), start + batch);
    const auto x = stack(std::span<const ImageTensor>(images.inputs.data() + start, end - start));
    const auto values = model.filter_activation(x, spec.layer_id, spec.filter_index, false).first;
    act.insert(act.end(), values.begin(), values.end());
  }
  std::vector<std::size_t> order(act.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return act[a] > act[b]; });
  order.resize(std::min(k, order.size()));
  std::vector<ActivationHit> out;
  for (auto i : order) out.push_back({images.refs[i], act[i], i});
  return out;
}

inline std::vector<ActivationHit> max_activating_images(Model<float>& model, const FeatureSpec& spec,
                                                        const DatasetManifest& m, const std::filesystem::path& root,
                                                        const PipelineConfig& pipeline, std::size_t k) {
  if (m.empty()) throw ValidationError("max_activating_images: empty manifest");
  validate(spec, model);
  return max_activating_images(model, spec, load_image_set(m, root, pipeline), k);
}

struct GridLayout {
  std::size_t cols = 0, rows = 0;
};

inline constexpr std::size_t kGridColumns = 5;

inline GridLayout grid_layout(std::size_t n_images) {
  if (n_images == 0) throw ValidationError("render_grid: need at least one image");
  const std::size_t cols = std::min(n_images, kGridColumns);
  return {cols, (n_images + kGridColumns - 1) / kGridColumns};
}

/// Tiles images five to a row with a label strip under each cell. Missing
/// cells in the last row stay blank (white).
inline cv::Mat render_grid_mat(const std::vector<ImageTensor>& images, const std::vector<std::string>& labels,
                               std::size_t min_cell = 96) {
  const auto layout = grid_layout(images.size());
  std::size_t cell = min_cell;
  for (const auto& im : images) cell = std::max({cell, im.h(), im.w()});
  const int pad = 4, label_h = labels.empty() ? 0 : 16;
  const int cw = static_cast<int>(cell) + 2 * pad, ch = static_cast<int>(cell) + 2 * pad + label_h;
  cv::Mat canvas(static_cast<int>(layout.rows) * ch, static_cast<int>(layout.cols) * cw, CV_8UC3,
                 cv::Scalar(255, 255, 255));
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int r = static_cast<int>(i / kGridColumns), c = static_cast<int>(i % kGridColumns);
    cv::Mat tile = to_mat(images[i]);
    if (tile.channels() == 1) cv::cvtColor(tile, tile, cv::COLOR_GRAY2BGR);
    cv::resize(tile, tile, cv::Size(static_cast<int>(cell), static_cast<int>(cell)), 0, 0, cv::INTER_NEAREST);
    tile.copyTo(canvas(cv::Rect(c * cw + pad, r * ch + pad, tile.cols, tile.rows)));
    if (i < labels.size())
      cv::putText(canvas, labels[i], cv::Point(c * cw + pad, r * ch + pad + static_cast<int>(cell) + 12),
                  cv::FONT_HERSHEY_PLAIN, 0.8, cv::Scalar(0, 0, 0), 1, cv::LINE_8);
  }
  return canvas;
}

inline GridLayout render_grid(const std::vector<ImageTensor>& images, const std::vector<std::string>& labels,
                              const std::filesystem::path& path) {
  const auto layout = grid_layout(images.size());
  const cv::Mat canvas = render_grid_mat(images, labels);
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), canvas);
  } catch (const cv::Exception&) {
  }
  if (!ok) throw Error("cannot write grid image '" + path.string() + "'");
  return layout;
}

inline nlohmann::json vis_sidecar(const FeatureSpec& spec, const VisResult& r) {
  return {{"layer_id", spec.layer_id},
          {"filter_index", spec.filter_index},
          {"initial_activation", r.trace.front()},
          {"final_activation", r.trace.back()}};
}

}  // namespace memscore
