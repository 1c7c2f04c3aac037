#pragma once

#include <algorithm>
#include <atomic>
#include <array>
#include <cmath>
#include <cstddef>
#include <iostream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "memscore/error.hpp"
#include "memscore/tensor.hpp"

namespace memscore {

/// Reconstructed MemNet preprocessing: mean-image offset, ten-crop, averaged
/// crop scores, then the fixed output scaling (raw - scale_b) / scale_a.
struct LegacyPipelineConfig {
  /// Subtracted before cropping; empty means a zero image (with a warning).
  ImageTensor mean_image;
  std::size_t crop_size = 224;
  double scale_a = 1.0;
  double scale_b = 0.0;

  /// Short side after the pre-crop resize.
  std::size_t resize_short_side() const { return crop_size + 32; }
};

struct SimplePipelineConfig {
  std::size_t target_size = 32;
  std::array<double, 3> per_channel_mean{0.485, 0.456, 0.406};
  std::array<double, 3> per_channel_std{0.229, 0.224, 0.225};
};

using PipelineConfig = std::variant<SimplePipelineConfig, LegacyPipelineConfig>;

inline void validate(const LegacyPipelineConfig& c) {
  if (c.scale_a == 0.0) throw DomainError("legacy pipeline: scale_a must be nonzero");
  if (c.crop_size == 0) throw DomainError("legacy pipeline: crop_size must be positive");
}

inline void validate(const SimplePipelineConfig& c) {
  if (c.target_size == 0) throw DomainError("simple pipeline: target_size must be positive");
  for (double s : c.per_channel_std)
    if (!(s > 0.0)) throw DomainError("simple pipeline: per-channel std must be > 0");
}

/// Bilinear resize with half-pixel centers; same-size resize is an exact copy.
inline ImageTensor resize_bilinear(const ImageTensor& img, std::size_t out_h, std::size_t out_w) {
  if (img.empty() || out_h == 0 || out_w == 0) throw ShapeError("resize: empty image or target");
  if (img.h() == out_h && img.w() == out_w) return img;
  ImageTensor out(1, img.c(), out_h, out_w);
  const double sy = static_cast<double>(img.h()) / out_h, sx = static_cast<double>(img.w()) / out_w;
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.h() - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.h() - 1);
    const double wy = fy - y0;
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.w() - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.w() - 1);
      const double wx = fx - x0;
      for (std::size_t c = 0; c < img.c(); ++c) {
        const double top = img(0, c, y0, x0) * (1 - wx) + img(0, c, y0, x1) * wx;
        const double bot = img(0, c, y1, x0) * (1 - wx) + img(0, c, y1, x1) * wx;
        out(0, c, y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

inline ImageTensor crop(const ImageTensor& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
  if (top + h > img.h() || left + w > img.w()) throw ShapeError("crop window outside image");
  ImageTensor out(1, img.c(), h, w);
  for (std::size_t c = 0; c < img.c(); ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out(0, c, y, x) = img(0, c, top + y, left + x);
  return out;
}

inline ImageTensor mirror_horizontal(const ImageTensor& img) {
  ImageTensor out(img.n(), img.c(), img.h(), img.w());
  for (std::size_t i = 0; i < img.n(); ++i)
    for (std::size_t c = 0; c < img.c(); ++c)
      for (std::size_t y = 0; y < img.h(); ++y)
        for (std::size_t x = 0; x < img.w(); ++x) out(i, c, y, x) = img(i, c, y, img.w() - 1 - x);
  return out;
}

/// Ten crops in the order TL, TR, BL, BR, center, then the horizontal mirror
/// of each of those five. The center crop rounds its offset down.
inline std::vector<ImageTensor> ten_crop(const ImageTensor& img, std::size_t crop_size) {
  if (crop_size == 0 || img.h() < crop_size || img.w() < crop_size)
    throw ShapeError("ten_crop: image " + std::to_string(img.h()) + "x" + std::to_string(img.w()) +
                     " is smaller than crop " + std::to_string(crop_size));
  const std::size_t bottom = img.h() - crop_size, right = img.w() - crop_size;
  std::vector<ImageTensor> crops;
  crops.reserve(10);
  crops.push_back(crop(img, 0, 0, crop_size, crop_size));
  crops.push_back(crop(img, 0, right, crop_size, crop_size));
  crops.push_back(crop(img, bottom, 0, crop_size, crop_size));
  crops.push_back(crop(img, bottom, right, crop_size, crop_size));
  crops.push_back(crop(img, bottom / 2, right / 2, crop_size, crop_size));
  for (std::size_t i = 0; i < 5; ++i) crops.push_back(mirror_horizontal(crops[i]));
  return crops;
}

/// Resize so the short side equals `short_side`, keeping aspect ratio.
inline ImageTensor resize_short_side(const ImageTensor& img, std::size_t short_side) {
  const bool portrait = img.h() <= img.w();
  const double s = static_cast<double>(short_side) / static_cast<double>(portrait ? img.h() : img.w());
  const auto other = static_cast<std::size_t>(std::lround((portrait ? img.w() : img.h()) * s));
  return portrait ? resize_bilinear(img, short_side, other) : resize_bilinear(img, other, short_side);
}

/// The legacy transform up to (and including) the mean offset.
inline ImageTensor legacy_offset(const ImageTensor& image, const LegacyPipelineConfig& cfg) {
  validate(cfg);
  ImageTensor resized = resize_short_side(image, cfg.resize_short_side());
  if (cfg.mean_image.empty()) {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true)) std::cerr << "warning: legacy pipeline has no mean image; using a zero offset\n";
    return resized;
  }
  if (!cfg.mean_image.same_shape(resized))
    throw ShapeError("legacy pipeline: mean image " + cfg.mean_image.shape_string() +
                     " does not match resized input " + resized.shape_string());
  auto& v = resized.values();
  const auto& m = cfg.mean_image.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= m[i];
  return resized;
}

/// Averages `score` over the ten crops of the offset image and applies the
/// fixed output scaling, clipped to [0,1].
template <typename Scorer>
double legacy_forward(const ImageTensor& image, Scorer&& score, const LegacyPipelineConfig& cfg) {
  const auto crops = ten_crop(legacy_offset(image, cfg), cfg.crop_size);
  double sum = 0.0;
  for (const auto& c : crops) sum += static_cast<double>(score(c));
  const double raw = sum / static_cast<double>(crops.size());
  return std::clamp((raw - cfg.scale_b) / cfg.scale_a, 0.0, 1.0);
}

/// Square bilinear resize followed by per-channel (x - mean) / std.
inline ImageTensor simple_forward_transform(const ImageTensor& image, const SimplePipelineConfig& cfg) {
  validate(cfg);
  if (image.empty()) throw ShapeError("simple pipeline: empty image");
  if (image.c() != 3) throw ShapeError("simple pipeline expects 3 channels, got " + std::to_string(image.c()));
  ImageTensor out = resize_bilinear(image, cfg.target_size, cfg.target_size);
  const std::size_t hw = out.h() * out.w();
  for (std::size_t c = 0; c < 3; ++c) {
    float* p = out.data() + c * hw;
    const double m = cfg.per_channel_mean[c], s = cfg.per_channel_std[c];
    for (std::size_t k = 0; k < hw; ++k) p[k] = static_cast<float>((p[k] - m) / s);
  }
  return out;
}

inline std::string pipeline_kind(const PipelineConfig& p) {
  return std::holds_alternative<SimplePipelineConfig>(p) ? "simple" : "legacy";
}

/// Model input size produced by a pipeline.
inline std::size_t pipeline_output_size(const PipelineConfig& p) {
  if (const auto* s = std::get_if<SimplePipelineConfig>(&p)) return s->target_size;
  return std::get<LegacyPipelineConfig>(p).crop_size;
}

/// JSON form without the mean image, which is stored as a checkpoint tensor.
inline nlohmann::json pipeline_to_json(const PipelineConfig& p) {
  if (const auto* s = std::get_if<SimplePipelineConfig>(&p))
    return {{"kind", "simple"},
            {"target_size", s->target_size},
            {"per_channel_mean", s->per_channel_mean},
            {"per_channel_std", s->per_channel_std}};
  const auto& l = std::get<LegacyPipelineConfig>(p);
  return {{"kind", "legacy"},
          {"crop_size", l.crop_size},
          {"scale_a", l.scale_a},
          {"scale_b", l.scale_b},
          {"has_mean_image", !l.mean_image.empty()}};
}

inline PipelineConfig pipeline_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "simple") {
    SimplePipelineConfig s;
    j.at("target_size").get_to(s.target_size);
    j.at("per_channel_mean").get_to(s.per_channel_mean);
    j.at("per_channel_std").get_to(s.per_channel_std);
    validate(s);
    return s;
  }
  if (kind == "legacy") {
    LegacyPipelineConfig l;
    j.at("crop_size").get_to(l.crop_size);
    j.at("scale_a").get_to(l.scale_a);
    j.at("scale_b").get_to(l.scale_b);
    validate(l);
    return l;
  }
  throw ParseError("unknown pipeline kind '" + kind + "'");
}

/// Pipeline preset for users who recover the original MemNet scaling
/// constants; the defaults here are the identity scaling.
inline LegacyPipelineConfig legacy_demo_preset(std::size_t crop_size = 224) {
  LegacyPipelineConfig c;
  c.crop_size = crop_size;
  c.scale_a = 1.0;
  c.scale_b = 0.0;
  return c;
}

}  // namespace memscore
