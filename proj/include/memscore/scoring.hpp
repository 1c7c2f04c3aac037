#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "memscore/datasets.hpp"
#include "memscore/image_io.hpp"
#include "memscore/models.hpp"
#include "memscore/preprocess.hpp"

namespace memscore {

/// Model input for one raw image. The simple pipeline resizes and normalizes;
/// the legacy pipeline (used for training only through this path) takes the
/// centre crop of the mean-offset image.
inline ImageTensor prepare_input(const ImageTensor& raw, const PipelineConfig& pipeline) {
  if (const auto* s = std::get_if<SimplePipelineConfig>(&pipeline)) return simple_forward_transform(raw, *s);
  const auto& l = std::get<LegacyPipelineConfig>(pipeline);
  return ten_crop(legacy_offset(raw, l), l.crop_size)[4];
}

/// Memorability score of a raw image through the pipeline, clipped to [0,1].
/// This is the one scoring path shared by evaluation, the CLI and the service.
inline double score_image(const Model<float>& model, const PipelineConfig& pipeline, const ImageTensor& raw) {
  if (const auto* s = std::get_if<SimplePipelineConfig>(&pipeline)) {
    const double raw_score = model.score(simple_forward_transform(raw, *s));
    return std::clamp(raw_score, 0.0, 1.0);
  }
  return legacy_forward(raw, [&](const ImageTensor& crop) { return model.score(crop); },
                        std::get<LegacyPipelineConfig>(pipeline));
}

/// Preprocessed model inputs with their targets.
struct ImageSet {
  std::vector<std::string> refs;
  std::vector<ImageTensor> inputs;
  std::vector<double> scores;

  std::size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }
};

/// Resolves an image_ref against the manifest directory.
inline std::filesystem::path resolve_ref(const std::filesystem::path& root, const std::string& ref) {
  const std::filesystem::path p(ref);
  return p.is_absolute() ? p : root / p;
}

inline ImageSet load_image_set(const DatasetManifest& m, const std::filesystem::path& root,
                               const PipelineConfig& pipeline) {
  ImageSet s;
  for (const auto& r : m.records) {
    s.refs.push_back(r.image_ref);
    s.inputs.push_back(prepare_input(load_image(resolve_ref(root, r.image_ref)), pipeline));
    s.scores.push_back(r.score);
  }
  return s;
}

/// Image set from in-memory raw images aligned with manifest records.
inline ImageSet make_image_set(const DatasetManifest& m, const std::vector<ImageTensor>& raw,
                               const PipelineConfig& pipeline) {
  if (raw.size() != m.size()) throw ValidationError("make_image_set: image count differs from manifest");
  ImageSet s;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    s.refs.push_back(m.records[i].image_ref);
    s.inputs.push_back(prepare_input(raw[i], pipeline));
    s.scores.push_back(m.records[i].score);
  }
  return s;
}

inline ImageSet subset(const ImageSet& s, const std::vector<std::size_t>& idx) {
  ImageSet out;
  for (auto i : idx) {
    out.refs.push_back(s.refs.at(i));
    out.inputs.push_back(s.inputs.at(i));
    out.scores.push_back(s.scores.at(i));
  }
  return out;
}

/// Batched raw model outputs for already-prepared inputs.
template <typename T>
std::vector<double> predict(const Model<T>& model, const std::vector<Tensor<T>>& inputs, std::size_t batch = 64) {
  std::vector<double> out;
  out.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += batch) {
    const std::size_t end = std::min(inputs.size(), start + batch);
    const auto y = model.forward(stack(std::span<const Tensor<T>>(inputs.data() + start, end - start)));
    out.insert(out.end(), y.begin(), y.end());
  }
  return out;
}

}  // namespace memscore
