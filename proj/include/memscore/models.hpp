#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "memscore/error.hpp"
#include "memscore/nn/layers.hpp"
#include "memscore/rng.hpp"
#include "memscore/tensor.hpp"

namespace memscore {

enum class Variant { memnet, resmem, m3m };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::memnet: return "memnet";
    case Variant::resmem: return "resmem";
    case Variant::m3m: return "m3m";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "memnet") return Variant::memnet;
  if (s == "resmem") return Variant::resmem;
  if (s == "m3m") return Variant::m3m;
  throw DomainError("unknown variant '" + s + "' (expected memnet, resmem or m3m)");
}

/// AlexNet-style convolutional trunk plus the 3-layer MemNet head.
struct ConvFeatureConfig {
  std::vector<std::size_t> channels;
  std::vector<std::size_t> kernels;
  std::vector<std::size_t> strides;
  std::vector<std::size_t> pads;
  std::vector<bool> pooling;
  /// Output widths of the three fully connected layers; the last one is 1.
  std::vector<std::size_t> fc_widths;

  std::size_t n_conv_layers() const { return channels.size(); }
};

struct ResidualBackboneConfig {
  /// Stem conv + 2 convs per residual block + final fully connected layer.
  std::size_t depth = 10;
  std::size_t feature_dim = 64;
  std::size_t base_channels = 8;
  bool frozen = false;

  std::size_t n_blocks() const { return (depth - 2) / 2; }
};

struct SegmentationFeatureConfig {
  std::size_t n_classes = 5;
  /// Hidden conv widths of the per-pixel classifier ahead of the class map.
  std::vector<std::size_t> segmenter_channels{16, 16};
  /// conv+relu+pool stages that shrink the class map before the head.
  std::vector<std::size_t> downscaler_channels{8, 8};
};

struct ModelConfig {
  std::string tag = "model";
  Variant variant = Variant::memnet;
  ConvFeatureConfig conv;
  std::optional<ResidualBackboneConfig> backbone;
  std::optional<SegmentationFeatureConfig> seg;
  /// Head plan for resmem/m3m (memnet uses conv.fc_widths); last width is 1.
  std::vector<std::size_t> head_widths;
  std::size_t input_size = 32;
  std::size_t input_channels = 3;

  /// Output widths of the regression head for this variant.
  const std::vector<std::size_t>& head_plan() const {
    return variant == Variant::memnet ? conv.fc_widths : head_widths;
  }
};

inline void validate(const ModelConfig& c) {
  const auto& cv = c.conv;
  const std::size_t n = cv.channels.size();
  if (n < 1) throw ValidationError("conv trunk needs at least one layer");
  if (cv.kernels.size() != n || cv.strides.size() != n || cv.pads.size() != n || cv.pooling.size() != n)
    throw ValidationError("conv trunk per-layer lists must all have " + std::to_string(n) + " entries");
  if (c.input_size < 1 || c.input_channels < 1) throw ValidationError("input size and channels must be positive");
  if (c.variant == Variant::memnet) {
    if (c.backbone || c.seg) throw ValidationError("memnet takes neither a residual backbone nor a segmentation branch");
    if (cv.fc_widths.size() != 3) throw ValidationError("memnet head has exactly 3 fully connected layers");
  }
  if (c.variant == Variant::resmem) {
    if (!c.backbone) throw ValidationError("resmem requires a residual backbone config");
    if (c.seg) throw ValidationError("resmem takes no segmentation branch");
  }
  if (c.variant == Variant::m3m && (!c.backbone || !c.seg))
    throw ValidationError("m3m requires both a residual backbone and a segmentation config");
  const auto& plan = c.head_plan();
  if (plan.empty() || plan.back() != 1) throw ValidationError("head plan must end in a single output");
  for (auto w : plan)
    if (w == 0) throw ValidationError("head widths must be positive");
  if (c.backbone) {
    if (c.backbone->depth < 2 || (c.backbone->depth - 2) % 2 != 0)
      throw ValidationError("backbone depth must be >= 2 and even (stem + 2 convs per block + fc)");
    if (c.backbone->feature_dim < 1 || c.backbone->base_channels < 1)
      throw ValidationError("backbone feature_dim and base_channels must be >= 1");
  }
  if (c.seg && c.seg->n_classes < 2) throw ValidationError("segmentation needs at least 2 classes");
}

// JSON mapping. Key order is canonical because nlohmann::json sorts object keys.

inline void to_json(nlohmann::json& j, const ConvFeatureConfig& c) {
  j = {{"channels", c.channels}, {"kernels", c.kernels}, {"strides", c.strides},
       {"pads", c.pads},         {"pooling", c.pooling}, {"fc_widths", c.fc_widths}};
}
inline void from_json(const nlohmann::json& j, ConvFeatureConfig& c) {
  j.at("channels").get_to(c.channels);
  j.at("kernels").get_to(c.kernels);
  j.at("strides").get_to(c.strides);
  j.at("pads").get_to(c.pads);
  j.at("pooling").get_to(c.pooling);
  j.at("fc_widths").get_to(c.fc_widths);
}
inline void to_json(nlohmann::json& j, const ResidualBackboneConfig& c) {
  j = {{"depth", c.depth}, {"feature_dim", c.feature_dim}, {"base_channels", c.base_channels}, {"frozen", c.frozen}};
}
inline void from_json(const nlohmann::json& j, ResidualBackboneConfig& c) {
  j.at("depth").get_to(c.depth);
  j.at("feature_dim").get_to(c.feature_dim);
  j.at("base_channels").get_to(c.base_channels);
  j.at("frozen").get_to(c.frozen);
}
inline void to_json(nlohmann::json& j, const SegmentationFeatureConfig& c) {
  j = {{"n_classes", c.n_classes},
       {"segmenter_channels", c.segmenter_channels},
       {"downscaler_channels", c.downscaler_channels}};
}
inline void from_json(const nlohmann::json& j, SegmentationFeatureConfig& c) {
  j.at("n_classes").get_to(c.n_classes);
  j.at("segmenter_channels").get_to(c.segmenter_channels);
  j.at("downscaler_channels").get_to(c.downscaler_channels);
}
inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"tag", c.tag},
       {"variant", to_string(c.variant)},
       {"conv", c.conv},
       {"head_widths", c.head_widths},
       {"input_size", c.input_size},
       {"input_channels", c.input_channels}};
  j["backbone"] = c.backbone ? nlohmann::json(*c.backbone) : nlohmann::json(nullptr);
  j["seg"] = c.seg ? nlohmann::json(*c.seg) : nlohmann::json(nullptr);
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("tag").get_to(c.tag);
  c.variant = parse_variant(j.at("variant").get<std::string>());
  j.at("conv").get_to(c.conv);
  j.at("head_widths").get_to(c.head_widths);
  j.at("input_size").get_to(c.input_size);
  j.at("input_channels").get_to(c.input_channels);
  c.backbone.reset();
  c.seg.reset();
  if (j.contains("backbone") && !j["backbone"].is_null()) c.backbone = j["backbone"].get<ResidualBackboneConfig>();
  if (j.contains("seg") && !j["seg"].is_null()) c.seg = j["seg"].get<SegmentationFeatureConfig>();
}

/// Desk-scale presets. "tiny": 3-layer trunk, backbone depth 10, 64-d
/// features at 32x32. "small": 5-layer trunk, depth 18, 256-d at 64x64.
/// "reference": AlexNet layer counts at 224x224 with a depth-150, 1000-d
/// backbone (expensive; a config point rather than a training target).
inline ModelConfig preset(const std::string& name, Variant variant) {
  ModelConfig c;
  c.variant = variant;
  c.tag = to_string(variant) + "-" + name;
  if (name == "tiny") {
    c.input_size = 32;
    c.conv = {{8, 16, 16}, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, {true, true, true}, {64, 32, 1}};
    c.head_widths = {64, 32, 1};
    if (variant != Variant::memnet) c.backbone = ResidualBackboneConfig{10, 64, 8, false};
    if (variant == Variant::m3m) c.seg = SegmentationFeatureConfig{5, {8, 8}, {4, 4}};
  } else if (name == "small") {
    c.input_size = 64;
    c.conv = {{16, 32, 32, 64, 64}, {3, 3, 3, 3, 3}, {1, 1, 1, 1, 1}, {1, 1, 1, 1, 1},
              {true, true, true, false, true}, {256, 64, 1}};
    c.head_widths = {256, 64, 1};
    if (variant != Variant::memnet) c.backbone = ResidualBackboneConfig{18, 256, 16, false};
    if (variant == Variant::m3m) c.seg = SegmentationFeatureConfig{5, {16, 16}, {8, 16}};
  } else if (name == "reference") {
    c.input_size = 224;
    c.conv = {{96, 256, 384, 384, 256}, {11, 5, 3, 3, 3}, {4, 1, 1, 1, 1}, {2, 2, 1, 1, 1},
              {true, true, false, false, true}, {4096, 4096, 1}};
    c.head_widths = {4096, 4096, 1};
    if (variant != Variant::memnet) c.backbone = ResidualBackboneConfig{150, 1000, 64, false};
    if (variant == Variant::m3m) c.seg = SegmentationFeatureConfig{21, {32, 32}, {16, 16, 16, 16}};
  } else {
    throw DomainError("unknown preset '" + name + "' (expected tiny, small or reference)");
  }
  return c;
}

/// One image-to-score network: parallel feature branches whose flattened
/// outputs are concatenated and fed to a fully connected head ending in a
/// sigmoid. Branch layers are addressed as "<branch>.<layer>", e.g.
/// "trunk.relu1", "backbone.block2", "segmenter.classifier", "head.fc0".
template <typename T>
class Model {
 public:
  struct State {
    std::vector<nn::Cache<T>> trunk, backbone, segmenter, downscaler, head;
    /// Per-branch output shapes, in concatenation order.
    std::vector<nn::Shape> shapes;
  };

  Model() = default;

  explicit Model(const ModelConfig& config, std::uint64_t seed = 0) : config_(config) {
    validate(config_);
    assemble();
    Rng rng(seed);
    trunk_.init(rng);
    backbone_.init(rng);
    segmenter_.init(rng);
    downscaler_.init(rng);
    head_.init(rng);
    apply_frozen();
  }

  Model(const Model& o)
      : config_(o.config_), trunk_(o.trunk_), backbone_(o.backbone_), segmenter_(o.segmenter_),
        downscaler_(o.downscaler_), head_(o.head_) {
    apply_frozen();
  }
  Model& operator=(const Model& o) {
    if (this != &o) {
      config_ = o.config_;
      trunk_ = o.trunk_;
      backbone_ = o.backbone_;
      segmenter_ = o.segmenter_;
      downscaler_ = o.downscaler_;
      head_ = o.head_;
      apply_frozen();
    }
    return *this;
  }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  const std::string& tag() const { return config_.tag; }
  nn::Shape input_shape() const { return {config_.input_channels, config_.input_size, config_.input_size}; }

  std::size_t conv_feature_width() const { return trunk_.output_shape(input_shape()).size(); }
  std::size_t backbone_feature_width() const {
    return backbone_.empty() ? 0 : backbone_.output_shape(input_shape()).size();
  }
  std::size_t segmentation_feature_width() const {
    if (segmenter_.empty()) return 0;
    return downscaler_.output_shape(segmenter_.output_shape(input_shape())).size();
  }
  std::size_t head_input_width() const {
    return conv_feature_width() + backbone_feature_width() + segmentation_feature_width();
  }
  nn::Shape segmentation_map_shape() const {
    return segmenter_.empty() ? nn::Shape{} : segmenter_.output_shape(input_shape());
  }

  bool has_backbone() const { return !backbone_.empty(); }
  bool frozen() const { return config_.backbone && config_.backbone->frozen; }

  /// Excludes (or re-includes) the pretrained feature extractors, i.e. the
  /// residual backbone and the segmenter, from gradient updates.
  void set_frozen(bool f) {
    if (!config_.backbone) throw ValidationError("set_frozen: " + to_string(config_.variant) + " has no residual backbone");
    config_.backbone->frozen = f;
    apply_frozen();
  }

  nn::Sequential<T>& trunk() { return trunk_; }
  nn::Sequential<T>& backbone() { return backbone_; }
  nn::Sequential<T>& segmenter() { return segmenter_; }
  nn::Sequential<T>& downscaler() { return downscaler_; }
  nn::Sequential<T>& head() { return head_; }
  const nn::Sequential<T>& trunk() const { return trunk_; }
  const nn::Sequential<T>& backbone() const { return backbone_; }
  const nn::Sequential<T>& segmenter() const { return segmenter_; }
  const nn::Sequential<T>& downscaler() const { return downscaler_; }
  const nn::Sequential<T>& head() const { return head_; }

  /// All parameters with dot-path names, in a fixed order.
  std::vector<nn::NamedParam<T>> parameters() {
    std::vector<nn::NamedParam<T>> out;
    trunk_.collect("trunk.", out);
    backbone_.collect("backbone.", out);
    segmenter_.collect("segmenter.", out);
    downscaler_.collect("downscaler.", out);
    head_.collect("head.", out);
    return out;
  }
  std::vector<std::pair<std::string, const nn::Param<T>*>> parameters() const {
    std::vector<std::pair<std::string, const nn::Param<T>*>> out;
    for (auto& np : const_cast<Model*>(this)->parameters()) out.emplace_back(np.name, np.param);
    return out;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : parameters()) n += p->size();
    return n;
  }
  void zero_grad() {
    for (auto& np : parameters()) np.param->zero_grad();
  }

  void check_input(const Tensor<T>& x) const {
    const auto s = input_shape();
    if (x.c() != s.c || x.h() != s.h || x.w() != s.w)
      throw ShapeError("model input must be " + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
                       std::to_string(s.w) + ", got " + x.shape_string());
  }

  /// Raw sigmoid outputs, one per sample.
  std::vector<T> forward(const Tensor<T>& batch) const {
    State st;
    const Tensor<T> y = forward(batch, st);
    return y.values();
  }

  std::vector<T> forward(const std::vector<Tensor<T>>& images) const {
    return images.empty() ? std::vector<T>{} : forward(stack(images));
  }

  T score(const Tensor<T>& image) const { return forward(image).at(0); }

  /// Forward pass that keeps everything backward() needs. Output is (n,1,1,1).
  Tensor<T> forward(const Tensor<T>& batch, State& st) const {
    check_input(batch);
    return head_.forward(features(batch, st), st.head);
  }

  /// Accumulates parameter gradients for dL/dy and optionally returns dL/dx.
  Tensor<T> backward(const Tensor<T>& dy, const State& st, bool input_grad = false) {
    const bool frozen_features = frozen();
    Tensor<T> dfeat = head_.backward(dy, st.head, {true, true});
    std::vector<Tensor<T>> pieces = split(dfeat, st.shapes);
    Tensor<T> dx;
    auto accumulate = [&](Tensor<T> g) {
      if (!input_grad) return;
      if (dx.empty()) {
        dx = std::move(g);
      } else {
        for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += g.data()[i];
      }
    };
    std::size_t k = 0;
    {
      const Tensor<T>& g = pieces[k++];
      accumulate(trunk_.backward(g, st.trunk, {input_grad, true}));
    }
    if (!backbone_.empty()) {
      const Tensor<T>& g = pieces[k++];
      if (!frozen_features || input_grad)
        accumulate(backbone_.backward(g, st.backbone, {input_grad, !frozen_features}));
    }
    if (!segmenter_.empty()) {
      const Tensor<T>& g = pieces[k++];
      const bool need_seg = !frozen_features || input_grad;
      Tensor<T> dseg = downscaler_.backward(g, st.downscaler, {need_seg, true});
      if (need_seg) accumulate(segmenter_.backward(dseg, st.segmenter, {input_grad, !frozen_features}));
    }
    return dx;
  }

  /// Resolves "<branch>.<layer>" to the branch and layer index.
  std::pair<const nn::Sequential<T>*, std::size_t> resolve(const std::string& layer_id) const {
    const auto dot = layer_id.find('.');
    if (dot == std::string::npos) throw ValidationError("layer address '" + layer_id + "' is not <branch>.<layer>");
    const std::string branch = layer_id.substr(0, dot), name = layer_id.substr(dot + 1);
    const nn::Sequential<T>* seq = nullptr;
    if (branch == "trunk") seq = &trunk_;
    else if (branch == "backbone") seq = &backbone_;
    else if (branch == "segmenter") seq = &segmenter_;
    else if (branch == "downscaler") seq = &downscaler_;
    else if (branch == "head") seq = &head_;
    if (!seq || seq->empty()) throw ValidationError("unknown branch in layer address '" + layer_id + "'");
    const std::size_t idx = seq->find(name);
    if (idx >= seq->size()) throw ValidationError("unknown layer in layer address '" + layer_id + "'");
    return {seq, idx};
  }

  /// Output shape of an addressed layer for one input sample.
  nn::Shape layer_shape(const std::string& layer_id) const {
    auto [seq, idx] = resolve(layer_id);
    const auto branch = layer_id.substr(0, layer_id.find('.'));
    nn::Shape in = input_shape();
    if (branch == "downscaler") in = segmenter_.output_shape(in);
    if (branch == "head") in = {head_input_width(), 1, 1};
    return seq->output_shape(in, idx);
  }

  /// Every addressable layer id, in graph order.
  std::vector<std::string> layer_ids() const {
    std::vector<std::string> ids;
    auto add = [&](const char* b, const nn::Sequential<T>& s) {
      for (std::size_t i = 0; i < s.size(); ++i) ids.push_back(std::string(b) + "." + s.name(i));
    };
    add("trunk", trunk_);
    add("backbone", backbone_);
    add("segmenter", segmenter_);
    add("downscaler", downscaler_);
    add("head", head_);
    return ids;
  }

  /// Spatial mean of one filter's activation map, per sample, and optionally
  /// its gradient with respect to the input batch.
  std::pair<std::vector<T>, Tensor<T>> filter_activation(const Tensor<T>& x, const std::string& layer_id,
                                                          std::size_t filter, bool want_grad) {
    check_input(x);
    const nn::Shape ls = layer_shape(layer_id);
    if (filter >= ls.c)
      throw ValidationError("filter " + std::to_string(filter) + " out of range for '" + layer_id + "' with " +
                            std::to_string(ls.c) + " channels");
    const std::string branch = layer_id.substr(0, layer_id.find('.'));
    const std::size_t idx = resolve(layer_id).second;
    const std::size_t hw = ls.h * ls.w;
    auto readout = [&](const Tensor<T>& a) {
      std::vector<T> v(a.n(), T(0));
      for (std::size_t i = 0; i < a.n(); ++i) {
        const T* p = a.data() + (i * a.c() + filter) * hw;
        T s = 0;
        for (std::size_t k = 0; k < hw; ++k) s += p[k];
        v[i] = s / static_cast<T>(hw);
      }
      return v;
    };
    auto seed_grad = [&](const Tensor<T>& a) {
      Tensor<T> g(a.n(), a.c(), a.h(), a.w());
      for (std::size_t i = 0; i < a.n(); ++i) {
        T* p = g.data() + (i * a.c() + filter) * hw;
        std::fill(p, p + hw, T(1) / static_cast<T>(hw));
      }
      return g;
    };
    const nn::BackwardMode no_params{true, false};
    if (branch == "head") {
      // Head layers see every branch, so run the full graph up to the layer.
      State st;
      const Tensor<T> a = head_.forward(features(x, st), st.head, idx);
      auto values = readout(a);
      if (!want_grad) return {values, {}};
      Tensor<T> dfeat = head_.backward(seed_grad(a), st.head, no_params);
      auto pieces = split(dfeat, st.shapes);
      std::size_t k = 0;
      Tensor<T> dx = trunk_.backward(pieces[k++], st.trunk, no_params);
      auto add = [&](const Tensor<T>& g) {
        for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] += g.data()[i];
      };
      if (!backbone_.empty()) {
        const auto& g = pieces[k++];
        add(backbone_.backward(g, st.backbone, no_params));
      }
      if (!segmenter_.empty()) {
        Tensor<T> dseg = downscaler_.backward(pieces[k++], st.downscaler, no_params);
        add(segmenter_.backward(dseg, st.segmenter, no_params));
      }
      return {values, dx};
    }
    std::vector<nn::Cache<T>> pre, caches;
    Tensor<T> a;
    nn::Sequential<T>* seq = nullptr;
    if (branch == "downscaler") {
      const Tensor<T> seg = segmenter_.forward(x, pre);
      a = downscaler_.forward(seg, caches, idx);
      seq = &downscaler_;
    } else {
      seq = const_cast<nn::Sequential<T>*>(resolve(layer_id).first);
      a = seq->forward(x, caches, idx);
    }
    auto values = readout(a);
    if (!want_grad) return {values, {}};
    Tensor<T> dx = seq->backward(seed_grad(a), caches, no_params);
    if (branch == "downscaler") dx = segmenter_.backward(dx, pre, no_params);
    return {values, dx};
  }

 private:
  void assemble() {
    const auto& cv = config_.conv;
    std::size_t in_c = config_.input_channels;
    for (std::size_t i = 0; i < cv.channels.size(); ++i) {
      const auto s = std::to_string(i);
      trunk_.template emplace<nn::Conv2d<T>>("conv" + s, in_c, cv.channels[i], cv.kernels[i], cv.strides[i], cv.pads[i]);
      trunk_.template emplace<nn::Relu<T>>("relu" + s);
      if (cv.pooling[i]) trunk_.template emplace<nn::MaxPool2<T>>("pool" + s);
      in_c = cv.channels[i];
    }
    if (config_.backbone) build_backbone(*config_.backbone);
    if (config_.seg) build_segmentation(*config_.seg);
    // Validates the spatial plan eagerly.
    std::size_t width = conv_feature_width() + backbone_feature_width() + segmentation_feature_width();
    const auto& plan = config_.head_plan();
    for (std::size_t i = 0; i < plan.size(); ++i) {
      const auto s = std::to_string(i);
      head_.template emplace<nn::Linear<T>>("fc" + s, width, plan[i]);
      if (i + 1 < plan.size()) head_.template emplace<nn::Relu<T>>("relu" + s);
      width = plan[i];
    }
    head_.template emplace<nn::Sigmoid<T>>("sigmoid");
  }

  void build_backbone(const ResidualBackboneConfig& b) {
    backbone_.template emplace<nn::Conv2d<T>>("stem", config_.input_channels, b.base_channels, 3, 1, 1);
    backbone_.template emplace<nn::Relu<T>>("stem_relu");
    std::size_t spatial = config_.input_size;
    if (spatial >= 8) {
      backbone_.template emplace<nn::MaxPool2<T>>("stem_pool");
      spatial /= 2;
    }
    const std::size_t blocks = b.n_blocks();
    std::size_t in_c = b.base_channels, id = 0;
    for (std::size_t stage = 0; stage < 4; ++stage) {
      const std::size_t count = blocks / 4 + (stage < blocks % 4 ? 1 : 0);
      const std::size_t out_c = b.base_channels << stage;
      for (std::size_t j = 0; j < count; ++j) {
        const std::size_t stride = (stage > 0 && j == 0 && spatial >= 2) ? 2 : 1;
        if (stride == 2) spatial = (spatial - 1) / 2 + 1;
        backbone_.template emplace<nn::ResidualBlock<T>>("block" + std::to_string(id++), in_c, out_c, stride);
        in_c = out_c;
      }
    }
    backbone_.template emplace<nn::GlobalAvgPool<T>>("gap");
    backbone_.template emplace<nn::Linear<T>>("fc", in_c, b.feature_dim);
  }

  void build_segmentation(const SegmentationFeatureConfig& s) {
    std::size_t in_c = config_.input_channels;
    for (std::size_t i = 0; i < s.segmenter_channels.size(); ++i) {
      const auto id = std::to_string(i);
      segmenter_.template emplace<nn::Conv2d<T>>("conv" + id, in_c, s.segmenter_channels[i], 3, 1, 1);
      segmenter_.template emplace<nn::Relu<T>>("relu" + id);
      in_c = s.segmenter_channels[i];
    }
    segmenter_.template emplace<nn::Conv2d<T>>("classifier", in_c, s.n_classes, 1, 1, 0);
    segmenter_.template emplace<nn::ChannelSoftmax<T>>("softmax");
    in_c = s.n_classes;
    for (std::size_t i = 0; i < s.downscaler_channels.size(); ++i) {
      const auto id = std::to_string(i);
      downscaler_.template emplace<nn::Conv2d<T>>("conv" + id, in_c, s.downscaler_channels[i], 3, 1, 1);
      downscaler_.template emplace<nn::Relu<T>>("relu" + id);
      downscaler_.template emplace<nn::MaxPool2<T>>("pool" + id);
      in_c = s.downscaler_channels[i];
    }
  }

  void apply_frozen() {
    const bool f = frozen();
    std::vector<nn::NamedParam<T>> ps;
    backbone_.collect("", ps);
    segmenter_.collect("", ps);
    for (auto& np : ps) np.param->frozen = f;
  }

  /// Runs every feature branch and concatenates the flattened outputs.
  Tensor<T> features(const Tensor<T>& x, State& st) const {
    std::vector<Tensor<T>> parts;
    parts.push_back(trunk_.forward(x, st.trunk));
    if (!backbone_.empty()) parts.push_back(backbone_.forward(x, st.backbone));
    if (!segmenter_.empty()) parts.push_back(downscaler_.forward(segmenter_.forward(x, st.segmenter), st.downscaler));
    st.shapes.clear();
    for (const auto& p : parts) st.shapes.push_back({p.c(), p.h(), p.w()});
    return concat(parts);
  }

  static Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
    std::size_t width = 0;
    for (const auto& p : parts) width += p.sample_size();
    const std::size_t n = parts.front().n();
    Tensor<T> out(n, width, 1, 1);
    for (std::size_t i = 0; i < n; ++i) {
      T* dst = out.sample(i).data();
      for (const auto& p : parts) {
        auto s = p.sample(i);
        dst = std::copy(s.begin(), s.end(), dst);
      }
    }
    return out;
  }

  static std::vector<Tensor<T>> split(const Tensor<T>& g, const std::vector<nn::Shape>& shapes) {
    std::vector<Tensor<T>> out;
    std::size_t offset = 0;
    for (const auto& s : shapes) {
      const std::size_t w = s.size();
      Tensor<T> piece(g.n(), s.c, s.h, s.w);
      for (std::size_t i = 0; i < g.n(); ++i) {
        const T* src = g.sample(i).data() + offset;
        std::copy(src, src + w, piece.sample(i).data());
      }
      out.push_back(std::move(piece));
      offset += w;
    }
    return out;
  }

  ModelConfig config_;
  nn::Sequential<T> trunk_, backbone_, segmenter_, downscaler_, head_;
};

/// Builds a model from config with deterministic He initialization.
template <typename T = float>
Model<T> build(const ModelConfig& config, std::uint64_t seed) {
  return Model<T>(config, seed);
}

/// Applies one residual block to a feature tensor.
template <typename T>
Tensor<T> residual_block(const Tensor<T>& x, const nn::ResidualBlock<T>& block) {
  nn::Cache<T> cache;
  return block.forward(x, cache);
}

/// Copies parameter values between models of identical structure (e.g. float <-> double).
template <typename Dst, typename Src>
void copy_parameters(Model<Dst>& dst, const Model<Src>& src) {
  auto d = dst.parameters();
  auto s = src.parameters();
  if (d.size() != s.size()) throw ShapeError("copy_parameters: structure mismatch");
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i].name != s[i].first || d[i].param->size() != s[i].second->size())
      throw ShapeError("copy_parameters: mismatch at " + d[i].name);
    for (std::size_t k = 0; k < d[i].param->size(); ++k)
      d[i].param->value[k] = static_cast<Dst>(s[i].second->value[k]);
  }
}

}  // namespace memscore
