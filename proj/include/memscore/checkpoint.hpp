#pragma once

// Checkpoint container, little-endian throughout:
//
//   "MEMSCORE1"                      9-byte magic
//   u32 format version               currently 1
//   u64 header length, header bytes  canonical JSON (sorted keys, compact)
//   u32 tensor count
//   per tensor: u32 name length, name, u32 ndim, u64 dims[ndim], f32 data
//
// The header carries the model tag, ModelConfig, pipeline config and training
// metadata. A legacy pipeline's mean image is stored as tensor
// "pipeline.mean_image".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "memscore/error.hpp"
#include "memscore/models.hpp"
#include "memscore/preprocess.hpp"

namespace memscore {

inline constexpr std::string_view kCheckpointMagic = "MEMSCORE1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainMeta {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double val_spearman = 0;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  Model<float> model;
  PipelineConfig pipeline;
  TrainMeta train_meta;

  const ModelConfig& config() const { return model.config(); }
};

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  out.append(b, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  std::string_view bytes(std::size_t n) {
    if (n > data_.size() - pos_) throw FormatError("truncated checkpoint");
    std::string_view v(data_.data() + pos_, n);
    pos_ += n;
    return v;
  }
  template <typename U>
  U get() {
    auto b = bytes(sizeof(U));
    char tmp[sizeof(U)];
    std::memcpy(tmp, b.data(), sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(tmp, tmp + sizeof(U));
    U v;
    std::memcpy(&v, tmp, sizeof(U));
    return v;
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

inline void put_tensor(std::string& out, const std::string& name, const std::vector<std::uint64_t>& dims,
                       const float* data, std::size_t count) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put_le<std::uint64_t>(out, d);
  for (std::size_t i = 0; i < count; ++i) put_le<float>(out, data[i]);
}

}  // namespace detail

inline nlohmann::json checkpoint_header(const Model<float>& model, const PipelineConfig& pipeline, const TrainMeta& meta) {
  return {{"model_tag", model.tag()},
          {"config", model.config()},
          {"pipeline", pipeline_to_json(pipeline)},
          {"train_meta",
           {{"epoch", meta.epoch}, {"step", meta.step}, {"val_spearman", meta.val_spearman}, {"seed", meta.seed}}}};
}

inline std::string serialize_checkpoint(const Model<float>& model, const PipelineConfig& pipeline,
                                        const TrainMeta& meta) {
  std::string out(kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string header = checkpoint_header(model, pipeline, meta).dump();
  detail::put_le<std::uint64_t>(out, header.size());
  out.append(header);
  const auto params = model.parameters();
  const auto* legacy = std::get_if<LegacyPipelineConfig>(&pipeline);
  const bool mean = legacy && !legacy->mean_image.empty();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size() + (mean ? 1 : 0)));
  for (const auto& [name, p] : params) {
    std::vector<std::uint64_t> dims(p->shape.begin(), p->shape.end());
    detail::put_tensor(out, name, dims, p->value.data(), p->size());
  }
  if (mean) {
    const auto& m = legacy->mean_image;
    detail::put_tensor(out, "pipeline.mean_image", {m.c(), m.h(), m.w()}, m.data(), m.size());
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                            const PipelineConfig& pipeline, const TrainMeta& meta = {}) {
  const std::string bytes = serialize_checkpoint(model, pipeline, meta);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint '" + path.string() + "'");
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  save_checkpoint(path, ck.model, ck.pipeline, ck.train_meta);
}

inline Checkpoint parse_checkpoint(std::string bytes) {
  detail::Reader r(std::move(bytes));
  if (r.bytes(std::min<std::size_t>(kCheckpointMagic.size(), 9)) != kCheckpointMagic)
    throw FormatError("not a memscore checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto header_len = r.get<std::uint64_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
  }
  ModelConfig config;
  PipelineConfig pipeline;
  TrainMeta meta;
  try {
    config = header.at("config").get<ModelConfig>();
    pipeline = pipeline_from_json(header.at("pipeline"));
    const auto& tm = header.at("train_meta");
    tm.at("epoch").get_to(meta.epoch);
    tm.at("step").get_to(meta.step);
    tm.at("val_spearman").get_to(meta.val_spearman);
    tm.at("seed").get_to(meta.seed);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("incomplete checkpoint header: ") + e.what());
  }
  Checkpoint ck{Model<float>(config, 0), pipeline, meta};
  std::map<std::string, nn::Param<float>*> by_name;
  for (auto& np : ck.model.parameters()) by_name[np.name] = np.param;
  std::map<std::string, bool> seen;

  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = r.get<std::uint32_t>();
    const std::string name(r.bytes(name_len));
    const auto ndim = r.get<std::uint32_t>();
    std::vector<std::size_t> dims(ndim);
    std::size_t n = 1;
    for (auto& d : dims) {
      d = static_cast<std::size_t>(r.get<std::uint64_t>());
      n *= d;
    }
    if (name == "pipeline.mean_image") {
      auto* legacy = std::get_if<LegacyPipelineConfig>(&ck.pipeline);
      if (!legacy || ndim != 3) throw FormatError("unexpected mean image tensor");
      legacy->mean_image = ImageTensor(1, dims[0], dims[1], dims[2]);
      for (std::size_t i = 0; i < n; ++i) legacy->mean_image.data()[i] = r.get<float>();
      continue;
    }
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ShapeError("checkpoint tensor '" + name + "' has no matching parameter");
    if (dims != it->second->shape)
      throw ShapeError("checkpoint tensor '" + name + "' shape does not match the configured model");
    for (std::size_t i = 0; i < n; ++i) it->second->value[i] = r.get<float>();
    seen[name] = true;
  }
  for (const auto& [name, p] : by_name)
    if (!seen.count(name)) throw ShapeError("checkpoint is missing parameter '" + name + "'");
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint tensors");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(std::move(bytes));
}

}  // namespace memscore
