#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "memscore/error.hpp"
#include "memscore/image_io.hpp"
#include "memscore/metrics.hpp"
#include "memscore/rng.hpp"
#include "memscore/tensor.hpp"

namespace memscore {

struct ManifestRecord {
  std::string image_ref;
  double score = 0;
  std::string source;
  /// Per-participant hit (1) / miss (0) outcomes; may be empty.
  std::vector<std::uint8_t> rater_responses;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::uint64_t seed = 0;
  /// Free-form provenance, e.g. the synthetic generator's parameters.
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  std::vector<double> scores() const {
    std::vector<double> s;
    s.reserve(records.size());
    for (const auto& r : records) s.push_back(r.score);
    return s;
  }
};

enum class ManifestFormat { csv, json };

inline ManifestFormat format_from_path(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".csv") return ManifestFormat::csv;
  if (ext == ".json") return ManifestFormat::json;
  throw ParseError("cannot infer manifest format from '" + p.string() + "' (use .csv or .json)");
}

inline double response_mean(const std::vector<std::uint8_t>& r) {
  double s = 0;
  for (auto v : r) s += v;
  return s / static_cast<double>(r.size());
}

/// Checks one record; `where` names it in messages (e.g. "row 4").
inline void validate_record(const ManifestRecord& r, const std::string& where) {
  if (r.image_ref.empty()) throw ValidationError(where + ": empty image_ref");
  if (!(r.score >= 0.0 && r.score <= 1.0))
    throw DomainError(where + ": score " + std::to_string(r.score) + " outside [0,1]");
  for (auto v : r.rater_responses)
    if (v > 1) throw DomainError(where + ": rater responses must be 0 or 1");
  if (!r.rater_responses.empty() && std::abs(response_mean(r.rater_responses) - r.score) > 1e-9)
    throw ValidationError(where + ": score " + std::to_string(r.score) + " disagrees with rater mean " +
                          std::to_string(response_mean(r.rater_responses)));
}

inline void validate_unique(const std::vector<ManifestRecord>& records) {
  std::unordered_set<std::string> seen;
  for (const auto& r : records)
    if (!seen.insert(r.image_ref).second) throw ValidationError("duplicate image_ref '" + r.image_ref + "'");
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) return std::nullopt;
  return v;
}

}  // namespace detail

/// Sidecar holding manifest metadata: "<dir>/<stem>.meta.json".
inline std::filesystem::path metadata_path(const std::filesystem::path& manifest) {
  return manifest.parent_path() / (manifest.stem().string() + ".meta.json");
}

inline DatasetManifest parse_csv_manifest(std::istream& in) {
  DatasetManifest m;
  std::string line;
  std::size_t row = 0;
  bool header_seen = false;
  bool has_responses = false;
  while (std::getline(in, line)) {
    ++row;
    const auto text = detail::trim(line);
    if (text.empty()) continue;
    const auto fields = detail::split_fields(text, ',');
    if (!header_seen) {
      header_seen = true;
      std::vector<std::string> names;
      for (auto f : fields) names.emplace_back(detail::trim(f));
      const std::vector<std::string> base{"image_ref", "score", "source"};
      if (names.size() < 3 || !std::equal(base.begin(), base.end(), names.begin()) ||
          (names.size() == 4 && names[3] != "rater_responses") || names.size() > 4)
        throw ParseError("CSV header must be 'image_ref,score,source[,rater_responses]'", row);
      has_responses = names.size() == 4;
      continue;
    }
    const std::size_t expected = has_responses ? 4 : 3;
    if (fields.size() > expected)
      throw ParseError("too many fields (image paths containing commas are not supported)", row);
    if (fields.size() < 3 || (fields.size() < expected && fields.size() != 3))
      throw ParseError("expected " + std::to_string(expected) + " fields, got " + std::to_string(fields.size()), row);
    ManifestRecord r;
    r.image_ref = std::string(detail::trim(fields[0]));
    const auto score = detail::parse_double(detail::trim(fields[1]));
    if (!score) throw ParseError("score is not a number", row);
    r.score = *score;
    r.source = std::string(detail::trim(fields[2]));
    if (fields.size() == 4) {
      const auto resp = detail::trim(fields[3]);
      if (!resp.empty()) {
        for (auto tok : detail::split_fields(resp, ';')) {
          tok = detail::trim(tok);
          if (tok == "0") r.rater_responses.push_back(0);
          else if (tok == "1") r.rater_responses.push_back(1);
          else throw ParseError("rater_responses must be ';'-joined 0/1 values", row);
        }
      }
    }
    validate_record(r, "row " + std::to_string(row));
    m.records.push_back(std::move(r));
  }
  if (!header_seen) throw ParseError("empty CSV manifest");
  validate_unique(m.records);
  return m;
}

inline DatasetManifest parse_json_manifest(std::istream& in) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("invalid JSON manifest: ") + e.what());
  }
  if (!j.is_array()) throw ParseError("JSON manifest must be an array of objects");
  DatasetManifest m;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& o = j[i];
    const std::size_t row = i + 1;
    try {
      ManifestRecord r;
      r.image_ref = o.at("image_ref").get<std::string>();
      r.score = o.at("score").get<double>();
      r.source = o.at("source").get<std::string>();
      if (o.contains("rater_responses") && !o["rater_responses"].is_null())
        for (const auto& v : o["rater_responses"]) {
          const int x = v.get<int>();
          if (x != 0 && x != 1) throw ParseError("rater_responses must contain 0/1", row);
          r.rater_responses.push_back(static_cast<std::uint8_t>(x));
        }
      validate_record(r, "record " + std::to_string(row));
      m.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed record: ") + e.what(), row);
    }
  }
  validate_unique(m.records);
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path, ManifestFormat format) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path.string() + "'");
  DatasetManifest m = format == ManifestFormat::csv ? parse_csv_manifest(in) : parse_json_manifest(in);
  const auto meta = metadata_path(path);
  if (std::filesystem::exists(meta)) {
    std::ifstream mi(meta);
    try {
      m.metadata = nlohmann::json::parse(mi);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("invalid manifest metadata '" + meta.string() + "': " + e.what());
    }
    if (m.metadata.contains("seed")) m.seed = m.metadata["seed"].get<std::uint64_t>();
  }
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  return load_manifest(path, format_from_path(path));
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path, ManifestFormat format) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest '" + path.string() + "'");
  const bool responses = std::any_of(m.records.begin(), m.records.end(),
                                     [](const auto& r) { return !r.rater_responses.empty(); });
  if (format == ManifestFormat::csv) {
    out << "image_ref,score,source" << (responses ? ",rater_responses" : "") << "\n";
    for (const auto& r : m.records) {
      if (r.image_ref.find(',') != std::string::npos || r.source.find(',') != std::string::npos)
        throw ValidationError("cannot write '" + r.image_ref + "' to CSV: commas are not supported");
      char buf[32];
      auto [p, ec] = std::to_chars(buf, buf + sizeof buf, r.score);
      out << r.image_ref << "," << std::string_view(buf, p - buf) << "," << r.source;
      if (responses) {
        out << ",";
        for (std::size_t i = 0; i < r.rater_responses.size(); ++i)
          out << (i ? ";" : "") << static_cast<int>(r.rater_responses[i]);
      }
      out << "\n";
    }
  } else {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : m.records) {
      nlohmann::json o = {{"image_ref", r.image_ref}, {"score", r.score}, {"source", r.source}};
      if (!r.rater_responses.empty()) {
        std::vector<int> v(r.rater_responses.begin(), r.rater_responses.end());
        o["rater_responses"] = v;
      }
      j.push_back(std::move(o));
    }
    out << j.dump(2) << "\n";
  }
  if (!m.metadata.empty()) {
    std::ofstream meta(metadata_path(path));
    meta << m.metadata.dump(2) << "\n";
  }
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  save_manifest(m, path, format_from_path(path));
}

/// Concatenates manifests in order, keeping source tags.
inline DatasetManifest mix(const std::vector<DatasetManifest>& manifests) {
  if (manifests.empty()) throw ValidationError("mix: no manifests given");
  DatasetManifest out;
  out.seed = manifests.front().seed;
  out.metadata = manifests.front().metadata;
  if (manifests.size() > 1) out.metadata = nlohmann::json::object();
  std::size_t total = 0;
  for (const auto& m : manifests) total += m.size();
  out.records.reserve(total);
  for (const auto& m : manifests) out.records.insert(out.records.end(), m.records.begin(), m.records.end());
  validate_unique(out.records);
  return out;
}

struct SplitSpec {
  double train_frac = 0.8, val_frac = 0.1, test_frac = 0.1;
  std::uint64_t seed = 0;
};

struct Split {
  DatasetManifest train, val, test;
};

/// Largest-remainder apportionment of n items to the three fractions;
/// remainder ties go to the earlier part (train, then val, then test).
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitSpec& spec) {
  const std::array<double, 3> f{spec.train_frac, spec.val_frac, spec.test_frac};
  for (double x : f)
    if (!(x > 0.0 && x < 1.0)) throw DomainError("split fractions must lie in (0,1)");
  if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw DomainError("split fractions must sum to 1");
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    double q = f[i] * static_cast<double>(n);
    if (std::abs(q - std::round(q)) < 1e-9) q = std::round(q);
    sizes[i] = static_cast<std::size_t>(std::floor(q));
    rem[i] = q - std::floor(q);
    assigned += sizes[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];
  return sizes;
}

/// Seeded partition into train/val/test. Each part keeps manifest order.
inline Split split(const DatasetManifest& m, const SplitSpec& spec) {
  if (m.empty()) throw ValidationError("split: empty manifest");
  const auto sizes = split_sizes(m.size(), spec);
  for (int i = 0; i < 3; ++i)
    if (sizes[i] == 0)
      throw ValidationError("split of " + std::to_string(m.size()) + " records leaves the " +
                            (i == 0 ? "train" : i == 1 ? "val" : "test") + " part empty");
  Rng rng(mix_seed(spec.seed, 0x5157));
  const auto perm = rng.permutation(m.size());
  std::array<std::vector<std::size_t>, 3> idx;
  for (std::size_t k = 0; k < perm.size(); ++k) {
    const int part = k < sizes[0] ? 0 : k < sizes[0] + sizes[1] ? 1 : 2;
    idx[part].push_back(perm[k]);
  }
  Split out;
  DatasetManifest* parts[3] = {&out.train, &out.val, &out.test};
  for (int p = 0; p < 3; ++p) {
    std::sort(idx[p].begin(), idx[p].end());
    parts[p]->seed = spec.seed;
    parts[p]->metadata = m.metadata;
    for (auto i : idx[p]) parts[p]->records.push_back(m.records[i]);
  }
  return out;
}

/// Mean over resamples of the Spearman correlation between per-image means
/// of two random rater halves. Each resample permutes every image's raters
/// uniformly; the first ceil(k/2) form half A.
inline double split_half_consistency(const DatasetManifest& m, std::size_t n_resamples = 25,
                                     std::uint64_t seed = 0) {
  if (m.size() < 2) throw ValidationError("split_half_consistency: need at least 2 images");
  if (n_resamples == 0) throw ValidationError("split_half_consistency: n_resamples must be >= 1");
  for (const auto& r : m.records)
    if (r.rater_responses.size() < 2)
      throw ValidationError("split_half_consistency: '" + r.image_ref + "' has fewer than 2 rater responses");
  double total = 0;
  std::vector<double> a(m.size()), b(m.size());
  for (std::size_t s = 0; s < n_resamples; ++s) {
    Rng rng(mix_seed(seed, s));
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto& resp = m.records[i].rater_responses;
      const auto perm = rng.permutation(resp.size());
      const std::size_t half = (resp.size() + 1) / 2;
      double sa = 0, sb = 0;
      for (std::size_t k = 0; k < perm.size(); ++k) (k < half ? sa : sb) += resp[perm[k]];
      a[i] = sa / static_cast<double>(half);
      b[i] = sb / static_cast<double>(resp.size() - half);
    }
    total += spearman(a, b);
  }
  return total / static_cast<double>(n_resamples);
}

// ---------------------------------------------------------------------------
// Synthetic desk-scale data

enum class TargetFn { texture_only, texture_plus_category };

inline std::string to_string(TargetFn t) {
  return t == TargetFn::texture_only ? "texture_only" : "texture_plus_category";
}

inline TargetFn parse_target_fn(const std::string& s) {
  if (s == "texture_only") return TargetFn::texture_only;
  if (s == "texture_plus_category") return TargetFn::texture_plus_category;
  throw DomainError("unknown target function '" + s + "'");
}

enum class ShapeCategory : int { disc = 0, square = 1, triangle = 2, cross = 3 };
inline constexpr std::size_t kShapeCategories = 4;
inline constexpr double kScoreFloor = 0.2;
inline constexpr double kScoreCeil = 0.95;

/// Per-category score offsets in [0,1] for texture_plus_category.
inline constexpr std::array<double, kShapeCategories> kCategoryOffset{0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0};

/// The recorded generation parameters of one image.
struct SyntheticParams {
  double contrast = 0;  // in [0,1]
  int category = 0;
  int n_shapes = 1;
};

/// Ground-truth score: affine map of the generating signal onto
/// [0.2, 0.95], then clipped. texture_only uses contrast alone;
/// texture_plus_category averages contrast with the category offset.
inline double synthetic_score(const SyntheticParams& p, TargetFn fn) {
  const double signal = fn == TargetFn::texture_only
                            ? p.contrast
                            : 0.5 * p.contrast + 0.5 * kCategoryOffset.at(static_cast<std::size_t>(p.category));
  return std::clamp(kScoreFloor + (kScoreCeil - kScoreFloor) * signal, kScoreFloor, kScoreCeil);
}

struct SyntheticImage {
  SyntheticParams params;
  ImageTensor image;
  /// Per-pixel class: 0 background, 1 + category inside shapes.
  std::vector<std::uint8_t> mask;
};

/// Renders image `index` of the stream `seed`: a noisy gray background with
/// 1-4 shapes of one category whose intensity departs from the background by
/// an amount proportional to the contrast parameter. Pixels are quantized to
/// 8 bits so the in-memory image equals its PNG.
inline SyntheticImage render_synthetic(std::size_t index, std::size_t image_size, std::uint64_t seed) {
  Rng rng(mix_seed(seed, index));
  SyntheticImage out;
  out.params.contrast = rng.uniform();
  out.params.category = static_cast<int>(rng.below(kShapeCategories));
  out.params.n_shapes = 1 + static_cast<int>(rng.below(4));
  const double s = static_cast<double>(image_size);
  const double bg = rng.uniform(0.3, 0.7);
  const double polarity = bg < 0.5 ? 1.0 : -1.0;
  const double level = bg + polarity * 0.3 * out.params.contrast;
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(0.9, 1.1);

  out.image = ImageTensor(1, 3, image_size, image_size);
  out.mask.assign(image_size * image_size, 0);
  for (std::size_t y = 0; y < image_size; ++y)
    for (std::size_t x = 0; x < image_size; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.image(0, c, y, x) = static_cast<float>(bg + rng.normal(0.0, 0.06));

  for (int k = 0; k < out.params.n_shapes; ++k) {
    const double r = s * rng.uniform(0.12, 0.22);
    const double cx = rng.uniform(r, s - r), cy = rng.uniform(r, s - r);
    for (std::size_t y = 0; y < image_size; ++y)
      for (std::size_t x = 0; x < image_size; ++x) {
        const double dx = (x + 0.5 - cx) / r, dy = (y + 0.5 - cy) / r;
        bool inside = false;
        switch (static_cast<ShapeCategory>(out.params.category)) {
          case ShapeCategory::disc: inside = dx * dx + dy * dy <= 1.0; break;
          case ShapeCategory::square: inside = std::abs(dx) <= 0.8 && std::abs(dy) <= 0.8; break;
          case ShapeCategory::triangle: inside = dy >= -1.0 && dy <= 0.8 && std::abs(dx) <= 0.5 * (dy + 1.0); break;
          case ShapeCategory::cross:
            inside = (std::abs(dx) <= 0.3 && std::abs(dy) <= 1.0) || (std::abs(dy) <= 0.3 && std::abs(dx) <= 1.0);
            break;
        }
        if (!inside) continue;
        out.mask[y * image_size + x] = static_cast<std::uint8_t>(1 + out.params.category);
        for (std::size_t c = 0; c < 3; ++c)
          out.image(0, c, y, x) = static_cast<float>(level * tint[c] + rng.normal(0.0, 0.03));
      }
  }
  out.image = quantize8(out.image);
  return out;
}

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<ImageTensor> images;
  std::vector<SyntheticParams> params;
  std::vector<std::vector<std::uint8_t>> masks;
};

inline std::string synthetic_ref(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img/%06zu.png", i);
  return buf;
}

/// Generates n images with scores from `target_fn`. The generating function
/// and every image's parameters are recorded in manifest.metadata.
inline SyntheticDataset generate_synthetic(std::size_t n, std::size_t image_size, std::uint64_t seed,
                                           TargetFn target_fn) {
  if (n < 1) throw DomainError("generate_synthetic: n must be >= 1");
  if (image_size < 32) throw DomainError("generate_synthetic: image_size must be >= 32");
  SyntheticDataset ds;
  ds.manifest.seed = seed;
  auto& meta = ds.manifest.metadata;
  meta = {{"generator", "memscore-synthetic"},
          {"version", 1},
          {"target_fn", to_string(target_fn)},
          {"seed", seed},
          {"image_size", image_size},
          {"n", n},
          {"score_fn", target_fn == TargetFn::texture_only
                           ? "clip(0.2 + 0.75 * contrast, 0.2, 0.95)"
                           : "clip(0.2 + 0.75 * (0.5 * contrast + 0.5 * category_offset[category]), 0.2, 0.95)"},
          {"category_offset", kCategoryOffset},
          {"categories", {"disc", "square", "triangle", "cross"}}};
  nlohmann::json recs = nlohmann::json::array();
  const std::string source = "synthetic-" + to_string(target_fn);
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticImage img = render_synthetic(i, image_size, seed);
    ManifestRecord r{synthetic_ref(i), synthetic_score(img.params, target_fn), source, {}};
    recs.push_back({{"image_ref", r.image_ref},
                    {"index", i},
                    {"contrast", img.params.contrast},
                    {"category", img.params.category},
                    {"n_shapes", img.params.n_shapes}});
    ds.manifest.records.push_back(std::move(r));
    ds.images.push_back(std::move(img.image));
    ds.params.push_back(img.params);
    ds.masks.push_back(std::move(img.mask));
  }
  meta["records"] = std::move(recs);
  return ds;
}

/// Writes <dir>/img/*.png, <dir>/manifest.csv and its .meta.json sidecar.
inline std::filesystem::path write_synthetic(const SyntheticDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "img");
  for (std::size_t i = 0; i < ds.images.size(); ++i) save_png(ds.images[i], dir / ds.manifest.records[i].image_ref);
  const auto path = dir / "manifest.csv";
  save_manifest(ds.manifest, path, ManifestFormat::csv);
  return path;
}

/// Category label per record from synthetic metadata, when available.
inline std::optional<std::vector<int>> category_labels(const DatasetManifest& m) {
  if (!m.metadata.contains("records")) return std::nullopt;
  std::map<std::string, int> by_ref;
  for (const auto& r : m.metadata["records"]) by_ref[r.at("image_ref").get<std::string>()] = r.at("category").get<int>();
  std::vector<int> out;
  for (const auto& r : m.records) {
    auto it = by_ref.find(r.image_ref);
    if (it == by_ref.end()) return std::nullopt;
    out.push_back(it->second);
  }
  return out;
}

/// Re-renders every record from the recorded parameters and checks the score.
inline bool verify_synthetic(const DatasetManifest& m) {
  if (!m.metadata.contains("records") || !m.metadata.contains("target_fn")) return false;
  const auto fn = parse_target_fn(m.metadata["target_fn"].get<std::string>());
  const auto size = m.metadata["image_size"].get<std::size_t>();
  const auto seed = m.metadata["seed"].get<std::uint64_t>();
  std::map<std::string, std::size_t> index;
  for (const auto& r : m.metadata["records"]) index[r.at("image_ref").get<std::string>()] = r.at("index").get<std::size_t>();
  for (const auto& r : m.records) {
    auto it = index.find(r.image_ref);
    if (it == index.end()) return false;
    const auto img = render_synthetic(it->second, size, seed);
    if (synthetic_score(img.params, fn) != r.score) return false;
  }
  return true;
}

}  // namespace memscore
