#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "memscore/datasets.hpp"
#include "memscore/error.hpp"
#include "memscore/metrics.hpp"
#include "memscore/models.hpp"
#include "memscore/scoring.hpp"

namespace memscore {

/// Scores every test image once through `pipeline` and builds the report.
/// An unreadable image aborts with its ref in the message.
inline EvalReport evaluate(const Model<float>& model, const PipelineConfig& pipeline, const DatasetManifest& test,
                           const std::filesystem::path& root) {
  if (test.empty()) throw ValidationError("evaluate: empty test manifest");
  std::vector<double> preds, truths;
  preds.reserve(test.size());
  for (const auto& r : test.records) {
    ImageTensor img;
    try {
      img = load_image(resolve_ref(root, r.image_ref));
    } catch (const Error& e) {
      throw Error("evaluate: cannot read image '" + r.image_ref + "': " + e.what());
    }
    preds.push_back(score_image(model, pipeline, img));
    truths.push_back(r.score);
  }
  return make_report(std::move(preds), std::move(truths));
}

/// Same as above for images already in memory, aligned with the manifest.
inline EvalReport evaluate(const Model<float>& model, const PipelineConfig& pipeline, const DatasetManifest& test,
                           const std::vector<ImageTensor>& raw) {
  if (test.empty()) throw ValidationError("evaluate: empty test manifest");
  if (raw.size() != test.size()) throw ValidationError("evaluate: image count differs from manifest");
  std::vector<double> preds, truths;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    preds.push_back(score_image(model, pipeline, raw[i]));
    truths.push_back(test.records[i].score);
  }
  return make_report(std::move(preds), std::move(truths));
}

/// x,density_predictions,density_truths on the shared 512-point grid.
inline void write_kde_csv(std::ostream& out, const KdeCurve& pred, const KdeCurve& truth) {
  if (pred.grid.size() != truth.grid.size()) throw ValidationError("write_kde_csv: grid mismatch");
  out << "x,density_predictions,density_truths\n";
  out.precision(10);
  for (std::size_t i = 0; i < pred.grid.size(); ++i)
    out << pred.grid[i] << "," << pred.density[i] << "," << truth.density[i] << "\n";
}

inline void write_kde_csv(std::ostream& out, const EvalReport& r) {
  write_kde_csv(out, kde(r.predictions), kde(r.truths));
}

/// image_ref,score per line; readable as a score list by the plotter.
inline void write_scores_csv(std::ostream& out, const std::vector<std::string>& refs, const std::vector<double>& scores) {
  if (refs.size() != scores.size()) throw ValidationError("write_scores_csv: length mismatch");
  out << "image_ref,score\n";
  out.precision(17);
  for (std::size_t i = 0; i < refs.size(); ++i) out << refs[i] << "," << scores[i] << "\n";
}

/// Reads the `score` column of any CSV with a header row (manifests included).
inline std::vector<double> read_score_column(std::istream& in, const std::string& column = "score") {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty score file", 1);
  const auto header = detail::split_fields(detail::trim(line), ',');
  std::size_t col = header.size();
  for (std::size_t i = 0; i < header.size(); ++i)
    if (detail::trim(header[i]) == column) col = i;
  if (col == header.size()) throw ParseError("score file has no '" + column + "' column", 1);
  std::vector<double> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_fields(detail::trim(line), ',');
    if (col >= fields.size()) throw ParseError("missing '" + column + "' field", row);
    const auto v = detail::parse_double(fields[col]);
    if (!v) throw ParseError("'" + std::string(fields[col]) + "' is not a number", row);
    out.push_back(*v);
  }
  return out;
}

inline std::vector<double> read_score_column(const std::filesystem::path& path, const std::string& column = "score") {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return read_score_column(in, column);
}

}  // namespace memscore
