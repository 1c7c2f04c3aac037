#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "memscore/error.hpp"

namespace memscore {

/// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && v[order[j]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("pearson: length mismatch");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw UndefinedCorrelation();
  // sqrt of the product keeps pearson(x, x) == 1 exactly.
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw ValidationError("spearman: length mismatch (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  if (a.size() < 2) throw ValidationError("spearman: need at least 2 observations");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  return pearson(ra, rb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return spearman(std::span<const double>(a), std::span<const double>(b));
}

inline double mse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size()) throw ValidationError("mse: length mismatch");
  if (pred.empty()) throw ValidationError("mse: empty input");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

struct CutoffStats {
  double pred_min = 0, pred_max = 0;
  /// Fraction of ground-truth values strictly below pred_min.
  double frac_truth_below = 0;
};

inline double fraction_below(std::span<const double> values, double threshold) {
  if (values.empty()) throw ValidationError("fraction_below: empty input");
  const auto k = std::count_if(values.begin(), values.end(), [&](double v) { return v < threshold; });
  return static_cast<double>(k) / static_cast<double>(values.size());
}

inline CutoffStats cutoff_stats(std::span<const double> predictions, std::span<const double> truths) {
  if (predictions.empty() || truths.empty()) throw ValidationError("cutoff_stats: empty input");
  const auto [lo, hi] = std::minmax_element(predictions.begin(), predictions.end());
  return {*lo, *hi, fraction_below(truths, *lo)};
}

struct EvalReport {
  std::size_t n = 0;
  double mse = 0, rmse = 0;
  /// Empty when rho is undefined (constant predictions or truths).
  std::optional<double> spearman;
  std::string spearman_error;
  double pred_min = 0, pred_max = 0;
  std::vector<double> predictions, truths;

  double frac_below(double threshold) const { return fraction_below(truths, threshold); }
};

/// Builds the report from paired predictions and ground truth.
inline EvalReport make_report(std::vector<double> predictions, std::vector<double> truths) {
  if (predictions.empty()) throw ValidationError("evaluate: empty test set");
  EvalReport r;
  r.n = predictions.size();
  r.mse = mse(predictions, truths);
  r.rmse = std::sqrt(r.mse);
  try {
    r.spearman = spearman(predictions, truths);
  } catch (const UndefinedCorrelation& e) {
    r.spearman_error = e.what();
  } catch (const ValidationError& e) {
    r.spearman_error = e.what();
  }
  const auto c = cutoff_stats(predictions, truths);
  r.pred_min = c.pred_min;
  r.pred_max = c.pred_max;
  r.predictions = std::move(predictions);
  r.truths = std::move(truths);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"n", r.n},
                      {"mse", r.mse},
                      {"rmse", r.rmse},
                      {"pred_min", r.pred_min},
                      {"pred_max", r.pred_max},
                      {"frac_truth_below_pred_min", r.frac_below(r.pred_min)}};
  j["spearman"] = r.spearman ? nlohmann::json(*r.spearman) : nlohmann::json(nullptr);
  if (!r.spearman) j["spearman_error"] = r.spearman_error;
  return j;
}

struct KdeCurve {
  std::vector<double> grid;
  std::vector<double> density;
  double bandwidth = 0;
};

inline constexpr std::size_t kKdeGridPoints = 512;

/// Smallest usable bandwidth: 1.5 grid spacings, below which the trapezoid
/// rule on the 512-point grid stops resolving the kernel.
inline constexpr double kKdeMinBandwidth = 1.5 / (kKdeGridPoints - 1);

/// Silverman's rule of thumb: 0.9 min(sd, IQR/1.34) n^(-1/5).
inline double silverman_bandwidth(std::span<const double> values) {
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1));
  std::vector<double> s(values.begin(), values.end());
  std::sort(s.begin(), s.end());
  auto quantile = [&](double q) {
    const double pos = q * (s.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (pos - lo) * (s[hi] - s[lo]);
  };
  const double iqr = (quantile(0.75) - quantile(0.25)) / 1.34;
  double spread = std::min(sd, iqr);
  if (spread <= 0) spread = std::max(sd, iqr);
  return 0.9 * spread * std::pow(n, -0.2);
}

/// Gaussian KDE on a 512-point grid over [0,1] with reflection at both
/// boundaries. Reflections are summed until the kernel is negligible, so the
/// density carries all of the sample's mass inside [0,1]. Values outside
/// [0,1] are clamped first. `bandwidth` <= 0 selects Silverman's rule.
inline KdeCurve kde(std::span<const double> values, double bandwidth = 0.0) {
  if (values.size() < 2) throw ValidationError("kde: need at least 2 values");
  double h = bandwidth > 0 ? bandwidth : silverman_bandwidth(values);
  h = std::max(h, kKdeMinBandwidth);
  KdeCurve out;
  out.bandwidth = h;
  out.grid.resize(kKdeGridPoints);
  out.density.assign(kKdeGridPoints, 0.0);
  for (std::size_t i = 0; i < kKdeGridPoints; ++i) out.grid[i] = static_cast<double>(i) / (kKdeGridPoints - 1);
  const double norm = 1.0 / (h * std::sqrt(2.0 * std::numbers::pi) * static_cast<double>(values.size()));
  const double reach = 12.0 * h;
  const int kmax = static_cast<int>(std::ceil(reach / 2.0)) + 1;
  for (double raw : values) {
    const double v = std::clamp(raw, 0.0, 1.0);
    for (int k = -kmax; k <= kmax; ++k) {
      for (const double centre : {v + 2.0 * k, -v + 2.0 * k}) {
        if (centre < -reach || centre > 1.0 + reach) continue;
        for (std::size_t i = 0; i < kKdeGridPoints; ++i) {
          const double z = (out.grid[i] - centre) / h;
          if (std::abs(z) < 12.0) out.density[i] += norm * std::exp(-0.5 * z * z);
        }
      }
    }
  }
  return out;
}

inline double trapezoid(std::span<const double> x, std::span<const double> y) {
  double s = 0;
  for (std::size_t i = 1; i < x.size(); ++i) s += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  return s;
}

}  // namespace memscore
