#pragma once

// File-only figure rendering on OpenCV canvases: KDE overlays of predictions
// vs ground truth and per-run validation curves from a sweep.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "memscore/datasets.hpp"
#include "memscore/error.hpp"
#include "memscore/metrics.hpp"

namespace memscore::plot {

struct Series {
  std::string label;
  std::vector<double> x, y;
  cv::Scalar color;  // BGR
};

/// Colours in BGR order.
inline const cv::Scalar kOrange(14, 127, 255);
inline const cv::Scalar kBlue(180, 119, 31);

inline cv::Scalar palette(std::size_t i) {
  static const std::array<cv::Scalar, 8> p{kBlue,
                                           kOrange,
                                           cv::Scalar(44, 160, 44),
                                           cv::Scalar(40, 39, 214),
                                           cv::Scalar(189, 103, 148),
                                           cv::Scalar(75, 86, 140),
                                           cv::Scalar(194, 119, 227),
                                           cv::Scalar(34, 189, 188)};
  return p[i % p.size()];
}

struct Figure {
  std::string title, xlabel, ylabel;
  std::vector<Series> series;
  int width = 800, height = 500;
  /// Fixed x range; NaN bounds are fitted to the data.
  double x_min = std::numeric_limits<double>::quiet_NaN(), x_max = std::numeric_limits<double>::quiet_NaN();
};

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline cv::Mat render(const Figure& fig) {
  if (fig.series.empty()) throw ValidationError("plot: nothing to draw");
  double x0 = fig.x_min, x1 = fig.x_max, y0 = 0.0, y1 = -std::numeric_limits<double>::infinity();
  const bool fit_x = std::isnan(x0) || std::isnan(x1);
  if (fit_x) {
    x0 = std::numeric_limits<double>::infinity();
    x1 = -x0;
  }
  for (const auto& s : fig.series) {
    if (s.x.size() != s.y.size()) throw ValidationError("plot: series '" + s.label + "' has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      if (fit_x) {
        x0 = std::min(x0, s.x[i]);
        x1 = std::max(x1, s.x[i]);
      }
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0) || !std::isfinite(y1)) throw ValidationError("plot: no finite points");
  if (x1 <= x0) x1 = x0 + 1.0;
  if (y1 <= y0) y1 = y0 + 1.0;
  y1 += 0.05 * (y1 - y0);

  const int left = 70, right = 20, top = 40, bottom = 50;
  const int pw = fig.width - left - right, ph = fig.height - top - bottom;
  cv::Mat img(fig.height, fig.width, CV_8UC3, cv::Scalar(255, 255, 255));
  auto px = [&](double x, double y) {
    return cv::Point(left + static_cast<int>(std::lround((x - x0) / (x1 - x0) * pw)),
                     top + ph - static_cast<int>(std::lround((y - y0) / (y1 - y0) * ph)));
  };
  const cv::Scalar black(0, 0, 0), grey(200, 200, 200);
  const auto font = cv::FONT_HERSHEY_SIMPLEX;
  for (int t = 0; t <= 5; ++t) {
    const double xv = x0 + (x1 - x0) * t / 5.0, yv = y0 + (y1 - y0) * t / 5.0;
    cv::line(img, px(xv, y0), px(xv, y1), grey, 1);
    cv::line(img, px(x0, yv), px(x1, yv), grey, 1);
    cv::putText(img, tick_label(xv), px(xv, y0) + cv::Point(-12, 18), font, 0.4, black, 1, cv::LINE_AA);
    cv::putText(img, tick_label(yv), px(x0, yv) + cv::Point(-60, 4), font, 0.4, black, 1, cv::LINE_AA);
  }
  cv::rectangle(img, px(x0, y1), px(x1, y0), black, 1);
  cv::putText(img, fig.title, cv::Point(left, 25), font, 0.6, black, 1, cv::LINE_AA);
  cv::putText(img, fig.xlabel, cv::Point(left + pw / 2 - 30, fig.height - 12), font, 0.5, black, 1, cv::LINE_AA);
  cv::putText(img, fig.ylabel, cv::Point(5, top - 8), font, 0.5, black, 1, cv::LINE_AA);

  int legend_y = top + 18;
  for (const auto& s : fig.series) {
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) pts.push_back(px(s.x[i], s.y[i]));
    if (pts.size() == 1) cv::circle(img, pts[0], 3, s.color, cv::FILLED, cv::LINE_AA);
    if (pts.size() > 1) cv::polylines(img, pts, false, s.color, 2, cv::LINE_AA);
    cv::line(img, cv::Point(left + pw - 170, legend_y - 4), cv::Point(left + pw - 145, legend_y - 4), s.color, 3);
    cv::putText(img, s.label, cv::Point(left + pw - 140, legend_y), font, 0.45, black, 1, cv::LINE_AA);
    legend_y += 18;
  }
  return img;
}

inline void save(const Figure& fig, const std::filesystem::path& path) {
  const cv::Mat img = render(fig);
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), img);
  } catch (const cv::Exception&) {
  }
  if (!ok) throw Error("cannot write figure '" + path.string() + "'");
}

/// Density overlay: predictions in orange, ground truth in blue.
inline Figure kde_figure(const KdeCurve& pred, const KdeCurve& truth, const std::string& title = "Score distribution") {
  Figure f;
  f.title = title;
  f.xlabel = "memorability score";
  f.ylabel = "density";
  f.x_min = 0.0;
  f.x_max = 1.0;
  f.series.push_back({"ground truth", truth.grid, truth.density, kBlue});
  f.series.push_back({"predictions", pred.grid, pred.density, kOrange});
  return f;
}

inline Figure kde_figure(const std::vector<double>& predictions, const std::vector<double>& truths,
                         const std::string& title = "Score distribution") {
  return kde_figure(kde(predictions), kde(truths), title);
}

/// Reads the x,density_predictions,density_truths file written by eval.
inline Figure kde_figure_from_csv(std::istream& in, const std::string& title = "Score distribution") {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "x,density_predictions,density_truths")
    throw ParseError("KDE file must start with 'x,density_predictions,density_truths'", 1);
  KdeCurve p, t;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_fields(detail::trim(line), ',');
    if (f.size() != 3) throw ParseError("expected 3 fields", row);
    std::array<double, 3> v{};
    for (std::size_t k = 0; k < 3; ++k) {
      const auto d = detail::parse_double(f[k]);
      if (!d) throw ParseError("'" + std::string(f[k]) + "' is not a number", row);
      v[k] = *d;
    }
    p.grid.push_back(v[0]);
    t.grid.push_back(v[0]);
    p.density.push_back(v[1]);
    t.density.push_back(v[2]);
  }
  return kde_figure(p, t, title);
}

/// Validation Spearman against step, one line per sweep run, from the
/// run,eta,gamma,step,epoch,val_mse,val_spearman curves file.
inline Figure curves_figure(std::istream& in, const std::string& metric = "val_spearman") {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty curves file", 1);
  const auto header = detail::split_fields(detail::trim(line), ',');
  auto col = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw ParseError("curves file has no '" + name + "' column", 1);
  };
  const std::size_t c_run = col("run"), c_eta = col("eta"), c_gamma = col("gamma"), c_step = col("step"),
                    c_metric = col(metric);
  std::map<long, Series> runs;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_fields(detail::trim(line), ',');
    if (f.size() != header.size()) throw ParseError("expected " + std::to_string(header.size()) + " fields", row);
    const auto run = detail::parse_double(f[c_run]), step = detail::parse_double(f[c_step]);
    if (!run || !step) throw ParseError("bad run/step field", row);
    auto& s = runs[static_cast<long>(*run)];
    if (s.label.empty())
      s.label = "eta=" + std::string(f[c_eta]) + " gamma=" + std::string(f[c_gamma]);
    const auto v = detail::parse_double(f[c_metric]);
    s.x.push_back(*step);
    s.y.push_back(v ? *v : std::numeric_limits<double>::quiet_NaN());
  }
  if (runs.empty()) throw ParseError("curves file has no rows", row);
  Figure fig;
  fig.title = "Validation curves";
  fig.xlabel = "step";
  fig.ylabel = metric;
  std::size_t k = 0;
  for (auto& [id, s] : runs) {
    s.color = palette(k++);
    fig.series.push_back(std::move(s));
  }
  return fig;
}

}  // namespace memscore::plot
