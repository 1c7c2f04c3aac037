#pragma once

// Independent reference implementations used only as test oracles. They
// share no code with the library beyond plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace oracle {

/// Rank by counting: 1 + #smaller + (#equal - 1) / 2.
inline std::vector<long double> count_ranks(const std::vector<double>& v) {
  std::vector<long double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::size_t less = 0, equal = 0;
    for (double x : v) {
      less += x < v[i];
      equal += x == v[i];
    }
    r[i] = 1.0L + static_cast<long double>(less) + (static_cast<long double>(equal) - 1.0L) / 2.0L;
  }
  return r;
}

inline double pearson(const std::vector<long double>& a, const std::vector<long double>& b) {
  const auto n = static_cast<long double>(a.size());
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  long double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    da += (a[i] - ma) * (a[i] - ma);
    db += (b[i] - mb) * (b[i] - mb);
  }
  return static_cast<double>(num / std::sqrt(da * db));
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(count_ranks(a), count_ranks(b));
}

/// Closed form for tie-free data.
inline double spearman_closed_form(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = count_ranks(a), rb = count_ranks(b);
  long double d2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  const auto n = static_cast<long double>(a.size());
  return static_cast<double>(1.0L - 6.0L * d2 / (n * (n * n - 1.0L)));
}

/// Split-half consistency with its own RNG (std::shuffle on mt19937_64).
inline double split_half(const std::vector<std::vector<int>>& responses, int n_resamples, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  double total = 0;
  for (int s = 0; s < n_resamples; ++s) {
    std::vector<double> a, b;
    for (auto r : responses) {
      std::shuffle(r.begin(), r.end(), gen);
      const std::size_t half = (r.size() + 1) / 2;
      double sa = 0, sb = 0;
      for (std::size_t k = 0; k < r.size(); ++k) (k < half ? sa : sb) += r[k];
      a.push_back(sa / half);
      b.push_back(sb / (r.size() - half));
    }
    total += spearman(a, b);
  }
  return total / n_resamples;
}

/// Direct 3x3 / 1x1 convolution with zero padding, NCHW single sample.
inline std::vector<double> conv(const std::vector<double>& x, std::size_t cin, std::size_t h, std::size_t w,
                                const std::vector<double>& weight, const std::vector<double>& bias, std::size_t cout,
                                std::size_t k, std::size_t stride, std::size_t pad, std::size_t& ho, std::size_t& wo) {
  ho = (h + 2 * pad - k) / stride + 1;
  wo = (w + 2 * pad - k) / stride + 1;
  std::vector<double> y(cout * ho * wo, 0.0);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t yy = 0; yy < ho; ++yy)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        double s = bias[o];
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(yy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(xx * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              s += weight[((o * cin + c) * k + ky) * k + kx] * x[(c * h + iy) * w + ix];
            }
        y[(o * ho + yy) * wo + xx] = s;
      }
  return y;
}

inline double relu(double v) { return v > 0 ? v : 0; }

/// Gaussian KDE at x from explicit mirror images about 0 and 1 (three
/// reflections on each side).
inline double reflected_density(const std::vector<double>& values, double h, double x) {
  double s = 0;
  for (double v : values)
    for (int k = -3; k <= 3; ++k)
      for (double c : {v + 2.0 * k, -v + 2.0 * k}) {
        const double z = (x - c) / h;
        s += std::exp(-0.5 * z * z);
      }
  return s / (values.size() * h * std::sqrt(2.0 * std::numbers::pi));
}

}  // namespace oracle
