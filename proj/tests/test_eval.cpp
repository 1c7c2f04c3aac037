#include <algorithm>
#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "memscore/eval.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace memscore;

namespace {

std::vector<double> with_ties(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = std::round(rng.uniform() * 20.0) / 20.0;  // 21 levels, many ties
  return v;
}

std::vector<std::size_t> local_maxima(const KdeCurve& c) {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i + 1 < c.density.size(); ++i)
    if (c.density[i] > c.density[i - 1] && c.density[i] >= c.density[i + 1]) out.push_back(i);
  return out;
}

}  // namespace

TEST(Spearman, IdenticalAndReversed) {
  EXPECT_DOUBLE_EQ(spearman(std::vector<double>{0.1, 0.5, 0.9}, {0.1, 0.5, 0.9}), 1.0);
  EXPECT_DOUBLE_EQ(spearman(std::vector<double>{1, 2, 3}, {3, 2, 1}), -1.0);
}

TEST(Spearman, TiesGetAverageRanks) {
  EXPECT_EQ(average_ranks(std::vector<double>{0.3, 0.1, 0.3, 0.2}), (std::vector<double>{3.5, 1, 3.5, 2}));
}

TEST(Spearman, MatchesIndependentOracleWithTies) {
  Rng rng(1);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 5 + rng.below(60);
    const auto a = with_ties(rng, n), b = with_ties(rng, n);
    EXPECT_NEAR(spearman(a, b), oracle::spearman(a, b), 1e-12);
  }
}

TEST(Spearman, TieFreeEqualsClosedForm) {
  Rng rng(2);
  std::vector<double> a(50), b(50);
  for (auto& x : a) x = rng.uniform();
  for (auto& x : b) x = rng.uniform();
  EXPECT_NEAR(spearman(a, b), oracle::spearman_closed_form(a, b), 1e-12);
}

TEST(Spearman, InvariantUnderMonotoneMaps) {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const auto a = with_ties(rng, 40), b = with_ties(rng, 40);
    const double k = 0.5 + 3 * rng.uniform(), s = rng.uniform();
    auto fa = a, fb = b;
    for (auto& x : fa) x = std::exp(k * x) + s;
    for (auto& x : fb) x = std::pow(x + 0.1, 3) * k;
    EXPECT_NEAR(spearman(fa, fb), spearman(a, b), 1e-12);
  }
}

TEST(Spearman, SymmetricAndAntisymmetric) {
  Rng rng(4);
  std::vector<double> a(30), b(30);
  for (auto& x : a) x = rng.uniform();
  for (auto& x : b) x = rng.uniform();
  EXPECT_DOUBLE_EQ(spearman(a, b), spearman(b, a));
  auto nb = b;
  for (auto& x : nb) x = -x;
  EXPECT_NEAR(spearman(a, nb), -spearman(a, b), 1e-15);
}

TEST(Spearman, Errors) {
  EXPECT_THROW(spearman(std::vector<double>{1, 2}, {1, 2, 3}), ValidationError);
  EXPECT_THROW(spearman(std::vector<double>{1}, {1}), ValidationError);
  EXPECT_THROW(spearman(std::vector<double>{0.5, 0.5, 0.5}, {0.1, 0.2, 0.3}), UndefinedCorrelation);
}

TEST(Report, PerfectPredictor) {
  const auto r = make_report({0.2, 0.5, 0.7}, {0.2, 0.5, 0.7});
  EXPECT_EQ(r.mse, 0.0);
  EXPECT_EQ(*r.spearman, 1.0);
}

TEST(Report, RmseIsSqrtMse) {
  const std::vector<double> truth{0.5, 0.5};
  const double d = std::sqrt(0.012);
  const auto r = make_report({0.5 + d, 0.5 - d}, truth);
  EXPECT_NEAR(r.mse, 0.012, 1e-15);
  EXPECT_NEAR(r.rmse, 0.1095, 5e-5);
  EXPECT_NEAR(r.rmse * r.rmse, r.mse, 1e-12);
}

TEST(Report, ConstantPredictionsLeaveRhoUndefined) {
  const auto r = make_report({0.6, 0.6, 0.6}, {0.2, 0.5, 0.9});
  EXPECT_FALSE(r.spearman.has_value());
  EXPECT_NE(r.spearman_error.find("undefined"), std::string::npos);
  EXPECT_NEAR(r.mse, (0.16 + 0.01 + 0.09) / 3, 1e-12);
  const auto j = to_json(r);
  EXPECT_TRUE(j["spearman"].is_null());
  EXPECT_TRUE(j.contains("spearman_error"));
}

TEST(Cutoff, SixInAThousandBelow) {
  std::vector<double> truths(1000, 0.6);
  for (int i = 0; i < 6; ++i) truths[i * 100] = 0.3;
  truths[999] = 0.411;  // strictly-below rule excludes the boundary value
  const std::vector<double> pred{0.411, 0.7, 0.9};
  const auto c = cutoff_stats(pred, truths);
  EXPECT_EQ(c.pred_min, 0.411);
  EXPECT_EQ(c.pred_max, 0.9);
  EXPECT_DOUBLE_EQ(c.frac_truth_below, 0.006);
}

TEST(Cutoff, FullRangeAndSingleValue) {
  EXPECT_EQ(cutoff_stats(std::vector<double>{0.0, 1.0}, std::vector<double>{0.3, 0.4}).frac_truth_below, 0.0);
  const auto c = cutoff_stats(std::vector<double>{0.42}, std::vector<double>{0.3});
  EXPECT_EQ(c.pred_min, c.pred_max);
  EXPECT_THROW(cutoff_stats(std::vector<double>{}, std::vector<double>{0.1}), ValidationError);
}

TEST(Kde, PointMassIsUnimodalAtCentre) {
  const auto c = kde(std::vector<double>(10, 0.5), 0.02);
  EXPECT_NEAR(trapezoid(c.grid, c.density), 1.0, 1e-3);
  const auto m = local_maxima(c);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_NEAR(c.grid[m[0]], 0.5, 1.0 / 511);
  for (double d : c.density) EXPECT_GE(d, 0.0);
}

TEST(Kde, BimodalMatchesIndependentDensity) {
  std::vector<double> v;
  for (int i = 0; i < 20; ++i) v.push_back(0.3 + 0.002 * (i - 10));
  for (int i = 0; i < 20; ++i) v.push_back(0.8 + 0.002 * (i - 10));
  const auto c = kde(v);
  const auto m = local_maxima(c);
  ASSERT_EQ(m.size(), 2u);
  EXPECT_NEAR(c.grid[m[0]], 0.3, 0.01);
  EXPECT_NEAR(c.grid[m[1]], 0.8, 0.01);
  for (std::size_t i = 0; i < c.grid.size(); i += 37)
    EXPECT_NEAR(c.density[i], oracle::reflected_density(v, c.bandwidth, c.grid[i]), 1e-9);
}

TEST(Kde, BoundaryReflectionConservesMass) {
  std::vector<double> v;
  Rng rng(5);
  for (int i = 0; i < 50; ++i) v.push_back(0.02 + 0.005 * rng.normal());
  const auto c = kde(v);
  EXPECT_NEAR(trapezoid(c.grid, c.density), 1.0, 1e-3);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> w(2 + rng.below(100));
    for (auto& x : w) x = rng.bernoulli(0.5) ? rng.uniform() : rng.uniform() * 0.03;
    const auto k = kde(w);
    EXPECT_NEAR(trapezoid(k.grid, k.density), 1.0, 1e-3);
  }
}

TEST(Kde, GridAndErrors) {
  const auto c = kde(std::vector<double>{0.2, 0.4});
  ASSERT_EQ(c.grid.size(), 512u);
  EXPECT_EQ(c.grid.front(), 0.0);
  EXPECT_EQ(c.grid.back(), 1.0);
  EXPECT_TRUE(std::is_sorted(c.grid.begin(), c.grid.end()));
  EXPECT_THROW(kde(std::vector<double>{0.5}), ValidationError);
  EXPECT_THROW(kde(std::vector<double>{}), ValidationError);
}

TEST(Evaluate, PermutationInvariantAndMatchesScoring) {
  const auto ds = generate_synthetic(20, 32, 6, TargetFn::texture_only);
  Model<float> m(preset("tiny", Variant::memnet), 2);
  const SimplePipelineConfig pipe;
  const auto r1 = evaluate(m, pipe, ds.manifest, ds.images);

  auto shuffled = ds.manifest;
  auto images = ds.images;
  std::reverse(shuffled.records.begin(), shuffled.records.end());
  std::reverse(images.begin(), images.end());
  const auto r2 = evaluate(m, pipe, shuffled, images);
  EXPECT_NEAR(r1.mse, r2.mse, 1e-15);
  EXPECT_NEAR(*r1.spearman, *r2.spearman, 1e-12);
  EXPECT_EQ(r1.pred_min, r2.pred_min);
  EXPECT_EQ(r1.predictions[3], score_image(m, pipe, ds.images[3]));
}

TEST(Evaluate, FromDiskReportsUnreadableRef) {
  testutil::TempDir dir;
  const auto ds = generate_synthetic(4, 32, 7, TargetFn::texture_only);
  const auto path = write_synthetic(ds, dir.path());
  Model<float> m(preset("tiny", Variant::memnet), 2);
  const auto r = evaluate(m, SimplePipelineConfig{}, ds.manifest, dir.path());
  EXPECT_EQ(r.n, 4u);
  std::filesystem::remove(dir.path() / ds.manifest.records[2].image_ref);
  try {
    evaluate(m, SimplePipelineConfig{}, ds.manifest, dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(ds.manifest.records[2].image_ref), std::string::npos);
  }
  EXPECT_THROW(evaluate(m, SimplePipelineConfig{}, DatasetManifest{}, dir.path()), ValidationError);
}

TEST(Csv, KdeAndScoresRoundTrip) {
  const auto r = make_report({0.3, 0.6, 0.8}, {0.2, 0.5, 0.9});
  std::stringstream kcsv;
  write_kde_csv(kcsv, r);
  std::string header;
  std::getline(kcsv, header);
  EXPECT_EQ(header, "x,density_predictions,density_truths");
  std::size_t rows = 0;
  for (std::string l; std::getline(kcsv, l);) ++rows;
  EXPECT_EQ(rows, 512u);

  std::stringstream s;
  write_scores_csv(s, {"a.png", "b.png"}, {0.25, 0.75});
  EXPECT_EQ(read_score_column(s), (std::vector<double>{0.25, 0.75}));
  std::istringstream bad("image_ref,value\na,0.1\n");
  EXPECT_THROW(read_score_column(bad), ParseError);
}
