#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "memscore/training.hpp"
#include "test_util.hpp"

using namespace memscore;

namespace {

/// A small prepared set from the synthetic generator.
ImageSet tiny_set(std::size_t n, std::uint64_t seed) {
  const auto ds = generate_synthetic(n, 32, seed, TargetFn::texture_plus_category);
  return make_image_set(ds.manifest, ds.images, SimplePipelineConfig{});
}

std::vector<std::vector<float>> snapshot(Model<float>& m) {
  std::vector<std::vector<float>> out;
  for (const auto& np : m.parameters()) out.push_back(np.param->value);
  return out;
}

}  // namespace

TEST(Momentum, TenStepsOnQuadraticMatchClosedForm) {
  // L(w) = (w - 3)^2, w0 = 0, eta = 0.1, gamma = 0.5; exact rational iterates.
  const double expected[10] = {0.6,      1.38,      2.094,      2.6322,      2.97486,
                               3.151218, 3.2091534, 3.19629042, 3.150600846, 3.0976358898};
  nn::Param<double> w({1});
  std::vector<nn::NamedParam<double>> ps{{"w", &w}};
  MomentumSgd<double> opt(0.1, 0.5);
  for (int s = 0; s < 10; ++s) {
    w.grad[0] = 2.0 * (w.value[0] - 3.0);
    opt.step(ps);
    EXPECT_NEAR(w.value[0], expected[s], 1e-12) << "step " << s + 1;
  }
}

TEST(Momentum, FrozenParamsSkipped) {
  nn::Param<float> a({2}), b({2});
  b.frozen = true;
  a.grad = b.grad = {1.0f, -1.0f};
  MomentumSgd<float> opt(0.5, 0.9);
  opt.step({{"a", &a}, {"b", &b}});
  EXPECT_EQ(a.value, (std::vector<float>{-0.5f, 0.5f}));
  EXPECT_EQ(b.value, (std::vector<float>{0.0f, 0.0f}));
}

TEST(Loss, BatchMseIsMeanOfPerExampleErrors) {
  Tensor<float> pred(4, 1, 1, 1);
  pred.values() = {0.2f, 0.9f, 0.5f, 0.1f};
  const std::vector<double> y{0.3, 0.6, 0.5, 0.4};
  Tensor<float> g;
  const double loss = mse_loss(pred, y, g);
  double manual = 0;
  for (int i = 0; i < 4; ++i) manual += std::pow(double(pred.values()[i]) - y[i], 2) / 4;
  EXPECT_NEAR(loss, manual, 1e-7);
  EXPECT_NEAR(g.values()[1], 2 * (0.9 - 0.6) / 4, 1e-6);
  EXPECT_THROW(mse_loss(pred, std::vector<double>{0.1}, g), ValidationError);
}

TEST(EarlyStopper, StrictImprovementAndTies) {
  EarlyStopper s(2);
  EXPECT_TRUE(s.observe(10, 0.4));
  EXPECT_FALSE(s.observe(20, 0.4));  // tie keeps the earlier step
  EXPECT_FALSE(s.should_stop());
  EXPECT_FALSE(s.observe(30, std::nan("")));
  EXPECT_TRUE(s.should_stop());
  EXPECT_EQ(s.best_step(), 10u);
  EXPECT_EQ(*s.best_index(), 0u);
}

TEST(Train, ZeroLearningRateLeavesWeightsUntouched) {
  const auto data = tiny_set(40, 3);
  Model<float> m(preset("tiny", Variant::memnet), 1);
  const auto before = snapshot(m);
  TrainConfig cfg;
  cfg.eta = 0.0;
  cfg.batch_size = 40;
  cfg.max_epochs = 4;
  auto res = train(m, data, data, cfg);
  EXPECT_EQ(snapshot(m), before);
  ASSERT_EQ(res.log.train_loss.size(), 4u);
  // Each epoch visits the same samples in a new order, so only summation order differs.
  for (double l : res.log.train_loss) EXPECT_NEAR(l, res.log.train_loss.front(), 1e-7);
}

TEST(Train, StubbedPeakThenDeclineStopsEarlyAtPeak) {
  const auto data = tiny_set(16, 4);
  Model<float> m(preset("tiny", Variant::memnet), 2);
  const std::vector<double> curve{0.1, 0.3, 0.5, 0.4, 0.35, 0.2, 0.1};
  std::size_t calls = 0;
  std::vector<std::vector<float>> at_peak;
  Evaluator stub = [&](const Model<float>& model) {
    EvalPoint p;
    p.val_spearman = curve.at(calls);
    if (calls == 2) at_peak = snapshot(const_cast<Model<float>&>(model));
    ++calls;
    return p;
  };
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = 20;
  cfg.early_stop_patience = 2;
  auto res = train(m, data, {}, cfg, stub);
  EXPECT_EQ(res.log.stopped_reason, StopReason::early_stop);
  EXPECT_EQ(calls, 5u);
  ASSERT_EQ(res.log.evals.size(), 5u);
  EXPECT_EQ(res.log.best_val_spearman, 0.5);
  EXPECT_EQ(res.log.best_step, res.log.evals[2].step);
  EXPECT_EQ(snapshot(res.best), at_peak);
  EXPECT_NE(snapshot(m), at_peak);
}

TEST(Train, BestIsMaximumOverRecordedEvals) {
  const auto data = tiny_set(48, 5);
  Model<float> m(preset("tiny", Variant::memnet), 3);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.max_epochs = 6;
  cfg.early_stop_patience = 0;
  auto res = train(m, data, data, cfg);
  EXPECT_EQ(res.log.stopped_reason, StopReason::max_epochs);
  ASSERT_EQ(res.log.evals.size(), 6u);
  double best = -1;
  for (const auto& e : res.log.evals)
    if (!std::isnan(e.val_spearman)) best = std::max(best, e.val_spearman);
  EXPECT_EQ(res.log.best_val_spearman, best);
  // The returned model really is the one that scored best.
  EXPECT_NEAR(evaluate_on(res.best, data).val_spearman, best, 1e-12);
}

TEST(Train, EvalEveryStepsAndMaxSteps) {
  const auto data = tiny_set(32, 6);
  Model<float> m(preset("tiny", Variant::memnet), 3);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.eval_every = 3;
  cfg.max_steps = 10;
  cfg.early_stop_patience = 0;
  auto res = train(m, data, data, cfg);
  EXPECT_EQ(res.log.train_loss.size(), 10u);
  std::vector<std::size_t> steps;
  for (const auto& e : res.log.evals) steps.push_back(e.step);
  EXPECT_EQ(steps, (std::vector<std::size_t>{3, 6, 9, 10}));
}

TEST(Train, SameSeedSameRun) {
  const auto data = tiny_set(24, 7);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = 3;
  cfg.seed = 9;
  Model<float> a(preset("tiny", Variant::resmem), 9), b(preset("tiny", Variant::resmem), 9);
  auto ra = train(a, data, data, cfg);
  auto rb = train(b, data, data, cfg);
  EXPECT_EQ(ra.log.train_loss, rb.log.train_loss);
  EXPECT_EQ(snapshot(a), snapshot(b));
}

TEST(Train, FrozenRunLeavesBackboneBitIdentical) {
  const auto data = tiny_set(24, 8);
  Model<float> m(preset("tiny", Variant::resmem), 9);
  m.set_frozen(true);
  std::vector<std::vector<float>> before;
  for (const auto& np : m.parameters())
    if (np.name.starts_with("backbone.")) before.push_back(np.param->value);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.max_epochs = 2;
  train(m, data, data, cfg);
  std::size_t k = 0;
  for (const auto& np : m.parameters())
    if (np.name.starts_with("backbone.")) EXPECT_EQ(np.param->value, before[k++]) << np.name;
}

TEST(Train, DivergenceReportsStep) {
  const auto data = tiny_set(8, 9);
  Model<float> m(preset("tiny", Variant::memnet), 1);
  testutil::param(m, "head.fc2.bias").value[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.batch_size = 8;
  try {
    train(m, data, data, cfg);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 1u);
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST(Train, ConfigValidation) {
  TrainConfig c;
  c.gamma = 1.0;
  EXPECT_THROW(validate(c), DomainError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(validate(c), DomainError);
  c = {};
  c.eta = -0.1;
  EXPECT_THROW(validate(c), DomainError);
  const auto back = nlohmann::json(TrainConfig{0.05, 0.8, 16, 3, 2, 11, 5, 0}).get<TrainConfig>();
  EXPECT_EQ(back.eta, 0.05);
  EXPECT_EQ(back.eval_every, 5u);
}

TEST(Train, ManifestEntryChecksPipelineSize) {
  testutil::TempDir dir;
  const auto ds = generate_synthetic(6, 32, 1, TargetFn::texture_only);
  const auto path = write_synthetic(ds, dir.path());
  Model<float> m(preset("tiny", Variant::memnet), 1);
  TrainConfig cfg;
  cfg.max_epochs = 1;
  SimplePipelineConfig wrong;
  wrong.target_size = 48;
  EXPECT_THROW(train(m, ds.manifest, ds.manifest, dir.path(), wrong, cfg), ShapeError);
  auto [ck, log] = train(m, ds.manifest, ds.manifest, path.parent_path(), SimplePipelineConfig{}, cfg);
  EXPECT_EQ(log.evals.size(), 1u);
  EXPECT_EQ(ck.model.tag(), m.tag());
}

TEST(Jsonl, StepOrderedEvents) {
  TrainLog log;
  log.train_loss = {0.5, 0.4, 0.3};
  log.evals = {{2, 0, 0.2, 0.7}, {3, 0, 0.1, std::nan("")}};
  std::ostringstream out;
  write_jsonl(out, log);
  std::istringstream in(out.str());
  std::vector<nlohmann::json> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(nlohmann::json::parse(l));
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0]["kind"], "train");
  EXPECT_EQ(lines[2]["kind"], "eval");
  EXPECT_EQ(lines[2]["step"], 2);
  EXPECT_EQ(lines[2]["val_spearman"], 0.7);
  EXPECT_TRUE(lines[4]["val_spearman"].is_null());
  EXPECT_FALSE(lines[0].contains("val_mse"));
}

TEST(Sweep, ArityIndependentSeedsAndDeterminism) {
  const auto data = tiny_set(24, 10);
  std::vector<TrainConfig> grid(3);
  for (std::size_t i = 0; i < 3; ++i) {
    grid[i].eta = 0.005 * (i + 1);
    grid[i].batch_size = 8;
    grid[i].max_epochs = 2;
  }
  const auto cfg = preset("tiny", Variant::memnet);
  auto a = sweep(cfg, grid, data, data, 100);
  auto b = sweep(cfg, grid, data, data, 100, 3);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(a[i].error.empty());
    EXPECT_EQ(a[i].config.seed, 100u ^ i);
    EXPECT_EQ(a[i].log.train_loss, b[i].log.train_loss);
  }
  EXPECT_NE(a[0].log.train_loss.front(), a[1].log.train_loss.front());
  EXPECT_NE(a[1].log.train_loss.front(), a[2].log.train_loss.front());
}

TEST(Sweep, FailedRunIsRecordedNotFatal) {
  const auto data = tiny_set(8, 11);
  std::vector<TrainConfig> grid(2);
  grid[0].max_epochs = 1;
  grid[1].gamma = 1.5;
  auto runs = sweep(preset("tiny", Variant::memnet), grid, data, data, 0);
  EXPECT_TRUE(runs[0].error.empty());
  EXPECT_NE(runs[1].error.find("gamma"), std::string::npos);
}

TEST(Sweep, CurvesCsvShape) {
  SweepRun r;
  r.index = 1;
  r.config.eta = 0.01;
  r.log.evals = {{5, 0, 0.02, 0.4}, {10, 1, 0.015, std::nan("")}};
  std::ostringstream out;
  write_curves_csv(out, {r});
  EXPECT_EQ(out.str(), "run,eta,gamma,step,epoch,val_mse,val_spearman\n1,0.01,0.9,5,0,0.02,0.4\n1,0.01,0.9,10,1,0.015,\n");
}

TEST(Pretext, BackboneProbeLearnsCategories) {
  const auto ds = generate_synthetic(128, 32, 12, TargetFn::texture_plus_category);
  const auto data = make_image_set(ds.manifest, ds.images, SimplePipelineConfig{});
  const auto labels = *category_labels(ds.manifest);
  Model<float> m(preset("tiny", Variant::resmem), 3);
  const auto head0 = testutil::param(m, "head.fc0.weight").value;
  PretextConfig pc;
  pc.epochs = 8;
  const double acc = pretrain_backbone(m, data, labels, kShapeCategories, pc);
  EXPECT_GT(acc, 0.4);  // chance is 0.25
  EXPECT_EQ(testutil::param(m, "head.fc0.weight").value, head0);
  EXPECT_THROW(pretrain_backbone(m, data, {0, 1}, 4, pc), ValidationError);
}

TEST(Pretext, SegmenterLearnsMasks) {
  const auto ds = generate_synthetic(64, 32, 13, TargetFn::texture_plus_category);
  const auto data = make_image_set(ds.manifest, ds.images, SimplePipelineConfig{});
  Model<float> m(preset("tiny", Variant::m3m), 3);
  PretextConfig pc;
  pc.epochs = 1;
  const double first = pretrain_segmenter(m, data, ds.masks, pc);
  pc.epochs = 6;
  const double later = pretrain_segmenter(m, data, ds.masks, pc);
  EXPECT_GT(later, first);
}
