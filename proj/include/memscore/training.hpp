#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "memscore/checkpoint.hpp"
#include "memscore/error.hpp"
#include "memscore/metrics.hpp"
#include "memscore/models.hpp"
#include "memscore/rng.hpp"
#include "memscore/scoring.hpp"

namespace memscore {

struct TrainConfig {
  double eta = 0.01;
  double gamma = 0.9;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 20;
  std::size_t early_stop_patience = 5;
  std::uint64_t seed = 0;
  /// Evaluate every N steps; 0 evaluates once per epoch.
  std::size_t eval_every = 0;
  /// Hard cap on optimizer steps; 0 means no cap.
  std::size_t max_steps = 0;
};

inline void validate(const TrainConfig& c) {
  if (!(c.eta >= 0.0)) throw DomainError("eta must be >= 0");
  if (!(c.gamma >= 0.0 && c.gamma < 1.0)) throw DomainError("gamma must lie in [0,1)");
  if (c.batch_size < 1) throw DomainError("batch_size must be >= 1");
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"eta", c.eta},
       {"gamma", c.gamma},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},
       {"early_stop_patience", c.early_stop_patience},
       {"seed", c.seed},
       {"eval_every", c.eval_every},
       {"max_steps", c.max_steps}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (j.contains("eta")) j["eta"].get_to(c.eta);
  if (j.contains("gamma")) j["gamma"].get_to(c.gamma);
  if (j.contains("batch_size")) j["batch_size"].get_to(c.batch_size);
  if (j.contains("max_epochs")) j["max_epochs"].get_to(c.max_epochs);
  if (j.contains("early_stop_patience")) j["early_stop_patience"].get_to(c.early_stop_patience);
  if (j.contains("seed")) j["seed"].get_to(c.seed);
  if (j.contains("eval_every")) j["eval_every"].get_to(c.eval_every);
  if (j.contains("max_steps")) j["max_steps"].get_to(c.max_steps);
}

enum class StopReason { early_stop, max_epochs };

inline std::string to_string(StopReason r) { return r == StopReason::early_stop ? "early_stop" : "max_epochs"; }

struct EvalPoint {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double val_mse = 0;
  /// NaN when rho is undefined (constant predictions).
  double val_spearman = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
  std::vector<double> train_loss;  // one per step
  std::vector<EvalPoint> evals;
  std::size_t best_step = 0;
  double best_val_spearman = -std::numeric_limits<double>::infinity();
  StopReason stopped_reason = StopReason::max_epochs;
};

/// One JSON object per line: {"step", "kind": "train"|"eval", "loss"?, "val_mse"?, "val_spearman"?}.
/// Train events precede the eval at the same step.
inline void write_jsonl(std::ostream& out, const TrainLog& log) {
  std::size_t e = 0;
  auto flush_evals = [&](std::size_t upto_step) {
    for (; e < log.evals.size() && log.evals[e].step <= upto_step; ++e) {
      nlohmann::json j = {{"step", log.evals[e].step}, {"kind", "eval"}, {"val_mse", log.evals[e].val_mse}};
      j["val_spearman"] = std::isnan(log.evals[e].val_spearman) ? nlohmann::json(nullptr)
                                                                 : nlohmann::json(log.evals[e].val_spearman);
      out << j.dump() << "\n";
    }
  };
  flush_evals(0);
  for (std::size_t s = 0; s < log.train_loss.size(); ++s) {
    out << nlohmann::json{{"step", s + 1}, {"kind", "train"}, {"loss", log.train_loss[s]}}.dump() << "\n";
    flush_evals(s + 1);
  }
  flush_evals(std::numeric_limits<std::size_t>::max());
}

/// Tracks the best validation Spearman; halts after `patience` evaluations
/// without strict improvement (ties keep the earlier step).
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  /// Returns true when this evaluation is the new best.
  bool observe(std::size_t step, double val_spearman) {
    ++seen_;
    if (!std::isnan(val_spearman) && val_spearman > best_) {
      best_ = val_spearman;
      best_step_ = step;
      best_index_ = seen_ - 1;
      since_best_ = 0;
      return true;
    }
    ++since_best_;
    return false;
  }
  bool should_stop() const { return patience_ > 0 && since_best_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_step() const { return best_step_; }
  std::optional<std::size_t> best_index() const {
    return std::isinf(best_) ? std::nullopt : std::optional<std::size_t>(best_index_);
  }

 private:
  std::size_t patience_;
  std::size_t seen_ = 0, since_best_ = 0, best_step_ = 0, best_index_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
};

/// Classical momentum: v <- gamma v - eta grad; w <- w + v. Frozen
/// parameters are skipped entirely.
template <typename T>
class MomentumSgd {
 public:
  MomentumSgd(double eta, double gamma) : eta_(eta), gamma_(gamma) {}

  void step(const std::vector<nn::NamedParam<T>>& params) {
    if (velocity_.size() != params.size()) {
      velocity_.clear();
      for (const auto& np : params) velocity_.emplace_back(np.param->size(), T(0));
    }
    const T eta = static_cast<T>(eta_), gamma = static_cast<T>(gamma_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = *params[k].param;
      if (p.frozen) continue;
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = gamma * v[i] - eta * p.grad[i];
        p.value[i] += v[i];
      }
    }
  }

 private:
  double eta_, gamma_;
  std::vector<std::vector<T>> velocity_;
};

/// Mean squared error over the batch; writes dL/dpred into `grad`.
template <typename T>
double mse_loss(const Tensor<T>& pred, std::span<const double> target, Tensor<T>& grad) {
  const std::size_t n = pred.size();
  if (n != target.size()) throw ValidationError("mse_loss: prediction/target count mismatch");
  grad = Tensor<T>(pred.n(), pred.c(), pred.h(), pred.w());
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.data()[i]) - target[i];
    loss += d * d;
    grad.data()[i] = static_cast<T>(2.0 * d / static_cast<double>(n));
  }
  return loss / static_cast<double>(n);
}

/// Gathers samples `idx[begin, end)` into one batch tensor.
template <typename T>
Tensor<T> gather(const std::vector<Tensor<T>>& inputs, const std::vector<std::size_t>& idx, std::size_t begin,
                 std::size_t end) {
  const auto& f = inputs.at(idx[begin]);
  Tensor<T> out(end - begin, f.c(), f.h(), f.w());
  for (std::size_t k = begin; k < end; ++k) {
    const auto& s = inputs[idx[k]];
    std::copy(s.data(), s.data() + s.size(), out.sample(k - begin).data());
  }
  return out;
}

struct TrainResult {
  Model<float> best;
  TrainMeta meta;
  TrainLog log;
};

/// Validation evaluation hook; the default scores the validation set.
using Evaluator = std::function<EvalPoint(const Model<float>&)>;

inline EvalPoint evaluate_on(const Model<float>& model, const ImageSet& val) {
  EvalPoint p;
  const auto pred = predict(model, val.inputs);
  p.val_mse = mse(pred, val.scores);
  try {
    p.val_spearman = spearman(pred, val.scores);
  } catch (const UndefinedCorrelation&) {
  }
  return p;
}

/// Trains `model` in place on MSE with momentum SGD and returns a copy of the
/// weights from the evaluation with the highest validation Spearman.
/// Batches follow a per-epoch permutation seeded from (cfg.seed, epoch).
inline TrainResult train(Model<float>& model, const ImageSet& train_set, const ImageSet& val_set,
                         const TrainConfig& cfg, Evaluator evaluator = nullptr,
                         const std::function<void(const EvalPoint&)>& on_eval = nullptr) {
  validate(cfg);
  if (train_set.empty()) throw ValidationError("train: empty training set");
  if (!evaluator && val_set.empty()) throw ValidationError("train: empty validation set");
  if (!train_set.inputs.empty()) model.check_input(train_set.inputs.front());
  if (!evaluator) evaluator = [&](const Model<float>& m) { return evaluate_on(m, val_set); };

  auto params = model.parameters();
  MomentumSgd<float> opt(cfg.eta, cfg.gamma);
  EarlyStopper stopper(cfg.early_stop_patience);
  TrainResult res;
  std::vector<std::vector<float>> best_values;
  auto snapshot = [&] {
    best_values.clear();
    for (const auto& np : params) best_values.push_back(np.param->value);
  };

  std::size_t step = 0, epoch = 0;
  bool stop = false;
  auto run_eval = [&] {
    EvalPoint p = evaluator(model);
    p.step = step;
    p.epoch = epoch;
    res.log.evals.push_back(p);
    if (on_eval) on_eval(p);
    if (stopper.observe(step, p.val_spearman)) {
      snapshot();
      res.meta = {epoch, step, p.val_spearman, cfg.seed};
    }
    if (stopper.should_stop()) {
      res.log.stopped_reason = StopReason::early_stop;
      stop = true;
    }
  };

  const std::size_t n = train_set.size();
  typename Model<float>::State state;
  Tensor<float> grad;
  for (epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    Rng rng(mix_seed(cfg.seed, 0xE0C4 + epoch));
    const auto perm = rng.permutation(n);
    for (std::size_t start = 0; start < n && !stop; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const Tensor<float> batch = gather(train_set.inputs, perm, start, end);
      std::vector<double> target(end - start);
      for (std::size_t k = start; k < end; ++k) target[k - start] = train_set.scores[perm[k]];
      const Tensor<float> pred = model.forward(batch, state);
      const double loss = mse_loss(pred, target, grad);
      ++step;
      if (!std::isfinite(loss)) throw DivergenceError(step, "non-finite training loss");
      model.zero_grad();
      model.backward(grad, state);
      opt.step(params);
      res.log.train_loss.push_back(loss);
      if (cfg.eval_every && step % cfg.eval_every == 0) run_eval();
      if (cfg.max_steps && step >= cfg.max_steps) stop = true;
    }
    if (!cfg.eval_every && !res.log.evals.empty() && res.log.evals.back().step == step) continue;
    if (!cfg.eval_every || (stop && res.log.stopped_reason != StopReason::early_stop)) {
      if (res.log.evals.empty() || res.log.evals.back().step != step) run_eval();
    }
  }
  if (res.log.stopped_reason != StopReason::early_stop) res.log.stopped_reason = StopReason::max_epochs;

  res.best = model;
  if (!best_values.empty()) {
    auto bp = res.best.parameters();
    for (std::size_t k = 0; k < bp.size(); ++k) bp[k].param->value = best_values[k];
    res.log.best_step = stopper.best_step();
    res.log.best_val_spearman = stopper.best();
  } else {
    res.log.best_step = step;
    res.meta = {epoch, step, std::numeric_limits<double>::quiet_NaN(), cfg.seed};
  }
  return res;
}

/// Manifest-level entry point: loads images through the pipeline and trains.
inline std::pair<Checkpoint, TrainLog> train(Model<float>& model, const DatasetManifest& train_m,
                                             const DatasetManifest& val_m, const std::filesystem::path& root,
                                             const PipelineConfig& pipeline, const TrainConfig& cfg) {
  if (train_m.empty() || val_m.empty()) throw ValidationError("train: manifests must be non-empty");
  if (pipeline_output_size(pipeline) != model.config().input_size)
    throw ShapeError("pipeline output size does not match model input size");
  auto tr = load_image_set(train_m, root, pipeline);
  auto va = load_image_set(val_m, root, pipeline);
  auto res = train(model, tr, va, cfg);
  return {Checkpoint{std::move(res.best), pipeline, res.meta}, std::move(res.log)};
}

// ---------------------------------------------------------------------------
// Pretext training for the feature extractors (stand-in for ImageNet / VOC
// pretrained weights): shape-category classification for the residual
// backbone and per-pixel classification for the segmenter.

struct PretextConfig {
  double eta = 0.01;
  double gamma = 0.9;
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
};

/// Trains the backbone plus a throwaway linear probe on softmax cross-entropy.
/// Returns the final-epoch training accuracy.
inline double pretrain_backbone(Model<float>& model, const ImageSet& data, const std::vector<int>& labels,
                                std::size_t n_classes, const PretextConfig& cfg) {
  if (!model.has_backbone()) throw ValidationError("pretrain_backbone: model has no residual backbone");
  if (labels.size() != data.size()) throw ValidationError("pretrain_backbone: label count mismatch");
  const std::size_t fd = model.config().backbone->feature_dim;
  nn::Linear<float> probe(fd, n_classes);
  Rng init(mix_seed(cfg.seed, 0xBEEF));
  probe.init(init);
  std::vector<nn::NamedParam<float>> params;
  model.backbone().collect("backbone.", params);
  probe.collect("probe.", params);
  MomentumSgd<float> opt(cfg.eta, cfg.gamma);
  double accuracy = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, 0xC1A55 + epoch));
    const auto perm = rng.permutation(data.size());
    std::size_t correct = 0;
    for (std::size_t start = 0; start < data.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(data.size(), start + cfg.batch_size), bn = end - start;
      const auto batch = gather(data.inputs, perm, start, end);
      std::vector<nn::Cache<float>> caches;
      nn::Cache<float> pc;
      const auto feat = model.backbone().forward(batch, caches);
      const auto logits = probe.forward(feat, pc);
      Tensor<float> dlogits(bn, n_classes, 1, 1);
      double loss = 0;
      for (std::size_t i = 0; i < bn; ++i) {
        const int y = labels[perm[start + i]];
        const float* z = logits.sample(i).data();
        const float m = *std::max_element(z, z + n_classes);
        double sum = 0;
        for (std::size_t c = 0; c < n_classes; ++c) sum += std::exp(z[c] - m);
        std::size_t arg = 0;
        for (std::size_t c = 0; c < n_classes; ++c) {
          const double p = std::exp(z[c] - m) / sum;
          dlogits(i, c, 0, 0) = static_cast<float>((p - (static_cast<int>(c) == y ? 1.0 : 0.0)) / bn);
          if (z[c] > z[arg]) arg = c;
        }
        loss -= (z[y] - m) - std::log(sum);
        correct += static_cast<int>(arg) == y;
      }
      if (!std::isfinite(loss)) throw DivergenceError(epoch, "non-finite pretext loss");
      for (auto& np : params) np.param->zero_grad();
      const auto dfeat = probe.backward(dlogits, pc, {true, true});
      model.backbone().backward(dfeat, caches, {false, true});
      opt.step(params);
    }
    accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  }
  return accuracy;
}

/// Trains the segmenter on per-pixel cross-entropy against class masks of
/// the segmentation-map resolution. Returns final-epoch pixel accuracy.
inline double pretrain_segmenter(Model<float>& model, const ImageSet& data,
                                 const std::vector<std::vector<std::uint8_t>>& masks, const PretextConfig& cfg) {
  if (model.segmenter().empty()) throw ValidationError("pretrain_segmenter: model has no segmentation branch");
  if (masks.size() != data.size()) throw ValidationError("pretrain_segmenter: mask count mismatch");
  const auto ms = model.segmentation_map_shape();
  const std::size_t hw = ms.h * ms.w;
  for (const auto& m : masks)
    if (m.size() != hw) throw ShapeError("pretrain_segmenter: mask resolution differs from segmentation map");
  std::vector<nn::NamedParam<float>> params;
  model.segmenter().collect("segmenter.", params);
  MomentumSgd<float> opt(cfg.eta, cfg.gamma);
  double accuracy = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, 0x5E6 + epoch));
    const auto perm = rng.permutation(data.size());
    std::size_t correct = 0;
    for (std::size_t start = 0; start < data.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(data.size(), start + cfg.batch_size), bn = end - start;
      const auto batch = gather(data.inputs, perm, start, end);
      std::vector<nn::Cache<float>> caches;
      const auto prob = model.segmenter().forward(batch, caches);
      Tensor<float> dprob(bn, ms.c, ms.h, ms.w);
      const double scale = 1.0 / static_cast<double>(bn * hw);
      for (std::size_t i = 0; i < bn; ++i) {
        const auto& mask = masks[perm[start + i]];
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t y = mask[p];
          const float py = std::max(prob.data()[(i * ms.c + y) * hw + p], 1e-12f);
          dprob.data()[(i * ms.c + y) * hw + p] = static_cast<float>(-scale / py);
          std::size_t arg = 0;
          for (std::size_t c = 1; c < ms.c; ++c)
            if (prob.data()[(i * ms.c + c) * hw + p] > prob.data()[(i * ms.c + arg) * hw + p]) arg = c;
          correct += arg == y;
        }
      }
      for (auto& np : params) np.param->zero_grad();
      model.segmenter().backward(dprob, caches, {false, true});
      opt.step(params);
    }
    accuracy = static_cast<double>(correct) / static_cast<double>(data.size() * hw);
  }
  return accuracy;
}

// ---------------------------------------------------------------------------
// Hyperparameter sweeps

struct SweepRun {
  std::size_t index = 0;
  TrainConfig config;
  TrainLog log;
  /// Empty on success; the failure message otherwise.
  std::string error;
};

/// Per-run seed: base seed XOR run index.
inline std::uint64_t sweep_seed(std::uint64_t base, std::size_t index) { return base ^ index; }

/// One independent run per grid entry, each with its own model init and
/// shuffle seed. Failures are recorded per run. `jobs` > 1 runs concurrently;
/// results are identical either way.
inline std::vector<SweepRun> sweep(const ModelConfig& model_cfg, const std::vector<TrainConfig>& grid,
                                   const ImageSet& train_set, const ImageSet& val_set, std::uint64_t base_seed,
                                   std::size_t jobs = 1,
                                   const std::function<void(const Model<float>&, std::size_t)>& prepare = nullptr) {
  if (grid.empty()) throw ValidationError("sweep: empty grid");
  auto run_one = [&](std::size_t i) {
    SweepRun r;
    r.index = i;
    r.config = grid[i];
    r.config.seed = sweep_seed(base_seed, i);
    try {
      Model<float> model(model_cfg, r.config.seed);
      if (prepare) prepare(model, i);
      r.log = train(model, train_set, val_set, r.config).log;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    return r;
  };
  std::vector<SweepRun> out(grid.size());
  if (jobs <= 1) {
    for (std::size_t i = 0; i < grid.size(); ++i) out[i] = run_one(i);
    return out;
  }
  for (std::size_t start = 0; start < grid.size(); start += jobs) {
    std::vector<std::future<SweepRun>> fs;
    for (std::size_t i = start; i < std::min(grid.size(), start + jobs); ++i)
      fs.push_back(std::async(std::launch::async, run_one, i));
    for (auto& f : fs) {
      auto r = f.get();
      out[r.index] = std::move(r);
    }
  }
  return out;
}

/// Combined validation curves: run,eta,gamma,step,epoch,val_mse,val_spearman.
inline void write_curves_csv(std::ostream& out, const std::vector<SweepRun>& runs) {
  out << "run,eta,gamma,step,epoch,val_mse,val_spearman\n";
  for (const auto& r : runs)
    for (const auto& e : r.log.evals) {
      out << r.index << "," << r.config.eta << "," << r.config.gamma << "," << e.step << "," << e.epoch << ","
          << e.val_mse << ",";
      if (!std::isnan(e.val_spearman)) out << e.val_spearman;
      out << "\n";
    }
}

}  // namespace memscore
