// memscore command-line tool: synth, split, train, sweep, eval, vis, plot, serve.
//
// Exit codes: 0 ok, 1 invalid input, 2 bad flag, 3 missing file,
// 4 parse/format error, 5 training divergence.
#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>

#include "memscore/memscore.hpp"

namespace fs = std::filesystem;
using namespace memscore;

namespace {

class MissingFile : public Error {
 public:
  explicit MissingFile(const fs::path& p) : Error("no such file: " + p.string()) {}
};

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw MissingFile(p);
}

nlohmann::json read_json(const fs::path& p) {
  require_file(p);
  std::ifstream in(p);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << j.dump(2) << "\n";
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  return out;
}

DatasetManifest load(const fs::path& p) {
  require_file(p);
  return load_manifest(p);
}

fs::path with_suffix(const fs::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix);
}

/// Model, training and pretext settings shared by train and sweep. Values
/// come from --config first and explicit flags override them.
struct RunSettings {
  std::string preset_name = "tiny";
  std::string variant = "resmem";
  std::string frozen = "true";
  std::string config_path;
  TrainConfig train;
  std::size_t pretext_epochs = 5;

  ModelConfig model;
  PipelineConfig pipeline;
};

void add_run_flags(CLI::App* cmd, RunSettings& s) {
  cmd->add_option("--config", s.config_path, "JSON with optional model, train, pipeline and pretext objects");
  cmd->add_option("--preset", s.preset_name, "Size preset")->check(CLI::IsMember({"tiny", "small"}));
  cmd->add_option("--variant", s.variant, "Architecture")->check(CLI::IsMember({"memnet", "resmem", "m3m"}));
  cmd->add_option("--frozen", s.frozen, "Freeze the feature extractors")->check(CLI::IsMember({"true", "false"}));
  cmd->add_option("--seed", s.train.seed, "Init and shuffle seed");
  cmd->add_option("--batch-size", s.train.batch_size, "Minibatch size")->check(CLI::PositiveNumber);
  cmd->add_option("--epochs", s.train.max_epochs, "Maximum epochs");
  cmd->add_option("--patience", s.train.early_stop_patience, "Early-stopping patience in evaluations");
  cmd->add_option("--pretext-epochs", s.pretext_epochs, "Category pretraining epochs when labels exist (0 disables)");
}

void resolve_settings(CLI::App* cmd, RunSettings& s) {
  nlohmann::json cfg = nlohmann::json::object();
  if (!s.config_path.empty()) cfg = read_json(s.config_path);
  try {
    if (cfg.contains("train")) {
      TrainConfig from_file = cfg["train"].get<TrainConfig>();
      auto keep = [&](const char* flag, auto& field, auto value) {
        if (cmd->count(flag) == 0) field = value;
      };
      keep("--seed", s.train.seed, from_file.seed);
      keep("--batch-size", s.train.batch_size, from_file.batch_size);
      keep("--epochs", s.train.max_epochs, from_file.max_epochs);
      keep("--patience", s.train.early_stop_patience, from_file.early_stop_patience);
      if (!cmd->get_option_no_throw("--eta") || cmd->count("--eta") == 0) s.train.eta = from_file.eta;
      if (!cmd->get_option_no_throw("--gamma") || cmd->count("--gamma") == 0) s.train.gamma = from_file.gamma;
      s.train.eval_every = from_file.eval_every;
      s.train.max_steps = from_file.max_steps;
    }
    if (cfg.contains("pretext") && cmd->count("--pretext-epochs") == 0)
      s.pretext_epochs = cfg["pretext"].value("epochs", s.pretext_epochs);
    const bool flags_name_model = cmd->count("--preset") || cmd->count("--variant");
    if (cfg.contains("model") && !flags_name_model) s.model = cfg["model"].get<ModelConfig>();
    else s.model = preset(s.preset_name, parse_variant(s.variant));
    SimplePipelineConfig simple;
    simple.target_size = s.model.input_size;
    s.pipeline = cfg.contains("pipeline") ? pipeline_from_json(cfg["pipeline"]) : PipelineConfig(simple);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("config: " + std::string(e.what()));
  }
  validate(s.model);
  validate(s.train);
}

/// Fits the feature extractors on the synthetic pretext tasks when the
/// manifest carries category metadata; a no-op otherwise.
void pretrain_extractors(Model<float>& m, const DatasetManifest& train_m, const ImageSet& data, const RunSettings& s) {
  if (s.pretext_epochs == 0 || m.config().variant == Variant::memnet) return;
  const auto labels = category_labels(train_m);
  if (!labels) return;
  PretextConfig pc;
  pc.epochs = s.pretext_epochs;
  pc.seed = s.train.seed;
  const double acc = pretrain_backbone(m, data, *labels, kShapeCategories, pc);
  std::cerr << "pretext backbone accuracy " << acc << "\n";
  if (m.config().variant != Variant::m3m || !train_m.metadata.contains("records")) return;
  const auto size = train_m.metadata.at("image_size").get<std::size_t>();
  const auto seed = train_m.metadata.at("seed").get<std::uint64_t>();
  std::map<std::string, std::size_t> index;
  for (const auto& r : train_m.metadata["records"]) index[r.at("image_ref").get<std::string>()] = r.at("index").get<std::size_t>();
  std::vector<std::vector<std::uint8_t>> masks;
  for (const auto& r : train_m.records) masks.push_back(render_synthetic(index.at(r.image_ref), size, seed).mask);
  const auto ms = m.segmentation_map_shape();
  if (ms.h * ms.w != size * size) return;
  std::cerr << "pretext segmenter accuracy " << pretrain_segmenter(m, data, masks, pc) << "\n";
}

void apply_freeze(Model<float>& m, const RunSettings& s) {
  if (m.config().variant != Variant::memnet) m.set_frozen(s.frozen == "true");
}

int run_synth(std::size_t n, std::size_t size, std::uint64_t seed, const std::string& target, const fs::path& out) {
  const auto ds = generate_synthetic(n, size, seed, parse_target_fn(target));
  const auto path = write_synthetic(ds, out);
  std::cout << "wrote " << n << " images and " << path.string() << "\n";
  return 0;
}

int run_split(const fs::path& manifest, const fs::path& out, const SplitSpec& spec) {
  const auto m = load(manifest);
  const auto parts = split(m, spec);
  fs::create_directories(out);
  const fs::path src_dir = fs::absolute(manifest).parent_path();
  const bool moved = fs::weakly_canonical(out) != fs::weakly_canonical(src_dir);
  // Refs are relative to the manifest, so a different output directory needs them rebased.
  auto rebase = [&](const std::string& ref) { return fs::relative(resolve_ref(src_dir, ref), fs::absolute(out)).string(); };
  for (const auto& [name, part] : {std::pair{"train", &parts.train}, {"val", &parts.val}, {"test", &parts.test}}) {
    auto copy = *part;
    if (moved) {
      for (auto& r : copy.records) r.image_ref = rebase(r.image_ref);
      if (copy.metadata.contains("records"))
        for (auto& r : copy.metadata["records"]) r["image_ref"] = rebase(r.at("image_ref").get<std::string>());
    }
    save_manifest(copy, out / (std::string(name) + manifest.extension().string()));
  }
  std::cout << "train " << parts.train.size() << ", val " << parts.val.size() << ", test " << parts.test.size() << "\n";
  return 0;
}

int run_train(CLI::App* cmd, RunSettings& s, const fs::path& manifest, const fs::path& val_path,
              const fs::path& checkpoint, fs::path log_path) {
  resolve_settings(cmd, s);
  const auto train_m = load(manifest), val_m = load(val_path);
  Model<float> model(s.model, s.train.seed);
  const auto train_set = load_image_set(train_m, manifest.parent_path(), s.pipeline);
  const auto val_set = load_image_set(val_m, val_path.parent_path(), s.pipeline);
  if (pipeline_output_size(s.pipeline) != model.config().input_size)
    throw ShapeError("pipeline output size does not match model input size");
  pretrain_extractors(model, train_m, train_set, s);
  apply_freeze(model, s);
  auto res = train(model, train_set, val_set, s.train);
  if (checkpoint.has_parent_path()) fs::create_directories(checkpoint.parent_path());
  save_checkpoint(checkpoint, res.best, s.pipeline, res.meta);
  if (log_path.empty()) log_path = with_suffix(checkpoint, ".log.jsonl");
  auto log = open_out(log_path);
  write_jsonl(log, res.log);
  std::cout << "best val spearman " << res.log.best_val_spearman << " at step " << res.log.best_step << " ("
            << to_string(res.log.stopped_reason) << "); wrote " << checkpoint.string() << "\n";
  return 0;
}

int run_sweep(CLI::App* cmd, RunSettings& s, const fs::path& manifest, const fs::path& val_path,
              const std::vector<double>& etas, const std::vector<double>& gammas, std::size_t jobs, const fs::path& out) {
  resolve_settings(cmd, s);
  const auto train_m = load(manifest), val_m = load(val_path);
  const auto train_set = load_image_set(train_m, manifest.parent_path(), s.pipeline);
  const auto val_set = load_image_set(val_m, val_path.parent_path(), s.pipeline);
  std::vector<TrainConfig> grid;
  for (double eta : etas)
    for (double gamma : gammas) {
      auto c = s.train;
      c.eta = eta;
      c.gamma = gamma;
      validate(c);
      grid.push_back(c);
    }
  const auto runs = sweep(s.model, grid, train_set, val_set, s.train.seed, jobs, [&](const Model<float>& m, std::size_t) {
    auto& mm = const_cast<Model<float>&>(m);
    pretrain_extractors(mm, train_m, train_set, s);
    apply_freeze(mm, s);
  });
  fs::create_directories(out);
  auto curves = open_out(out / "curves.csv");
  write_curves_csv(curves, runs);
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& r : runs) {
    auto log = open_out(out / ("run" + std::to_string(r.index) + ".jsonl"));
    write_jsonl(log, r.log);
    nlohmann::json row{{"run", r.index}, {"config", r.config}};
    if (r.error.empty()) {
      row["best_step"] = r.log.best_step;
      row["best_val_spearman"] = r.log.best_val_spearman;
    } else {
      row["error"] = r.error;
    }
    summary.push_back(row);
    std::cout << "run " << r.index << " eta " << r.config.eta << " gamma " << r.config.gamma << ": "
              << (r.error.empty() ? "best val spearman " + std::to_string(r.log.best_val_spearman) : r.error) << "\n";
  }
  write_json(out / "summary.json", summary);
  return 0;
}

int run_eval(const std::string& ck_flag, const fs::path& manifest, const fs::path& out) {
  const fs::path ck_path = ck_flag;
  require_file(ck_path);
  const auto ck = load_checkpoint(ck_path);
  const auto test = load(manifest);
  const auto r = evaluate(ck.model, ck.pipeline, test, manifest.parent_path());
  auto j = to_json(r);
  j["model_tag"] = ck.model.tag();
  j["pipeline_tag"] = pipeline_tag(ck.pipeline);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_json(out, j);
  auto kcsv = open_out(with_suffix(out, ".kde.csv"));
  write_kde_csv(kcsv, r);
  std::vector<std::string> refs;
  for (const auto& rec : test.records) refs.push_back(rec.image_ref);
  auto pcsv = open_out(with_suffix(out, ".pred.csv"));
  write_scores_csv(pcsv, refs, r.predictions);
  std::cout << "n " << r.n << ", mse " << r.mse << ", rmse " << r.rmse << ", spearman "
            << (r.spearman ? std::to_string(*r.spearman) : "undefined") << "\n";
  return 0;
}

struct VisArgs {
  std::string checkpoint, layer;
  std::vector<std::size_t> filters;
  fs::path out = "features.png", manifest;
  std::size_t top = 5;
  VisConfig cfg;
};

int run_vis(VisArgs a) {
  require_file(a.checkpoint);
  auto ck = load_checkpoint(a.checkpoint);
  if (a.layer.empty()) throw ValidationError("vis: --layer is required; available: " + [&] {
    std::string s;
    for (const auto& id : ck.model.layer_ids()) s += (s.empty() ? "" : " ") + id;
    return s;
  }());
  if (a.filters.empty()) {
    const std::size_t n = std::min<std::size_t>(ck.model.layer_shape(a.layer).c, 25);
    for (std::size_t f = 0; f < n; ++f) a.filters.push_back(f);
  }
  const auto norm = InputNormalization::from(ck.pipeline);
  std::vector<ImageTensor> images;
  std::vector<std::string> labels;
  nlohmann::json sidecar = nlohmann::json::array();
  for (auto f : a.filters) {
    const FeatureSpec spec{a.layer, f};
    try {
      const auto r = activation_maximize(ck.model, spec, a.cfg, norm);
      images.push_back(r.image);
      sidecar.push_back(vis_sidecar(spec, r));
    } catch (const DeadFilterError& e) {
      images.push_back(make_image(3, ck.model.config().input_size, ck.model.config().input_size, 0.5f));
      sidecar.push_back({{"layer_id", a.layer}, {"filter_index", f}, {"error", e.what()}});
    }
    labels.push_back("f" + std::to_string(f));
  }
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  render_grid(images, labels, a.out);
  write_json(with_suffix(a.out, ".json"), sidecar);
  std::cout << "wrote " << a.out.string() << " (" << images.size() << " filters)\n";

  if (!a.manifest.empty()) {
    const auto m = load(a.manifest);
    const auto set = load_image_set(m, a.manifest.parent_path(), ck.pipeline);
    std::vector<ImageTensor> raws;
    std::vector<std::string> top_labels;
    nlohmann::json top = nlohmann::json::array();
    for (auto f : a.filters) {
      const auto hits = max_activating_images(ck.model, {a.layer, f}, set, std::min(a.top, set.size()));
      for (const auto& h : hits) {
        raws.push_back(resize_bilinear(load_image(resolve_ref(a.manifest.parent_path(), h.image_ref)),
                                       ck.model.config().input_size, ck.model.config().input_size));
        top_labels.push_back("f" + std::to_string(f));
        top.push_back({{"filter_index", f}, {"image_ref", h.image_ref}, {"activation", h.activation}});
      }
    }
    const auto top_path = with_suffix(a.out, ".top.png");
    render_grid(raws, top_labels, top_path);
    write_json(with_suffix(a.out, ".top.json"), top);
    std::cout << "wrote " << top_path.string() << "\n";
  }
  return 0;
}

int run_plot(const std::string& kind, const fs::path& pred, const fs::path& truth, const fs::path& input,
             const std::string& metric, fs::path out) {
  plot::Figure fig;
  if (kind == "kde") {
    if (!input.empty()) {
      require_file(input);
      std::ifstream in(input);
      fig = plot::kde_figure_from_csv(in);
    } else {
      if (pred.empty() || truth.empty()) throw ValidationError("plot kde needs --pred and --truth, or --in");
      require_file(pred);
      require_file(truth);
      fig = plot::kde_figure(read_score_column(pred), read_score_column(truth));
    }
  } else {
    if (input.empty()) throw ValidationError("plot curves needs --in curves.csv");
    require_file(input);
    std::ifstream in(input);
    fig = plot::curves_figure(in, metric);
  }
  if (out.empty()) out = kind + ".png";
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  plot::save(fig, out);
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

ScoringService* g_service = nullptr;

int run_serve(const std::string& ck_flag, const std::string& bind, std::size_t max_body_mb) {
  const fs::path path = checkpoint_path_or_env(ck_flag);
  require_file(path);
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw ValidationError("--bind must be host:port, got '" + bind + "'");
  const std::string host = bind.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(bind.substr(colon + 1));
  } catch (const std::exception&) {
    throw ValidationError("--bind port is not a number: '" + bind + "'");
  }
  ServiceConfig cfg;
  cfg.max_body_bytes = max_body_mb * 1024 * 1024;
  ScoringService svc(load_checkpoint(path), cfg);
  g_service = &svc;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  std::cerr << "serving " << svc.model_tag() << " on " << host << ":" << port << "\n";
  if (!svc.listen(host, port)) throw Error("cannot bind " + bind);
  return 0;
}

std::string failure_class(const std::exception& e) {
  if (dynamic_cast<const MissingFile*>(&e)) return "missing file";
  if (dynamic_cast<const ParseError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const DecodeError*>(&e))
    return "parse error";
  if (dynamic_cast<const DivergenceError*>(&e)) return "training diverged";
  return "invalid input";
}

int exit_code(const std::string& cls) {
  if (cls == "missing file") return 3;
  if (cls == "parse error") return 4;
  if (cls == "training diverged") return 5;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Image memorability regression toolkit"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset (images + manifest)");
  std::size_t n = 500, size = 32;
  std::uint64_t synth_seed = 0;
  std::string target = "texture_plus_category";
  fs::path synth_out = "synthetic";
  synth->add_option("-n,--count", n, "Number of images")->check(CLI::PositiveNumber);
  synth->add_option("--size", size, "Image side in pixels")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--target", target, "Score function")
      ->check(CLI::IsMember({"texture_only", "category_only", "texture_plus_category"}));
  synth->add_option("--out", synth_out, "Output directory");

  auto* split_cmd = app.add_subcommand("split", "Seeded train/val/test split of a manifest");
  fs::path split_manifest, split_out;
  SplitSpec spec;
  split_cmd->add_option("--manifest", split_manifest, "Input manifest")->required();
  split_cmd->add_option("--out", split_out, "Output directory (default: next to the manifest)");
  split_cmd->add_option("--seed", spec.seed, "Split seed");
  split_cmd->add_option("--train", spec.train_frac, "Train fraction");
  split_cmd->add_option("--val", spec.val_frac, "Validation fraction");
  split_cmd->add_option("--test", spec.test_frac, "Test fraction");

  auto* train_cmd = app.add_subcommand("train", "Train one model with early stopping on validation Spearman");
  RunSettings train_s;
  fs::path train_manifest, train_val, train_ck = "model.ckpt", train_log;
  add_run_flags(train_cmd, train_s);
  train_cmd->add_option("--manifest", train_manifest, "Training manifest")->required();
  train_cmd->add_option("--val", train_val, "Validation manifest")->required();
  train_cmd->add_option("--checkpoint", train_ck, "Output checkpoint");
  train_cmd->add_option("--out", train_log, "JSONL training log (default: <checkpoint>.log.jsonl)");
  train_cmd->add_option("--eta", train_s.train.eta, "Learning rate");
  train_cmd->add_option("--gamma", train_s.train.gamma, "Momentum");

  auto* sweep_cmd = app.add_subcommand("sweep", "Grid over learning rate and momentum");
  RunSettings sweep_s;
  fs::path sweep_manifest, sweep_val, sweep_out = "sweep";
  std::vector<double> etas{0.01}, gammas{0.9};
  std::size_t jobs = 1;
  add_run_flags(sweep_cmd, sweep_s);
  sweep_cmd->add_option("--manifest", sweep_manifest, "Training manifest")->required();
  sweep_cmd->add_option("--val", sweep_val, "Validation manifest")->required();
  sweep_cmd->add_option("--eta", etas, "Learning rates")->delimiter(',');
  sweep_cmd->add_option("--gamma", gammas, "Momentum values")->delimiter(',');
  sweep_cmd->add_option("--jobs", jobs, "Concurrent runs");
  sweep_cmd->add_option("--out", sweep_out, "Output directory");

  auto* eval_cmd = app.add_subcommand("eval", "Score a test manifest and write the report");
  std::string eval_ck;
  fs::path eval_manifest, eval_out = "report.json";
  eval_cmd->add_option("--checkpoint", eval_ck, "Checkpoint")->required();
  eval_cmd->add_option("--manifest", eval_manifest, "Test manifest")->required();
  eval_cmd->add_option("--out", eval_out, "Report JSON; .kde.csv and .pred.csv are written alongside");

  auto* vis_cmd = app.add_subcommand("vis", "Feature visualization grids");
  VisArgs vis;
  vis_cmd->add_option("--checkpoint", vis.checkpoint, "Checkpoint")->required();
  vis_cmd->add_option("--layer", vis.layer, "Layer id, e.g. trunk.relu1");
  vis_cmd->add_option("--filter", vis.filters, "Filter indices (default: first 25)")->delimiter(',');
  vis_cmd->add_option("--steps", vis.cfg.steps, "Ascent steps")->check(CLI::PositiveNumber);
  vis_cmd->add_option("--step-size", vis.cfg.step_size, "Initial step size");
  vis_cmd->add_option("--jitter", vis.cfg.jitter, "Max roll in pixels");
  vis_cmd->add_option("--l2-decay", vis.cfg.l2_decay, "Per-step pixel decay");
  vis_cmd->add_option("--seed", vis.cfg.seed, "Noise seed");
  vis_cmd->add_option("--manifest", vis.manifest, "Also write the top activating dataset images");
  vis_cmd->add_option("--top", vis.top, "Images per filter for --manifest")->check(CLI::PositiveNumber);
  vis_cmd->add_option("--out", vis.out, "Grid image");

  auto* plot_cmd = app.add_subcommand("plot", "Render KDE or sweep-curve figures");
  std::string kind = "kde", metric = "val_spearman";
  fs::path pred, truth, plot_in, plot_out;
  plot_cmd->add_option("--kind", kind, "Figure kind")->check(CLI::IsMember({"kde", "curves"}));
  plot_cmd->add_option("--pred", pred, "CSV with a score column of predictions");
  plot_cmd->add_option("--truth", truth, "CSV with a score column of ground truth");
  plot_cmd->add_option("--in", plot_in, "KDE CSV from eval, or curves CSV from sweep");
  plot_cmd->add_option("--metric", metric, "Curves column")->check(CLI::IsMember({"val_spearman", "val_mse"}));
  plot_cmd->add_option("--out", plot_out, "Figure path (default <kind>.png)");

  auto* serve_cmd = app.add_subcommand("serve", "HTTP scoring service");
  std::string serve_ck, bind = "127.0.0.1:8080";
  std::size_t max_body_mb = 10;
  serve_cmd->add_option("--checkpoint", serve_ck, std::string("Checkpoint (default $") + kCheckpointEnv + ")");
  serve_cmd->add_option("--bind", bind, "host:port");
  serve_cmd->add_option("--max-body-mb", max_body_mb, "Request size limit")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    // Required-option checks run before extras are reported, so name unknown flags first.
    std::string unknown;
    const CLI::App* active = &app;
    for (const auto* sub : app.get_subcommands()) {
      active = sub;
      for (const auto& x : sub->remaining()) unknown += " " + x;
    }
    for (const auto& x : app.remaining()) unknown += " " + x;
    std::cerr << "memscore: error: bad flag: " << (unknown.empty() ? e.what() : "unrecognized argument(s):" + unknown)
              << "\n\n" << active->help();
    return 2;
  }

  try {
    if (*synth) return run_synth(n, size, synth_seed, target, synth_out);
    if (*split_cmd)
      return run_split(split_manifest, split_out.empty() ? fs::absolute(split_manifest).parent_path() : split_out, spec);
    if (*train_cmd) return run_train(train_cmd, train_s, train_manifest, train_val, train_ck, train_log);
    if (*sweep_cmd) return run_sweep(sweep_cmd, sweep_s, sweep_manifest, sweep_val, etas, gammas, jobs, sweep_out);
    if (*eval_cmd) return run_eval(eval_ck, eval_manifest, eval_out);
    if (*vis_cmd) return run_vis(vis);
    if (*plot_cmd) return run_plot(kind, pred, truth, plot_in, metric, plot_out);
    if (*serve_cmd) return run_serve(serve_ck, bind, max_body_mb);
  } catch (const std::exception& e) {
    const auto cls = failure_class(e);
    std::cerr << "memscore: error: " << cls << ": " << e.what() << "\n";
    return exit_code(cls);
  }
  return 0;
}
