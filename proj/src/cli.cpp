#include "srctrace/cli.hpp"

#include "srctrace/dataset.hpp"
#include "srctrace/synth.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>

namespace srctrace::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::string percent(double fraction) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << fraction * 100.0;
  return s.str();
}

std::string summary_line(double acc, double eer) {
  return "acc=" + percent(acc) + " eer=" + percent(eer);
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

/// Run log: the only output that carries timestamps.
class RunLog {
 public:
  explicit RunLog(const fs::path& path) : out_(path, std::ios::app) {}
  void line(const std::string& msg) {
    std::lock_guard lock(mu_);
    out_ << timestamp() << ' ' << msg << '\n';
    out_.flush();
  }

 private:
  std::mutex mu_;
  std::ofstream out_;
};

void check_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown " + section + " key '" + key + "'");
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

ViewPaths parse_views(const nlohmann::json& j, const fs::path& base, const std::string& section) {
  check_keys(j, {"view_a", "view_b"}, section);
  if (!j.contains("view_a")) throw ConfigError(section + ".view_a is required");
  ViewPaths v;
  v.view_a = resolve(base, j["view_a"].get<std::string>());
  if (j.contains("view_b") && !j["view_b"].is_null()) v.view_b = resolve(base, j["view_b"].get<std::string>());
  return v;
}

nlohmann::json views_json(const ViewPaths& v) {
  nlohmann::json j = {{"view_a", v.view_a.string()}};
  j["view_b"] = v.view_b.empty() ? nlohmann::json(nullptr) : nlohmann::json(v.view_b.string());
  return j;
}

/// Loads one split, pairing views when the architecture fuses them.
PairedDataset load_split(const ViewPaths& paths, bool fusion, std::ostream& err, const std::string& what) {
  EmbeddingTable a = load_embedding_file(paths.view_a);
  if (!a.has_labels()) throw DataError(what + ": " + paths.view_a.string() + " has no labels");
  if (!fusion) {
    if (!paths.view_b.empty())
      err << "warning: " << what << ": single-view architecture, view B ignored\n";
    return PairedDataset::single(std::move(a));
  }
  if (paths.view_b.empty()) throw ConfigError("fusion requires two views");
  EmbeddingTable b = load_embedding_file(paths.view_b);
  if (a.class_names() != b.class_names())
    throw DataError(what + ": views disagree on class names");
  return pair_align(a, b);
}

/// Fill data-dependent model fields; explicit values must agree with the data.
ModelConfig resolve_model(const nlohmann::json& section, const PairedDataset& data) {
  ModelConfig m = model_config_from_json(section);
  auto settle = [](std::size_t& field, std::size_t actual, const char* name) {
    if (field != 0 && field != actual)
      throw DataError(std::string("config ") + name + " = " + std::to_string(field) +
                      " but data has " + std::to_string(actual));
    field = actual;
  };
  settle(m.d_in_a, data.view_a().dim(), "d_in_a");
  if (m.is_fusion()) settle(m.d_in_b, data.view_b().dim(), "d_in_b");
  else m.d_in_b = 0;
  settle(m.n_classes, data.num_classes(), "n_classes");
  m.validate();
  return m;
}

bool fusion_arch(const nlohmann::json& model_section) {
  const ModelConfig m = model_config_from_json(model_section);
  return m.is_fusion();
}

void write_fold_outputs(const fs::path& dir, Model& model, const TrainHistory& history,
                        const MetricsReport& report) {
  fs::create_directories(dir);
  save_checkpoint(model, dir / "model.ckpt");
  write_text(dir / "history.csv", history.to_csv());
  write_json(dir / "metrics.json", to_json(report));
  write_text(dir / "confusion.csv", confusion_csv(report));
}

nlohmann::json history_json(const TrainHistory& h) {
  return {{"stopped_epoch", h.stopped_epoch}, {"best_epoch", h.best_epoch}};
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  SynthSpec spec;
  std::string out;
};

int cmd_synth(const SynthArgs& args, std::ostream& out) {
  args.spec.validate();
  const fs::path dir(args.out);
  fs::create_directories(dir);
  const PairedDataset data = gen_two_view(args.spec);
  write_embedding_file(data.view_a(), dir / "view_a.steb");
  write_embedding_file(data.view_b(), dir / "view_b.steb");
  out << "wrote " << data.size() << " samples to " << (dir / "view_a.steb").string() << " and "
      << (dir / "view_b.steb").string() << '\n';
  return kExitOk;
}

int cmd_train(const std::string& config_path, std::ostream& out, std::ostream& err) {
  const RunConfig rc = load_run_config(config_path);
  const bool fusion = fusion_arch(rc.model);
  PairedDataset pool = load_split(rc.train, fusion, err, "train");

  PairedDataset test;
  if (rc.test) {
    test = load_split(*rc.test, fusion, err, "test");
  } else {
    auto [keep, held] = stratified_split(pool.labels(), rc.test_fraction, derive_seed(rc.train_config.seed, 3));
    test = pool.select(held);
    pool = pool.select(keep);
  }
  PairedDataset fit, val;
  if (rc.val) {
    fit = std::move(pool);
    val = load_split(*rc.val, fusion, err, "val");
  } else {
    auto [keep, held] = stratified_split(pool.labels(), rc.train_config.val_fraction,
                                         derive_seed(rc.train_config.seed, 4));
    fit = pool.select(keep);
    val = pool.select(held);
  }
  for (const PairedDataset* split : {&val, &test})
    if (split->view_a().class_names() != fit.view_a().class_names())
      throw DataError("splits disagree on class names");

  const ModelConfig mc = resolve_model(rc.model, fit);
  fs::create_directories(rc.output_dir);
  write_json(rc.output_dir / "config.resolved.json", resolved_json(rc, mc));
  RunLog log(rc.output_dir / "run.log");
  log.line("train start: arch=" + to_string(mc.arch) + " train=" + std::to_string(fit.size()) +
           " val=" + std::to_string(val.size()) + " test=" + std::to_string(test.size()));

  Model model(mc, rc.train_config.seed);
  const TrainHistory history = train(model, fit, val, rc.train_config);
  const MetricsReport report = evaluate(model, test);
  write_fold_outputs(rc.output_dir, model, history, report);
  write_json(rc.output_dir / "split.json",
             {{"train_ids", fit.view_a().ids()}, {"val_ids", val.view_a().ids()},
              {"test_ids", test.view_a().ids()}, {"history", history_json(history)}});
  log.line("train done: epochs=" + std::to_string(history.stopped_epoch) +
           " best=" + std::to_string(history.best_epoch) + " " + summary_line(report.accuracy, report.eer_avg));
  out << summary_line(report.accuracy, report.eer_avg) << '\n';
  return kExitOk;
}

int cmd_kfold(const std::string& config_path, int k, int jobs, std::ostream& out, std::ostream& err) {
  if (k < 2) throw ConfigError("--k must be at least 2");
  if (jobs < 1) throw ConfigError("--jobs must be at least 1");
  const RunConfig rc = load_run_config(config_path);
  if (rc.val || rc.test) throw ConfigError("kfold uses dataset.train only; remove val/test sections");
  const bool fusion = fusion_arch(rc.model);
  const PairedDataset data = load_split(rc.train, fusion, err, "train");
  const ModelConfig mc = resolve_model(rc.model, data);

  fs::create_directories(rc.output_dir);
  nlohmann::json resolved = resolved_json(rc, mc);
  resolved["kfold"] = {{"k", k}};
  write_json(rc.output_dir / "config.resolved.json", resolved);
  RunLog log(rc.output_dir / "run.log");
  log.line("kfold start: k=" + std::to_string(k) + " jobs=" + std::to_string(jobs));

  const KFoldResult result = run_kfold(
      data, k, mc, rc.train_config, jobs,
      [&](int fold, Model& model, const TrainHistory& history, const MetricsReport& report) {
        write_fold_outputs(rc.output_dir / ("fold_" + std::to_string(fold)), model, history, report);
        log.line("fold " + std::to_string(fold) + " done: " + summary_line(report.accuracy, report.eer_avg));
      });
  write_json(rc.output_dir / "average.json", to_json(result.average));
  for (std::size_t i = 0; i < result.reports.size(); ++i)
    out << "fold_" << i << ' ' << summary_line(result.reports[i].accuracy, result.reports[i].eer_avg) << '\n';
  out << "average " << summary_line(result.average.accuracy, result.average.eer_avg) << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string view_a;
  std::string view_b;
  std::string out;
  std::string config;
};

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  Model model = load_checkpoint(args.checkpoint);
  if (!args.config.empty()) {
    std::ifstream in(args.config);
    if (!in) throw IoError("cannot open " + args.config);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(args.config + ": " + e.what());
    }
    const ModelConfig expected = model_config_from_json(j.contains("model") ? j["model"] : j);
    if (config_hash(expected) != config_hash(model.config()))
      throw ConfigError("config-hash mismatch: checkpoint " + config_hash(model.config()) +
                        ", config " + config_hash(expected));
  }
  const ModelConfig& mc = model.config();
  const PairedDataset data = load_split({args.view_a, args.view_b}, mc.is_fusion(), err, "eval");
  if (data.view_a().dim() != mc.d_in_a)
    throw DataError("view A dim mismatch: expected " + std::to_string(mc.d_in_a) + ", got " +
                    std::to_string(data.view_a().dim()));
  if (mc.is_fusion() && data.view_b().dim() != mc.d_in_b)
    throw DataError("view B dim mismatch: expected " + std::to_string(mc.d_in_b) + ", got " +
                    std::to_string(data.view_b().dim()));
  const MetricsReport report = evaluate(model, data);
  const fs::path dir(args.out);
  fs::create_directories(dir);
  write_json(dir / "metrics.json", to_json(report));
  write_text(dir / "confusion.csv", confusion_csv(report));
  out << summary_line(report.accuracy, report.eer_avg) << '\n';
  return kExitOk;
}

}  // namespace

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  check_keys(j, {"dataset", "model", "train", "output"}, "config");
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();

  RunConfig rc;
  try {
    if (!j.contains("dataset")) throw ConfigError("config.dataset is required");
    const auto& ds = j["dataset"];
    check_keys(ds, {"train", "val", "test", "test_fraction"}, "dataset");
    if (!ds.contains("train")) throw ConfigError("dataset.train is required");
    rc.train = parse_views(ds["train"], base, "dataset.train");
    if (ds.contains("val") && !ds["val"].is_null()) rc.val = parse_views(ds["val"], base, "dataset.val");
    if (ds.contains("test") && !ds["test"].is_null()) rc.test = parse_views(ds["test"], base, "dataset.test");
    if (ds.contains("test_fraction")) rc.test_fraction = ds["test_fraction"].get<double>();
    if (!(rc.test_fraction > 0.0 && rc.test_fraction < 1.0))
      throw ConfigError("dataset.test_fraction must lie in (0, 1)");

    rc.model = j.contains("model") ? j["model"] : nlohmann::json::object();
    model_config_from_json(rc.model);  // key validation
    rc.train_config = train_config_from_json(j.contains("train") ? j["train"] : nlohmann::json::object());
    rc.train_config.validate();

    if (!j.contains("output")) throw ConfigError("config.output is required");
    check_keys(j["output"], {"dir"}, "output");
    if (!j["output"].contains("dir")) throw ConfigError("output.dir is required");
    rc.output_dir = resolve(base, j["output"]["dir"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return rc;
}

nlohmann::json resolved_json(const RunConfig& rc, const ModelConfig& model) {
  nlohmann::json ds = {{"train", views_json(rc.train)}, {"test_fraction", rc.test_fraction}};
  ds["val"] = rc.val ? views_json(*rc.val) : nlohmann::json(nullptr);
  ds["test"] = rc.test ? views_json(*rc.test) : nlohmann::json(nullptr);
  return {{"dataset", ds},
          {"model", ModelConfig::to_json(model)},
          {"train", TrainConfig::to_json(rc.train_config)},
          {"output", {{"dir", rc.output_dir.string()}}}};
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Source tracing of synthetic speech from paired embedding views"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a two-view synthetic dataset");
  synth_cmd->add_option("--classes", synth.spec.n_classes, "Number of classes")->required();
  synth_cmd->add_option("--per-class", synth.spec.n_per_class, "Samples per class")->required();
  synth_cmd->add_option("--da", synth.spec.d_a, "View A dimension")->required();
  synth_cmd->add_option("--db", synth.spec.d_b, "View B dimension")->required();
  synth_cmd->add_option("--sep", synth.spec.separation, "Class separation")->capture_default_str();
  synth_cmd->add_option("--corr", synth.spec.cross_corr, "Cross-view shared variance fraction")
      ->capture_default_str();
  synth_cmd->add_option("--seed", synth.spec.seed, "Random seed")->capture_default_str();
  synth_cmd->add_option("--model-a", synth.spec.source_model_a, "Source model tag for view A")
      ->capture_default_str();
  synth_cmd->add_option("--model-b", synth.spec.source_model_b, "Source model tag for view B")
      ->capture_default_str();
  synth_cmd->add_flag("--identity-maps", synth.spec.identity_maps, "Use identity view maps");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  std::string train_config;
  auto* train_cmd = app.add_subcommand("train", "Train and evaluate one model");
  train_cmd->add_option("--config", train_config, "Run configuration JSON")->required();

  std::string kfold_config;
  int k = 5, jobs = 1;
  auto* kfold_cmd = app.add_subcommand("kfold", "Stratified k-fold cross-validation");
  kfold_cmd->add_option("--config", kfold_config, "Run configuration JSON")->required();
  kfold_cmd->add_option("--k", k, "Number of folds")->capture_default_str();
  kfold_cmd->add_option("--jobs", jobs, "Folds trained in parallel")->capture_default_str();

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on embedding files");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--a", eval.view_a, "View A STEB file")->required();
  eval_cmd->add_option("--b", eval.view_b, "View B STEB file (fusion models)");
  eval_cmd->add_option("--out", eval.out, "Output directory")->required();
  eval_cmd->add_option("--config", eval.config, "Resolved config whose model must match the checkpoint");

  std::vector<std::string> argv_store = {"srctrace"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUser;
  }

  try {
    if (*synth_cmd) return cmd_synth(synth, out);
    if (*train_cmd) return cmd_train(train_config, out, err);
    if (*kfold_cmd) return cmd_kfold(kfold_config, k, jobs, out, err);
    if (*eval_cmd) return cmd_eval(eval, out, err);
  } catch (const UserError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUser;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitUser;
}

}  // namespace srctrace::cli
