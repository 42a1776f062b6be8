#include "helpers.hpp"

#include "srctrace/cli.hpp"
#include "srctrace/synth.hpp"

#include <doctest.h>

#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

using namespace srctrace;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(2); }

/// Small two-view dataset written as train and test files.
fs::path make_data(const std::string& name, std::size_t classes = 3) {
  const fs::path dir = testing_util::scratch_dir(name);
  SynthSpec s;
  s.n_classes = classes;
  s.n_per_class = 40;
  s.d_a = 16;
  s.d_b = 14;
  s.separation = 3.0;
  const PairedDataset d = gen_two_view(s);
  const auto [keep, held] = stratified_split(d.labels(), 0.25, 1);
  write_embedding_file(d.view_a(), dir / "all_a.steb");
  write_embedding_file(d.view_b(), dir / "all_b.steb");
  write_embedding_file(d.view_a().select(keep), dir / "train_a.steb");
  write_embedding_file(d.view_b().select(keep), dir / "train_b.steb");
  write_embedding_file(d.view_a().select(held), dir / "test_a.steb");
  write_embedding_file(d.view_b().select(held), dir / "test_b.steb");
  return dir;
}

nlohmann::json base_config(const std::string& arch, const std::string& out) {
  return {{"dataset",
           {{"train", {{"view_a", "train_a.steb"}, {"view_b", "train_b.steb"}}},
            {"test", {{"view_a", "test_a.steb"}, {"view_b", "test_b.steb"}}}}},
          {"model", {{"arch", arch}, {"proj_dim", 16}, {"token_dim", 8}}},
          {"train", {{"epochs", 4}, {"seed", 3}}},
          {"output", {{"dir", out}}}};
}

}  // namespace

TEST_CASE("synth writes loadable, deterministic files") {
  const fs::path dir = testing_util::scratch_dir("cli_synth");
  const std::vector<std::string> args = {"synth", "--classes", "4", "--per-class", "10", "--da", "16", "--db",
                                         "12",    "--sep",     "2.0", "--corr",     "0.7", "--seed", "7",
                                         "--out", (dir / "d1").string()};
  const Result r = run(args);
  CHECK(r.code == 0);
  const EmbeddingTable a = load_embedding_file(dir / "d1" / "view_a.steb");
  CHECK(a.size() == 40);
  CHECK(a.dim() == 16);
  CHECK(fs::exists(dir / "d1" / "view_b.manifest.json"));

  std::vector<std::string> again = args;
  again.back() = (dir / "d2").string();
  CHECK(run(again).code == 0);
  CHECK(slurp(dir / "d1" / "view_a.steb") == slurp(dir / "d2" / "view_a.steb"));
  CHECK(slurp(dir / "d1" / "view_b.manifest.json") == slurp(dir / "d2" / "view_b.manifest.json"));

  const Result bad = run({"synth", "--classes", "1", "--per-class", "10", "--da", "4", "--db", "4", "--out",
                          (dir / "d3").string()});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("need ≥ 2 classes") != std::string::npos);
}

TEST_CASE("train writes artifacts and a consistent summary") {
  const fs::path dir = make_data("cli_train");
  write_json(dir / "cfg.json", base_config("trio", "run1"));
  const Result r = run({"train", "--config", (dir / "cfg.json").string()});
  REQUIRE(r.code == 0);
  for (const char* f : {"config.resolved.json", "model.ckpt", "history.csv", "metrics.json", "confusion.csv",
                        "split.json", "run.log"})
    CHECK(fs::exists(dir / "run1" / f));

  const auto metrics = read_json(dir / "run1" / "metrics.json");
  std::ostringstream expect;
  expect << std::fixed << std::setprecision(2) << "acc=" << metrics["accuracy"].get<double>() * 100.0
         << " eer=" << metrics["eer_avg"].get<double>() * 100.0 << "\n";
  CHECK(r.out == expect.str());

  // Defaults are echoed into the resolved config.
  const auto resolved = read_json(dir / "run1" / "config.resolved.json");
  CHECK(resolved["model"]["d_in_a"] == 16);
  CHECK(resolved["model"]["d_in_b"] == 14);
  CHECK(resolved["model"]["lambda"] == 0.3);
  CHECK(resolved["train"]["batch_size"] == 32);
  CHECK(resolved["train"]["patience"] == 5);

  // Confusion rows add up to the per-class test counts.
  const EmbeddingTable test = load_embedding_file(dir / "test_a.steb");
  std::istringstream csv(slurp(dir / "run1" / "confusion.csv"));
  std::string line;
  std::getline(csv, line);
  for (int c = 0; c < 3; ++c) {
    REQUIRE(std::getline(csv, line));
    std::stringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    long long sum = 0;
    while (std::getline(cells, cell, ',')) sum += std::stoll(cell);
    CHECK(sum == std::count(test.labels().begin(), test.labels().end(), c));
  }

  SUBCASE("a second run is byte-identical apart from the log") {
    write_json(dir / "cfg2.json", base_config("trio", "run2"));
    REQUIRE(run({"train", "--config", (dir / "cfg2.json").string()}).code == 0);
    for (const char* f : {"model.ckpt", "metrics.json", "history.csv", "confusion.csv", "split.json"})
      CHECK(slurp(dir / "run1" / f) == slurp(dir / "run2" / f));
  }

  SUBCASE("eval of the checkpoint reproduces the training metrics") {
    const Result e = run({"eval", "--checkpoint", (dir / "run1" / "model.ckpt").string(), "--a",
                          (dir / "test_a.steb").string(), "--b", (dir / "test_b.steb").string(), "--out",
                          (dir / "ev").string(), "--config", (dir / "run1" / "config.resolved.json").string()});
    CHECK(e.code == 0);
    CHECK(e.out == r.out);
    CHECK(slurp(dir / "ev" / "metrics.json") == slurp(dir / "run1" / "metrics.json"));
    CHECK(slurp(dir / "ev" / "confusion.csv") == slurp(dir / "run1" / "confusion.csv"));
  }

  SUBCASE("eval refuses mismatched dims and configs") {
    const Result dims = run({"eval", "--checkpoint", (dir / "run1" / "model.ckpt").string(), "--a",
                             (dir / "test_b.steb").string(), "--b", (dir / "test_a.steb").string(), "--out",
                             (dir / "ev2").string()});
    CHECK(dims.code == 1);
    CHECK(dims.err.find("expected 16, got 14") != std::string::npos);

    auto other = read_json(dir / "run1" / "config.resolved.json");
    other["model"]["lambda"] = 0.5;
    write_json(dir / "other.json", other);
    const Result hash = run({"eval", "--checkpoint", (dir / "run1" / "model.ckpt").string(), "--a",
                             (dir / "test_a.steb").string(), "--b", (dir / "test_b.steb").string(), "--out",
                             (dir / "ev3").string(), "--config", (dir / "other.json").string()});
    CHECK(hash.code == 1);
    CHECK(hash.err.find("config-hash mismatch") != std::string::npos);
  }
}

TEST_CASE("train validates views and keys") {
  const fs::path dir = make_data("cli_validate");

  auto cfg = base_config("trio", "bad1");
  cfg["dataset"]["train"].erase("view_b");
  write_json(dir / "c1.json", cfg);
  const Result missing = run({"train", "--config", (dir / "c1.json").string()});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("fusion requires two views") != std::string::npos);

  cfg = base_config("fcn", "fcn_run");
  write_json(dir / "c2.json", cfg);
  const Result fcn = run({"train", "--config", (dir / "c2.json").string()});
  CHECK(fcn.code == 0);
  CHECK(fcn.err.find("warning") != std::string::npos);
  CHECK(fcn.err.find("view B ignored") != std::string::npos);

  cfg = base_config("trio", "bad3");
  cfg["model"]["heads"] = 4;
  write_json(dir / "c3.json", cfg);
  const Result unknown = run({"train", "--config", (dir / "c3.json").string()});
  CHECK(unknown.code == 1);
  CHECK(unknown.err.find("heads") != std::string::npos);

  cfg = base_config("trio", "bad4");
  cfg["extra"] = true;
  write_json(dir / "c4.json", cfg);
  CHECK(run({"train", "--config", (dir / "c4.json").string()}).code == 1);

  CHECK(run({"train", "--config", (dir / "absent.json").string()}).code == 1);
  CHECK(run({"train"}).code == 1);
  CHECK(run({"bogus"}).code == 1);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("train carves a stratified test split when none is given") {
  const fs::path dir = make_data("cli_carve");
  auto cfg = base_config("concat", "carve");
  cfg["dataset"] = {{"train", {{"view_a", "all_a.steb"}, {"view_b", "all_b.steb"}}}, {"test_fraction", 0.25}};
  write_json(dir / "c.json", cfg);
  REQUIRE(run({"train", "--config", (dir / "c.json").string()}).code == 0);
  const auto split = read_json(dir / "carve" / "split.json");
  CHECK(split["test_ids"].size() == 30);
  CHECK(split["train_ids"].size() + split["val_ids"].size() == 90);
  CHECK(read_json(dir / "carve" / "metrics.json")["n"] == 30);
}

TEST_CASE("kfold writes fold directories and an average") {
  const fs::path dir = make_data("cli_kfold", 4);
  auto cfg = base_config("fcn", "kf");
  cfg["dataset"] = {{"train", {{"view_a", "all_a.steb"}}}};
  write_json(dir / "c.json", cfg);
  const Result r = run({"kfold", "--config", (dir / "c.json").string(), "--k", "5", "--jobs", "2"});
  REQUIRE(r.code == 0);
  double mean = 0.0;
  for (int i = 0; i < 5; ++i) {
    const fs::path fold = dir / "kf" / ("fold_" + std::to_string(i));
    CHECK(fs::exists(fold / "model.ckpt"));
    mean += read_json(fold / "metrics.json")["accuracy"].get<double>() / 5.0;
  }
  const auto avg = read_json(dir / "kf" / "average.json");
  CHECK(avg["accuracy"].get<double>() == doctest::Approx(mean).epsilon(1e-12));

  const Result k1 = run({"kfold", "--config", (dir / "c.json").string(), "--k", "1"});
  CHECK(k1.code == 1);
}
