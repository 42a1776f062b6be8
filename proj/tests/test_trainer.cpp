#include "helpers.hpp"

#include "srctrace/synth.hpp"
#include "srctrace/trainer.hpp"

#include <doctest.h>

#include <fstream>
#include <iterator>
#include <mutex>
#include <numeric>

using namespace srctrace;

namespace {

SynthSpec small_spec(std::size_t classes, std::size_t per_class, double sep, std::uint64_t seed) {
  SynthSpec s;
  s.n_classes = classes;
  s.n_per_class = per_class;
  s.d_a = 16;
  s.d_b = 16;
  s.separation = sep;
  s.seed = seed;
  return s;
}

ModelConfig model_for(Arch arch, const PairedDataset& d) {
  ModelConfig c;
  c.arch = arch;
  c.d_in_a = d.view_a().dim();
  c.d_in_b = c.is_fusion() ? d.view_b().dim() : 0;
  c.n_classes = d.num_classes();
  c.proj_dim = 16;
  c.token_dim = 8;
  return c;
}

std::pair<PairedDataset, PairedDataset> split(const PairedDataset& d, double f, std::uint64_t seed) {
  const auto [keep, held] = stratified_split(d.labels(), f, seed);
  return {d.select(keep), d.select(held)};
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("train config validation and json") {
  TrainConfig c;
  c.val_fraction = 0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.val_fraction = 0.1;
  c.patience = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.patience = 3;
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.batch_size = 16;
  CHECK_NOTHROW(c.validate());
  nlohmann::json j = TrainConfig::to_json(c);
  CHECK(TrainConfig::to_json(train_config_from_json(j)) == j);
  j["momentum"] = 0.9;
  CHECK_THROWS_AS(train_config_from_json(j), ConfigError);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const PairedDataset d = gen_two_view(small_spec(3, 30, 2.0, 1));
  const auto [tr, va] = split(d, 0.2, 1);
  ModelConfig mc = model_for(Arch::Trio, d);
  mc.lambda = 0.0;
  Model m(mc, 4);
  const auto before = m.params().snapshot();
  TrainConfig tc;
  tc.epochs = 3;
  tc.patience = 10;
  tc.lr = 0.0;
  tc.batch_size = 16;
  const TrainHistory h = train(m, tr, va, tc);
  CHECK(h.epochs.size() == 3);
  CHECK(h.stopped_epoch == 3);
  const auto after = m.params().snapshot();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(after[i] == before[i]);
}

TEST_CASE("first batch loss of an untrained model is near ln C") {
  const PairedDataset d = gen_two_view(small_spec(5, 40, 1.0, 2));
  const auto [tr, va] = split(d, 0.2, 2);
  for (Arch arch : {Arch::Cnn, Arch::Concat, Arch::Trio}) {
    ModelConfig mc = model_for(arch, d);
    mc.lambda = 0.0;  // the total is then the cross-entropy alone
    Model m(mc, 3);
    TrainConfig tc;
    tc.epochs = 1;
    const TrainHistory h = train(m, tr, va, tc);
    CAPTURE(static_cast<int>(arch));
    CHECK(std::abs(h.first_batch_loss - std::log(5.0)) < 0.1);
  }
}

TEST_CASE("fcn starts near ln C on unit-variance inputs, on average") {
  // The dense stack sees raw inputs, so single inits spread more widely
  // than the convolutional branches do.
  const PairedDataset d = gen_two_view(small_spec(5, 40, 0.0, 2));
  std::vector<std::size_t> rows(32);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::vector<int> labels;
  for (std::size_t r : rows) labels.push_back(d.labels()[r]);
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Model m(model_for(Arch::Fcn, d), seed);
    mean += m.loss(d.view_a().gather(rows), Matrix(), labels, false).ce / 10.0;
  }
  CHECK(std::abs(mean - std::log(5.0)) < 0.1);
}

TEST_CASE("separable three-class data is learned within 20 epochs") {
  const PairedDataset d = gen_two_view(small_spec(3, 100, 3.0, 3));
  const auto [tr, va] = split(d, 0.2, 3);
  Model m(model_for(Arch::Trio, d), 5);
  TrainConfig tc;
  tc.epochs = 20;
  const TrainHistory h = train(m, tr, va, tc);
  CHECK(h.best_epoch <= h.stopped_epoch);
  CHECK(h.stopped_epoch <= tc.epochs);

  const MetricsReport val = evaluate(m, va);
  CHECK(val.accuracy >= 0.99);

  // The restored parameters are those of the best validation epoch.
  double best = 1e300;
  for (const auto& e : h.epochs) best = std::min(best, e.val_loss);
  CHECK(val.loss == doctest::Approx(best).epsilon(1e-9));
  CHECK(h.epochs[static_cast<std::size_t>(h.best_epoch - 1)].val_loss == best);

  const MetricsReport on_train = evaluate(m, tr);
  CHECK(on_train.accuracy >= val.accuracy - 0.05);

  const MetricsReport again = evaluate(m, va);
  CHECK(to_json(again) == to_json(val));

  const std::string csv = h.to_csv();
  CHECK(csv.rfind("epoch,train_loss,val_loss,val_acc\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == h.stopped_epoch + 1);
}

TEST_CASE("early stopping halts after patience epochs without improvement") {
  const PairedDataset d = gen_two_view(small_spec(3, 40, 0.0, 4));
  const auto [tr, va] = split(d, 0.25, 4);
  Model m(model_for(Arch::Fcn, d), 6);
  TrainConfig tc;
  tc.epochs = 50;
  tc.patience = 2;
  tc.lr = 0.05;
  const TrainHistory h = train(m, tr, va, tc);
  CHECK(h.stopped_epoch < 50);

  // Replay the rule on the recorded losses.
  double ref = 1e300, best = 1e300;
  int since = 0, expect_stop = 0, expect_best = 0;
  for (const auto& e : h.epochs) {
    expect_stop = e.epoch;
    if (e.val_loss < best) {
      best = e.val_loss;
      expect_best = e.epoch;
    }
    if (e.val_loss < ref - tc.min_delta) {
      ref = e.val_loss;
      since = 0;
    } else if (++since >= tc.patience) {
      break;
    }
  }
  CHECK(h.stopped_epoch == expect_stop);
  CHECK(static_cast<int>(h.epochs.size()) == expect_stop);
  CHECK(h.best_epoch == expect_best);
  CHECK(h.stopped_epoch - h.best_epoch <= tc.patience);
}

TEST_CASE("untrained model is at chance level") {
  // Separation 0: the classes carry no signal, so accuracy is binomial around 1/C.
  const PairedDataset d = gen_two_view(small_spec(4, 250, 0.0, 5));
  Model m(model_for(Arch::Fcn, d), 7);
  const double acc = evaluate(m, d).accuracy;
  const double sigma = std::sqrt(0.25 * 0.75 / 1000.0);
  CHECK(std::abs(acc - 0.25) <= 3.0 * sigma);
  CHECK(predict(m, d).rows() == 1000);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const PairedDataset d = gen_two_view(small_spec(3, 30, 2.0, 6));
  const auto [tr, va] = split(d, 0.2, 6);
  TrainConfig tc;
  tc.epochs = 3;
  tc.seed = 9;
  Model m1(model_for(Arch::Trio, d), tc.seed), m2(model_for(Arch::Trio, d), tc.seed);
  train(m1, tr, va, tc);
  train(m2, tr, va, tc);
  const auto dir = testing_util::scratch_dir("det");
  save_checkpoint(m1, dir / "1.ckpt");
  save_checkpoint(m2, dir / "2.ckpt");
  CHECK(file_bytes(dir / "1.ckpt") == file_bytes(dir / "2.ckpt"));
}

TEST_CASE("checkpoint round trip and refusal") {
  const PairedDataset d = gen_two_view(small_spec(3, 20, 2.0, 7));
  const auto [tr, va] = split(d, 0.2, 7);
  Model m(model_for(Arch::Trio, d), 1);
  TrainConfig tc;
  tc.epochs = 2;
  train(m, tr, va, tc);
  const auto dir = testing_util::scratch_dir("ckpt");
  save_checkpoint(m, dir / "m.ckpt");

  Model back = load_checkpoint(dir / "m.ckpt");
  CHECK(back.config() == m.config());
  CHECK(back.params().step() == m.params().step());
  for (std::size_t i = 0; i < m.params().size(); ++i) CHECK(back.params()[i].value == m.params()[i].value);
  CHECK(predict(back, va) == predict(m, va));

  ModelConfig wrong = m.config();
  wrong.arch = Arch::Concat;
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "m.ckpt", wrong), doctest::Contains("config-hash mismatch"), UserError);
  CHECK_NOTHROW(load_checkpoint(dir / "m.ckpt", m.config()));

  auto bytes = file_bytes(dir / "m.ckpt");
  bytes.resize(bytes.size() - 5);
  {
    std::ofstream out(dir / "t.ckpt", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_WITH(load_checkpoint(dir / "t.ckpt"), doctest::Contains("corrupt checkpoint"));
}

TEST_CASE("k-fold over a 19-class toy set") {
  SynthSpec s = small_spec(19, 5, 3.0, 8);
  const PairedDataset d = gen_two_view(s);
  TrainConfig tc;
  tc.epochs = 2;
  std::vector<int> seen;
  std::mutex mu;
  const KFoldResult r = run_kfold(d, 5, model_for(Arch::Fcn, d), tc, 2,
                                  [&](int fold, Model&, const TrainHistory&, const MetricsReport&) {
                                    std::lock_guard lock(mu);
                                    seen.push_back(fold);
                                  });
  REQUIRE(r.reports.size() == 5);
  for (const auto& rep : r.reports) CHECK(rep.n == 19);
  double mean = 0.0;
  for (const auto& rep : r.reports) mean += rep.accuracy / 5.0;
  CHECK(r.average.accuracy == doctest::Approx(mean).epsilon(1e-12));
  CHECK(r.average.confusion.sum() == 95);
  std::sort(seen.begin(), seen.end());
  CHECK(seen == std::vector<int>{0, 1, 2, 3, 4});

  // Parallel and sequential runs agree.
  const KFoldResult seq = run_kfold(d, 5, model_for(Arch::Fcn, d), tc, 1);
  for (std::size_t i = 0; i < 5; ++i) CHECK(to_json(seq.reports[i]) == to_json(r.reports[i]));
}

TEST_CASE("k-fold on separable synthetic data averages above 0.95") {
  const PairedDataset d = gen_two_view(small_spec(4, 50, 3.0, 9));
  TrainConfig tc;
  tc.epochs = 15;
  const KFoldResult r = run_kfold(d, 5, model_for(Arch::Concat, d), tc);
  CHECK(r.average.accuracy >= 0.95);
  const auto j = to_json(r.average);
  CHECK(j["fold_accuracy"].size() == 5);
}
