#include "gradcases.hpp"
#include "helpers.hpp"

#include "srctrace/models.hpp"

#include <doctest.h>

using namespace srctrace;
using testing_util::random_matrix;

namespace {

ModelConfig config(Arch arch, std::size_t da, std::size_t db, std::size_t classes) {
  ModelConfig c;
  c.arch = arch;
  c.d_in_a = da;
  c.d_in_b = db;
  c.n_classes = classes;
  return c;
}

bool row_stochastic(const Matrix& p) {
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    if (std::abs(p.row(i).sum() - 1.0) > 1e-6) return false;
  return p.minCoeff() >= 0.0;
}

}  // namespace

TEST_CASE("fcn parameter counts") {
  CHECK(Model(config(Arch::Fcn, 512, 0, 19), 0).params().parameter_count() == 51139);
  // 1024*90+90 + 90*45+45 + 45*12+12
  CHECK(Model(config(Arch::Fcn, 1024, 0, 12), 0).params().parameter_count() == 96897);
}

TEST_CASE("cnn branch widths") {
  CHECK(conv_branch_width(512) == 8064);
  CHECK(conv_branch_width(1024) == 16256);
  CHECK(conv_branch_width(12) == 64);
  Model m(config(Arch::Cnn, 192, 0, 5), 1);
  std::mt19937_64 rng(1);
  const Matrix p = m.forward(random_matrix(4, 192, rng), Matrix(), false).probs;
  CHECK(p.rows() == 4);
  CHECK(p.cols() == 5);
  CHECK(row_stochastic(p));
  CHECK_THROWS_AS(Model(config(Arch::Cnn, 11, 0, 5), 1), ConfigError);
}

TEST_CASE("concat fusion yields probabilities only") {
  ModelConfig c = config(Arch::Concat, 64, 48, 4);
  Model m(c, 2);
  CHECK(m.params().get("head.fc1.w").value.rows() == 256);
  CHECK_FALSE(m.params().contains("a.gate.w"));
  CHECK_FALSE(m.params().contains("attn.wq"));
  std::mt19937_64 rng(2);
  const auto out = m.forward(random_matrix(3, 64, rng), random_matrix(3, 48, rng), false);
  CHECK(row_stochastic(out.probs));
  CHECK_FALSE(out.cca_value.has_value());
}

TEST_CASE("trio structure") {
  Model m(config(Arch::Trio, 64, 48, 4), 3);
  CHECK(m.params().get("attn.wq").value.rows() == 64);  // 4 tokens of width 64
  std::mt19937_64 rng(3);
  const Matrix a = random_matrix(6, 64, rng), b = random_matrix(6, 48, rng);
  const auto out = m.forward(a, b, false);
  CHECK(row_stochastic(out.probs));
  REQUIRE(out.cca_value.has_value());
  CHECK(std::abs(*out.cca_value) <= 128.0);

  // Gates lie strictly inside (0, 1).
  const auto [ga, gb] = m.last_gates();
  CHECK(ga->minCoeff() > 0.0);
  CHECK(ga->maxCoeff() < 1.0);
  CHECK(gb->minCoeff() > 0.0);
  CHECK(gb->maxCoeff() < 1.0);

  for (const char* name : {"a.gate.w", "a.gate.b", "b.gate.w", "b.gate.b"}) m.params().get(name).value.setZero();
  m.forward(a, b, false);
  CHECK((m.last_gates().first->array() == 0.5).all());
  CHECK((m.last_gates().second->array() == 0.5).all());

  ModelConfig bad = config(Arch::Trio, 64, 48, 4);
  bad.token_dim = 48;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(config(Arch::Trio, 64, 0, 4).validate(), ConfigError);
  CHECK_THROWS_AS(config(Arch::Fcn, 64, 0, 1).validate(), ConfigError);
}

TEST_CASE("property: every architecture is row-stochastic on random batches") {
  std::mt19937_64 rng(4);
  for (Arch arch : {Arch::Fcn, Arch::Cnn, Arch::Concat, Arch::Trio}) {
    ModelConfig c = config(arch, 40, 30, 3);
    if (!c.is_fusion()) c.d_in_b = 0;
    Model m(c, 5);
    for (int trial = 0; trial < 3; ++trial) {
      const Matrix a = random_matrix(5, 40, rng, 3.0), b = random_matrix(5, 30, rng, 3.0);
      CHECK(row_stochastic(m.forward(a, b, false).probs));
      CHECK(row_stochastic(m.forward(a, b, true).probs));
    }
  }
}

TEST_CASE("cross_entropy and total_loss") {
  CHECK(cross_entropy(Matrix::Constant(3, 4, 0.25), std::vector<int>{0, 1, 3}) == doctest::Approx(std::log(4.0)));
  CHECK(cross_entropy(Matrix::Identity(2, 2), std::vector<int>{0, 1}) == 0.0);
  Matrix p(1, 2);
  p << 0.7, 0.3;
  CHECK(cross_entropy(p, std::vector<int>{1}) == doctest::Approx(1.203973).epsilon(1e-6));
  CHECK(std::isfinite(cross_entropy(Matrix::Identity(2, 2), std::vector<int>{1, 0})));
  CHECK_THROWS(cross_entropy(p, std::vector<int>{2}));

  CHECK(total_loss(1.0, 1.0, 0.3) == doctest::Approx(0.7));
  CHECK(total_loss(1.7, 0.9, 0.0) == 1.7);
  CHECK(total_loss(2.0, -0.5, 0.3) == doctest::Approx(2.15));
}

TEST_CASE("backward contract") {
  Model m(config(Arch::Fcn, 8, 0, 2), 0);
  CHECK_THROWS_AS(m.backward(std::vector<int>{0, 1}), ContractViolation);
}

TEST_CASE("full-model gradient check, trio") {
  CHECK(gradcases::full_model(gradcases::toy_config(Arch::Trio), 1) < 1e-4);
}

TEST_CASE("full-model gradient checks away from kinks") {
  ModelConfig fusion16 = gradcases::toy_config(Arch::Concat);
  fusion16.d_in_a = 16;
  ModelConfig norm = gradcases::toy_config(Arch::Trio);
  norm.cca.mode = CcaMode::TraceNorm;
  const std::vector<std::pair<std::string, ModelConfig>> cases = {
      {"concat", gradcases::toy_config(Arch::Concat)},
      {"concat d16", fusion16},
      {"cnn", gradcases::toy_config(Arch::Cnn)},
      {"fcn", gradcases::toy_config(Arch::Fcn)},
      {"trio trace-norm", norm}};
  std::uint64_t seed = 2;
  for (const auto& [name, cfg] : cases) {
    CAPTURE(name);
    gradcases::ModelCase c(cfg, seed++);
    const auto r = gradcases::kink_aware_check(c.model.params(), c.loss(), 40, 7);
    CHECK(r.worst < 1e-4);
    MESSAGE(name << ": " << r.checked << " checked, " << r.skipped << " skipped");
    CHECK(r.skipped * 10 <= r.checked + r.skipped);
  }
}

TEST_CASE("trio with open gates, no attention and lambda 0 reduces to concat") {
  ModelConfig tc = gradcases::toy_config(Arch::Trio);
  tc.lambda = 0.0;
  tc.attention = false;
  ModelConfig cc = gradcases::toy_config(Arch::Concat);
  Model trio(tc, 11);
  Model concat(cc, 12);

  // Map every shared parameter; force the gates fully open.
  for (std::size_t i = 0; i < concat.params().size(); ++i) {
    const Param& src = concat.params()[i];
    trio.params().get(src.name).value = src.value;
  }
  for (const char* g : {"a.gate", "b.gate"}) {
    trio.params().get(std::string(g) + ".w").value.setZero();
    trio.params().get(std::string(g) + ".b").value.setConstant(1000.0);
  }
  CHECK(trio.params().parameter_count() == concat.params().parameter_count() + 2 * (8 * 8 + 8));

  std::mt19937_64 rng(13);
  const Matrix a = random_matrix(8, 20, rng), b = random_matrix(8, 16, rng);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1};
  const auto lt = trio.loss(a, b, labels, false);
  const auto lc = concat.loss(a, b, labels, false);
  CHECK(lt.total == doctest::Approx(lc.total).epsilon(1e-14));
  CHECK(lt.ce == doctest::Approx(lc.ce).epsilon(1e-14));
  CHECK(lt.cca.has_value());
  CHECK_FALSE(lc.cca.has_value());
}

TEST_CASE("same seed, same model; forward and backward are repeatable") {
  Model m1(gradcases::toy_config(Arch::Trio), 21), m2(gradcases::toy_config(Arch::Trio), 21);
  for (std::size_t i = 0; i < m1.params().size(); ++i) CHECK(m1.params()[i].value == m2.params()[i].value);
  std::mt19937_64 rng(22);
  const Matrix a = random_matrix(8, 20, rng), b = random_matrix(8, 16, rng);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1};
  m1.forward(a, b, true);
  m2.forward(a, b, true);
  const auto l1 = m1.backward(labels), l2 = m2.backward(labels);
  CHECK(l1.total == l2.total);
  for (std::size_t i = 0; i < m1.params().size(); ++i) CHECK(m1.params()[i].grad == m2.params()[i].grad);
}

TEST_CASE("model config json") {
  ModelConfig c = config(Arch::Trio, 64, 48, 10);
  c.cca.mode = CcaMode::TraceNorm;
  const auto j = ModelConfig::to_json(c);
  CHECK(model_config_from_json(j) == c);
  CHECK(config_hash(c).size() == 16);
  ModelConfig other = c;
  other.lambda = 0.5;
  CHECK(config_hash(other) != config_hash(c));
  nlohmann::json extra = j;
  extra["heads"] = 2;
  CHECK_THROWS_AS(model_config_from_json(extra), ConfigError);
  CHECK_THROWS_AS(arch_from_string("rnn"), ConfigError);
  CHECK(arch_from_string("concat") == Arch::Concat);
}
