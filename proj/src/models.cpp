#include "srctrace/models.hpp"

#include <cmath>
#include <cstdio>
#include <set>

namespace srctrace {

Arch arch_from_string(const std::string& s) {
  if (s == "fcn") return Arch::Fcn;
  if (s == "cnn") return Arch::Cnn;
  if (s == "concat") return Arch::Concat;
  if (s == "trio") return Arch::Trio;
  throw ConfigError("unknown arch '" + s + "' (expected fcn, cnn, concat or trio)");
}

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::Fcn: return "fcn";
    case Arch::Cnn: return "cnn";
    case Arch::Concat: return "concat";
    case Arch::Trio: return "trio";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (n_classes < 2) throw ConfigError("need ≥ 2 classes");
  if (d_in_a == 0) throw ConfigError("d_in_a must be positive");
  if (arch != Arch::Fcn && d_in_a < kMinConvInput)
    throw ConfigError("input dim " + std::to_string(d_in_a) + " too small for the conv branch (need >= " +
                      std::to_string(kMinConvInput) + ")");
  if (is_fusion()) {
    if (d_in_b == 0) throw ConfigError("fusion requires two views");
    if (d_in_b < kMinConvInput)
      throw ConfigError("input dim " + std::to_string(d_in_b) +
                        " too small for the conv branch (need >= " +
                        std::to_string(kMinConvInput) + ")");
    if (proj_dim == 0) throw ConfigError("proj_dim must be positive");
  }
  if (arch == Arch::Trio && attention) {
    if (token_dim == 0 || (2 * proj_dim) % token_dim != 0)
      throw ConfigError("2 * proj_dim must be divisible by token_dim");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
    throw ConfigError("dropout_rate must lie in [0, 1)");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  cca.validate();
}

nlohmann::json ModelConfig::to_json(const ModelConfig& c) {
  return {{"arch", to_string(c.arch)},
          {"d_in_a", c.d_in_a},
          {"d_in_b", c.d_in_b},
          {"n_classes", c.n_classes},
          {"proj_dim", c.proj_dim},
          {"token_dim", c.token_dim},
          {"dropout_rate", c.dropout_rate},
          {"lambda", c.lambda},
          {"ridge", c.cca.ridge},
          {"eig_floor", c.cca.eig_floor},
          {"cca_mode", to_string(c.cca.mode)},
          {"attention", c.attention}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::set<std::string> known = {
      "arch",   "d_in_a", "d_in_b", "n_classes", "proj_dim", "token_dim",
      "dropout_rate", "lambda", "ridge", "eig_floor", "cca_mode", "attention"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown model config key '" + key + "'");
  ModelConfig c;
  try {
    if (j.contains("arch")) c.arch = arch_from_string(j["arch"].get<std::string>());
    if (j.contains("d_in_a")) c.d_in_a = j["d_in_a"].get<std::size_t>();
    if (j.contains("d_in_b")) c.d_in_b = j["d_in_b"].get<std::size_t>();
    if (j.contains("n_classes")) c.n_classes = j["n_classes"].get<std::size_t>();
    if (j.contains("proj_dim")) c.proj_dim = j["proj_dim"].get<std::size_t>();
    if (j.contains("token_dim")) c.token_dim = j["token_dim"].get<std::size_t>();
    if (j.contains("dropout_rate")) c.dropout_rate = j["dropout_rate"].get<double>();
    if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
    if (j.contains("ridge")) c.cca.ridge = j["ridge"].get<double>();
    if (j.contains("eig_floor")) c.cca.eig_floor = j["eig_floor"].get<double>();
    if (j.contains("cca_mode")) c.cca.mode = cca_mode_from_string(j["cca_mode"].get<std::string>());
    if (j.contains("attention")) c.attention = j["attention"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

std::string config_hash(const ModelConfig& config) {
  const std::string text = ModelConfig::to_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

double cross_entropy(const Matrix& probs, std::span<const int> labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size())
    throw ContractViolation("cross_entropy: label count mismatch");
  if (labels.empty()) throw ContractViolation("cross_entropy: empty batch");
  double sum = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const int y = labels[n];
    if (y < 0 || y >= probs.cols()) throw DataError("label out of range");
    sum -= std::log(std::max(probs(static_cast<Eigen::Index>(n), y), 1e-12));
  }
  return sum / static_cast<double>(labels.size());
}

double total_loss(double ce, double cca_value, double lambda) { return ce - lambda * cca_value; }

std::size_t conv_branch_width(std::size_t d_in) {
  if (d_in < kMinConvInput) throw ConfigError("input dim too small for the conv branch");
  const std::size_t l1 = (d_in - 2) / 2;
  const std::size_t l2 = (l1 - 2) / 2;
  return kConv2Filters * l2;
}

// ---------------------------------------------------------------------------

namespace {

struct ConvBranch {
  Conv1d conv1;
  Relu relu1;
  MaxPool1d pool1{kConv1Filters};
  Conv1d conv2;
  Relu relu2;
  MaxPool1d pool2{kConv2Filters};

  ConvBranch() = default;
  ConvBranch(ParamStore& store, const std::string& prefix, Rng& rng)
      : conv1(store, prefix + ".conv1", 1, kConv1Filters, rng),
        conv2(store, prefix + ".conv2", kConv1Filters, kConv2Filters, rng) {}

  Matrix forward(const Matrix& x) {
    Matrix h = pool1.forward(relu1.forward(conv1.forward(x)));
    return pool2.forward(relu2.forward(conv2.forward(h)));
  }

  void backward(const Matrix& d) {
    Matrix g = conv2.backward(relu2.backward(pool2.backward(d)));
    conv1.backward(relu1.backward(pool1.backward(g)), /*need_input_grad=*/false);
  }
};

struct Projection {
  Dense dense;
  Relu relu;

  Projection() = default;
  Projection(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : dense(store, name, in, out, rng) {}

  Matrix forward(const Matrix& x) { return relu.forward(dense.forward(x)); }
  Matrix backward(const Matrix& d, bool need_input_grad = true) {
    return dense.backward(relu.backward(d), need_input_grad);
  }
};

struct Head {
  Dense fc1, fc2, out;
  Relu relu1, relu2;
  Dropout drop1, drop2;

  Head() = default;
  Head(ParamStore& store, std::size_t in, std::size_t classes, double rate, Rng& rng)
      : fc1(store, "head.fc1", in, kHidden1, rng),
        fc2(store, "head.fc2", kHidden1, kHidden2, rng),
        out(store, "head.out", kHidden2, classes, rng),
        drop1(rate),
        drop2(rate) {}

  Matrix forward(const Matrix& x, Rng& rng, bool training) {
    Matrix h = drop1.forward(relu1.forward(fc1.forward(x)), rng, training);
    h = drop2.forward(relu2.forward(fc2.forward(h)), rng, training);
    return out.forward(h);
  }

  Matrix backward(const Matrix& dlogits, bool need_input_grad) {
    Matrix g = relu2.backward(drop2.backward(out.backward(dlogits)));
    g = relu1.backward(drop1.backward(fc2.backward(g)));
    return fc1.backward(g, need_input_grad);
  }
};

}  // namespace

struct Model::Layers {
  ConvBranch branch_a, branch_b;
  Projection proj_a, proj_b;
  SigmoidGate gate_a, gate_b;
  SelfAttention attention;
  Head head;

  // Cache of the last forward pass.
  bool has_forward = false;
  Matrix probs;
  std::optional<CcaResult> cca;
};

Model::Model(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), layers_(std::make_unique<Layers>()),
      dropout_rng_(derive_seed(seed, 1)) {
  config_.validate();
  Rng rng(derive_seed(seed, 0));
  Layers& l = *layers_;
  const std::size_t p = config_.proj_dim;
  switch (config_.arch) {
    case Arch::Fcn:
      l.head = Head(params_, config_.d_in_a, config_.n_classes, config_.dropout_rate, rng);
      break;
    case Arch::Cnn:
      l.branch_a = ConvBranch(params_, "a", rng);
      l.head = Head(params_, conv_branch_width(config_.d_in_a), config_.n_classes,
                    config_.dropout_rate, rng);
      break;
    case Arch::Concat:
    case Arch::Trio:
      l.branch_a = ConvBranch(params_, "a", rng);
      l.proj_a = Projection(params_, "a.proj", conv_branch_width(config_.d_in_a), p, rng);
      l.branch_b = ConvBranch(params_, "b", rng);
      l.proj_b = Projection(params_, "b.proj", conv_branch_width(config_.d_in_b), p, rng);
      if (config_.arch == Arch::Trio) {
        l.gate_a = SigmoidGate(params_, "a.gate", p, rng);
        l.gate_b = SigmoidGate(params_, "b.gate", p, rng);
        if (config_.attention)
          l.attention = SelfAttention(params_, "attn", 2 * p / config_.token_dim,
                                      config_.token_dim, rng);
      }
      l.head = Head(params_, 2 * p, config_.n_classes, config_.dropout_rate, rng);
      break;
  }
  // Initial values are float-representable so float32 checkpoints are exact.
  params_.round_values();
}

Model::~Model() = default;
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;

ForwardOutput Model::forward(const Matrix& a, const Matrix& b, bool training) {
  Layers& l = *layers_;
  if (static_cast<std::size_t>(a.cols()) != config_.d_in_a)
    throw DataError("view A has dim " + std::to_string(a.cols()) + ", model expects " +
                    std::to_string(config_.d_in_a));
  if (a.rows() == 0) throw ContractViolation("forward: empty batch");
  if (config_.is_fusion()) {
    if (static_cast<std::size_t>(b.cols()) != config_.d_in_b)
      throw DataError("view B has dim " + std::to_string(b.cols()) + ", model expects " +
                      std::to_string(config_.d_in_b));
    if (b.rows() != a.rows()) throw ContractViolation("forward: views differ in batch size");
  }

  l.has_forward = false;
  l.cca.reset();
  Matrix features;
  switch (config_.arch) {
    case Arch::Fcn:
      features = a;
      break;
    case Arch::Cnn:
      features = l.branch_a.forward(a);
      break;
    case Arch::Concat:
    case Arch::Trio: {
      Matrix xa = l.proj_a.forward(l.branch_a.forward(a));
      Matrix xb = l.proj_b.forward(l.branch_b.forward(b));
      if (config_.arch == Arch::Trio) {
        xa = l.gate_a.forward(xa);
        xb = l.gate_b.forward(xb);
        if (a.rows() >= 2) l.cca = cca_value_and_grad(xa, xb, config_.cca);
      }
      features.resize(a.rows(), xa.cols() + xb.cols());
      features << xa, xb;
      if (config_.arch == Arch::Trio && config_.attention) features = l.attention.forward(features);
      break;
    }
  }
  l.probs = softmax_rows(l.head.forward(features, dropout_rng_, training));
  l.has_forward = true;

  ForwardOutput out;
  out.probs = l.probs;
  if (l.cca) out.cca_value = l.cca->value;
  return out;
}

LossParts Model::backward(std::span<const int> labels) {
  Layers& l = *layers_;
  if (!l.has_forward) throw ContractViolation("backward requested before a forward pass");
  if (static_cast<std::size_t>(l.probs.rows()) != labels.size())
    throw ContractViolation("backward: label count does not match the last batch");

  LossParts parts;
  parts.ce = cross_entropy(l.probs, labels);
  parts.total = parts.ce;
  const bool use_cca = config_.arch == Arch::Trio && l.cca.has_value();
  if (use_cca) {
    parts.cca = l.cca->value;
    parts.total = total_loss(parts.ce, l.cca->value, config_.lambda);
  }

  params_.zero_grad();
  const auto n = static_cast<double>(labels.size());
  Matrix dlogits = l.probs;
  for (std::size_t i = 0; i < labels.size(); ++i) dlogits(static_cast<Eigen::Index>(i), labels[i]) -= 1.0;
  dlogits /= n;

  const bool need_features_grad = config_.arch != Arch::Fcn;
  Matrix dfeat = l.head.backward(dlogits, need_features_grad);
  switch (config_.arch) {
    case Arch::Fcn:
      break;
    case Arch::Cnn:
      l.branch_a.backward(dfeat);
      break;
    case Arch::Concat:
    case Arch::Trio: {
      if (config_.arch == Arch::Trio && config_.attention) dfeat = l.attention.backward(dfeat);
      const auto p = static_cast<Eigen::Index>(config_.proj_dim);
      Matrix da = dfeat.leftCols(p);
      Matrix db = dfeat.rightCols(p);
      if (config_.arch == Arch::Trio) {
        if (use_cca && config_.lambda != 0.0) {
          da -= config_.lambda * l.cca->d_x;
          db -= config_.lambda * l.cca->d_y;
        }
        da = l.gate_a.backward(da);
        db = l.gate_b.backward(db);
      }
      l.branch_a.backward(l.proj_a.backward(da));
      l.branch_b.backward(l.proj_b.backward(db));
      break;
    }
  }
  return parts;
}

LossParts Model::loss(const Matrix& a, const Matrix& b, std::span<const int> labels,
                      bool training) {
  ForwardOutput out = forward(a, b, training);
  LossParts parts;
  parts.ce = cross_entropy(out.probs, labels);
  parts.total = parts.ce;
  if (config_.arch == Arch::Trio && out.cca_value) {
    parts.cca = out.cca_value;
    parts.total = total_loss(parts.ce, *out.cca_value, config_.lambda);
  }
  return parts;
}

std::pair<const Matrix*, const Matrix*> Model::last_gates() const {
  if (config_.arch != Arch::Trio || !layers_->has_forward) return {nullptr, nullptr};
  return {&layers_->gate_a.gate(), &layers_->gate_b.gate()};
}

}  // namespace srctrace
