#pragma once

#include "srctrace/cca.hpp"
#include "srctrace/common.hpp"
#include "srctrace/nn.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>

namespace srctrace {

enum class Arch { Fcn, Cnn, Concat, Trio };

Arch arch_from_string(const std::string& s);
std::string to_string(Arch arch);

/// Widths fixed by the downstream architecture.
inline constexpr std::size_t kConv1Filters = 128;
inline constexpr std::size_t kConv2Filters = 64;
inline constexpr std::size_t kHidden1 = 90;
inline constexpr std::size_t kHidden2 = 45;
inline constexpr std::size_t kMinConvInput = 12;

struct ModelConfig {
  Arch arch = Arch::Trio;
  std::size_t d_in_a = 0;
  std::size_t d_in_b = 0;  // fusion archs only
  std::size_t n_classes = 0;
  std::size_t proj_dim = 128;
  std::size_t token_dim = 64;
  double dropout_rate = 0.2;
  double lambda = 0.3;
  CcaConfig cca;
  /// TRIO only: when false the attention block is skipped (ablation).
  bool attention = true;

  bool is_fusion() const { return arch == Arch::Concat || arch == Arch::Trio; }
  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return to_json(a) == to_json(b);
  }
  static nlohmann::json to_json(const ModelConfig& c);
};

/// Inverse of ModelConfig::to_json. Unknown keys are rejected; absent keys
/// keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// FNV-1a 64 of the canonical JSON form, as 16 hex digits.
std::string config_hash(const ModelConfig& config);

struct ForwardOutput {
  Matrix probs;                     ///< N x C, rows sum to 1
  std::optional<double> cca_value;  ///< TRIO only, when N >= 2
};

struct LossParts {
  double ce = 0.0;
  std::optional<double> cca;
  double total = 0.0;
};

/// -(1/N) sum log(max(probs[n, labels[n]], 1e-12)).
double cross_entropy(const Matrix& probs, std::span<const int> labels);

/// ce - lambda * cca.
double total_loss(double ce, double cca_value, double lambda);

/// One of the four architectures together with its parameters.
///
/// Layers keep the activations of the most recent forward pass; backward()
/// differentiates the loss of that pass. Not copyable; move-only.
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// `b` is ignored by single-view architectures.
  ForwardOutput forward(const Matrix& a, const Matrix& b, bool training);

  /// Gradient of the objective of the last forward pass: cross-entropy for
  /// fcn/cnn/concat, ce - lambda * cca for trio. Grad buffers are overwritten.
  LossParts backward(std::span<const int> labels);

  /// Forward plus objective value, no gradients.
  LossParts loss(const Matrix& a, const Matrix& b, std::span<const int> labels, bool training);

  /// Gate activations of the last TRIO forward pass (view a, view b).
  std::pair<const Matrix*, const Matrix*> last_gates() const;

 private:
  struct Layers;

  ModelConfig config_;
  ParamStore params_;
  std::unique_ptr<Layers> layers_;
  Rng dropout_rng_;
};

/// Flattened width after the two conv/pool stages for an input of width d.
std::size_t conv_branch_width(std::size_t d_in);

}  // namespace srctrace
