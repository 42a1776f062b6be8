#pragma once

#include "srctrace/dataset.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace srctrace {

/// Two-view synthetic dataset parameters.
///
/// Samples are generated in a latent space of width k = min(d_a, d_b). Class
/// means are Gaussian with per-coordinate std separation / sqrt(2), so two
/// class means lie about separation * sqrt(k) apart, while a within-class
/// deviation has RMS length sqrt(k) (per-coordinate std 1). Each view is an
/// orthonormal-column linear map of mean + sqrt(rho) z + sqrt(1 - rho) e_view.
struct SynthSpec {
  std::size_t n_classes = 10;
  std::size_t n_per_class = 200;
  std::size_t d_a = 64;
  std::size_t d_b = 48;
  double separation = 2.0;
  double cross_corr = 0.7;
  std::uint64_t seed = 7;
  /// Use identity maps instead of random ones (requires d_a == d_b).
  bool identity_maps = false;
  std::string source_model_a = "synth-a";
  std::string source_model_b = "synth-b";

  void validate() const;
};

struct SynthOutput {
  PairedDataset data;
  FloatMatrix class_means_a;  ///< n_classes x d_a, in view space
  FloatMatrix class_means_b;  ///< n_classes x d_b
};

SynthOutput gen_two_view_detailed(const SynthSpec& spec);
PairedDataset gen_two_view(const SynthSpec& spec);

enum class EerCaseKind { Perfect, Random, Hand };

struct EerCase {
  std::vector<double> scores;
  std::vector<bool> is_positive;
  double expected_eer = 0.0;
};

/// Fixtures with known equal error rates: perfect separation (0), identical
/// scores (0.5), and a hand-computed three-vs-three case (1/3).
EerCase gen_eer_case(EerCaseKind kind);

}  // namespace srctrace
