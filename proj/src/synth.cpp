#include "srctrace/synth.hpp"

#include <Eigen/QR>

#include <cmath>
#include <cstdio>
#include <random>

namespace srctrace {

void SynthSpec::validate() const {
  if (n_classes < 2) throw ConfigError("need ≥ 2 classes");
  if (n_per_class < 1) throw ConfigError("per-class count must be positive");
  if (d_a < 1 || d_b < 1) throw ConfigError("view dims must be positive");
  if (!(separation >= 0.0)) throw ConfigError("separation must be non-negative");
  if (!(cross_corr >= 0.0 && cross_corr <= 1.0)) throw ConfigError("cross_corr must lie in [0, 1]");
  if (identity_maps && d_a != d_b) throw ConfigError("identity maps require d_a == d_b");
  if (n_classes > 65536) throw ConfigError("too many classes for the STEB label width");
}

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, std::normal_distribution<double>& dist,
                Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

// d x k with orthonormal columns (thin Q of a Gaussian matrix).
Matrix orthonormal_map(std::size_t d, std::size_t k, std::normal_distribution<double>& dist, Rng& rng) {
  const Matrix g = gaussian(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k), dist, rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(k));
  return q;
}

}  // namespace

SynthOutput gen_two_view_detailed(const SynthSpec& spec) {
  spec.validate();
  const std::size_t k = std::min(spec.d_a, spec.d_b);
  const auto kk = static_cast<Eigen::Index>(k);
  const auto c = static_cast<Eigen::Index>(spec.n_classes);
  const std::size_t n = spec.n_classes * spec.n_per_class;

  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Draw order is fixed: maps, class means, then samples.
  Matrix map_a, map_b;
  if (spec.identity_maps) {
    map_a = Matrix::Identity(kk, kk);
    map_b = Matrix::Identity(kk, kk);
  } else {
    map_a = orthonormal_map(spec.d_a, k, normal, rng);
    map_b = orthonormal_map(spec.d_b, k, normal, rng);
  }
  const Matrix means = gaussian(c, kk, normal, rng) * (spec.separation / std::sqrt(2.0));

  const double shared = std::sqrt(spec.cross_corr);
  const double own = std::sqrt(1.0 - spec.cross_corr);
  Matrix latent_a(static_cast<Eigen::Index>(n), kk), latent_b(static_cast<Eigen::Index>(n), kk);
  std::vector<std::string> ids;
  std::vector<int> labels;
  ids.reserve(n);
  labels.reserve(n);
  Eigen::Index row = 0;
  char id[32];
  for (std::size_t s = 0; s < spec.n_per_class; ++s) {
    // Interleave classes so any prefix of the table is balanced.
    for (Eigen::Index cls = 0; cls < c; ++cls, ++row) {
      for (Eigen::Index j = 0; j < kk; ++j) {
        const double z = normal(rng);
        const double ea = normal(rng);
        const double eb = normal(rng);
        latent_a(row, j) = means(cls, j) + shared * z + own * ea;
        latent_b(row, j) = means(cls, j) + shared * z + own * eb;
      }
      std::snprintf(id, sizeof id, "utt%06lld", static_cast<long long>(row));
      ids.emplace_back(id);
      labels.push_back(static_cast<int>(cls));
    }
  }

  std::vector<std::string> class_names;
  for (std::size_t i = 0; i < spec.n_classes; ++i) class_names.push_back("class_" + std::to_string(i));

  const FloatMatrix va = (latent_a * map_a.transpose()).cast<float>();
  const FloatMatrix vb = (latent_b * map_b.transpose()).cast<float>();
  SynthOutput out{
      PairedDataset(EmbeddingTable(ids, va, labels, class_names, spec.source_model_a),
                    EmbeddingTable(ids, vb, labels, class_names, spec.source_model_b)),
      (means * map_a.transpose()).cast<float>(),
      (means * map_b.transpose()).cast<float>()};
  return out;
}

PairedDataset gen_two_view(const SynthSpec& spec) { return gen_two_view_detailed(spec).data; }

EerCase gen_eer_case(EerCaseKind kind) {
  switch (kind) {
    case EerCaseKind::Perfect:
      return {{0.9, 0.8, 0.2, 0.1}, {true, true, false, false}, 0.0};
    case EerCaseKind::Random:
      return {{0.5, 0.5, 0.5, 0.5, 0.5, 0.5}, {true, false, true, false, true, false}, 0.5};
    case EerCaseKind::Hand:
      return {{0.9, 0.8, 0.4, 0.6, 0.2, 0.1}, {true, true, true, false, false, false}, 1.0 / 3.0};
  }
  return {};
}

}  // namespace srctrace
