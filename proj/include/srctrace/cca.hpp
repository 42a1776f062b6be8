#pragma once

#include "srctrace/common.hpp"

#include <string>
#include <utility>

namespace srctrace {

/// Which scalar is taken from the whitened cross-covariance T.
enum class CcaMode {
  Trace,      ///< tr(T), the default
  TraceNorm,  ///< sum of singular values of T (classical deep CCA)
};

CcaMode cca_mode_from_string(const std::string& s);
std::string to_string(CcaMode mode);

struct CcaConfig {
  double ridge = 1e-3;      ///< added to self-covariance diagonals
  double eig_floor = 1e-6;  ///< eigenvalue clamp before the inverse square root
  CcaMode mode = CcaMode::Trace;

  void validate() const;
};

/// Subtract each column's mean.
Matrix center_columns(const Matrix& m);

/// a^T b / (N - 1) for centered inputs. `ridge` is added to the diagonal only
/// when `a` and `b` are the same object (self-covariance).
Matrix covariance(const Matrix& a, const Matrix& b, double ridge);

/// U diag(max(lambda, eig_floor)^(-1/2)) U^T for symmetric `s`.
Matrix inv_sqrt_psd(const Matrix& s, double eig_floor);

/// Canonical-correlation alignment value of two equally wide feature batches.
double cca_loss(const Matrix& xh, const Matrix& yh, const CcaConfig& config = {});

struct CcaResult {
  double value = 0.0;
  Matrix d_x;  ///< d value / d xh
  Matrix d_y;  ///< d value / d yh
};

/// Value and gradients in one pass.
CcaResult cca_value_and_grad(const Matrix& xh, const Matrix& yh, const CcaConfig& config = {});

/// Gradients of cca_loss with respect to both inputs.
std::pair<Matrix, Matrix> cca_grad(const Matrix& xh, const Matrix& yh,
                                   const CcaConfig& config = {});

}  // namespace srctrace
