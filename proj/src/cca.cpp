#include "srctrace/cca.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <cmath>

namespace srctrace {

namespace {

void check_inputs(const Matrix& xh, const Matrix& yh) {
  if (xh.cols() != yh.cols()) throw ContractViolation("CCA requires equal projected dimensions");
  if (xh.rows() != yh.rows()) throw ContractViolation("CCA inputs must have equal row counts");
  if (xh.rows() < 2) throw ContractViolation("covariance undefined");
}

struct Whitener {
  Matrix basis;            // eigenvectors U
  Eigen::VectorXd eigen;   // eigenvalues lambda
  Eigen::VectorXd scaled;  // max(lambda, floor)^(-1/2)
  Matrix inv_sqrt;         // U diag(scaled) U^T
};

Whitener whiten(const Matrix& s, double eig_floor) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(s);
  if (solver.info() != Eigen::Success)
    throw NumericalError("eigendecomposition did not converge");
  Whitener w;
  w.basis = solver.eigenvectors();
  w.eigen = solver.eigenvalues();
  w.scaled = w.eigen.unaryExpr([&](double l) { return 1.0 / std::sqrt(std::max(l, eig_floor)); });
  w.inv_sqrt = w.basis * w.scaled.asDiagonal() * w.basis.transpose();
  return w;
}

// Gradient with respect to S of <g, S^(-1/2)>, using the divided differences
// of f(l) = max(l, floor)^(-1/2) in the eigenbasis of S.
Matrix inv_sqrt_backward(const Whitener& w, const Matrix& g, double eig_floor) {
  const Eigen::Index d = w.eigen.size();
  Matrix k(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) {
      const double li = w.eigen(i), lj = w.eigen(j);
      const bool ai = li > eig_floor, aj = lj > eig_floor;
      if (ai && aj) {
        const double si = std::sqrt(li), sj = std::sqrt(lj);
        k(i, j) = -1.0 / (si * sj * (si + sj));
      } else if (!ai && !aj) {
        k(i, j) = 0.0;
      } else {
        const double diff = li - lj;
        k(i, j) = diff != 0.0 ? (w.scaled(i) - w.scaled(j)) / diff : 0.0;
      }
    }
  }
  const Matrix inner = w.basis.transpose() * g * w.basis;
  return w.basis * k.cwiseProduct(inner) * w.basis.transpose();
}

}  // namespace

CcaMode cca_mode_from_string(const std::string& s) {
  if (s == "trace") return CcaMode::Trace;
  if (s == "trace_norm") return CcaMode::TraceNorm;
  throw ConfigError("unknown cca_mode '" + s + "' (expected trace or trace_norm)");
}

std::string to_string(CcaMode mode) {
  return mode == CcaMode::Trace ? "trace" : "trace_norm";
}

void CcaConfig::validate() const {
  if (!(ridge >= 0.0)) throw ConfigError("ridge must be non-negative");
  if (!(eig_floor > 0.0)) throw ConfigError("eig_floor must be positive");
}

Matrix center_columns(const Matrix& m) {
  if (m.rows() < 1) throw ContractViolation("center_columns: empty input");
  const RowVector mean = m.colwise().mean();
  Matrix out = m;
  out.rowwise() -= mean;
  return out;
}

Matrix covariance(const Matrix& a, const Matrix& b, double ridge) {
  if (a.rows() != b.rows()) throw ContractViolation("covariance: row count mismatch");
  if (a.rows() < 2) throw ContractViolation("covariance undefined");
  Matrix c = a.transpose() * b / static_cast<double>(a.rows() - 1);
  if (&a == &b) c.diagonal().array() += ridge;
  return c;
}

Matrix inv_sqrt_psd(const Matrix& s, double eig_floor) {
  if (s.rows() != s.cols()) throw ContractViolation("inv_sqrt_psd: matrix not square");
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-8)
    throw ContractViolation("inv_sqrt_psd: matrix not symmetric");
  return whiten(s, eig_floor).inv_sqrt;
}

CcaResult cca_value_and_grad(const Matrix& xh, const Matrix& yh, const CcaConfig& config) {
  check_inputs(xh, yh);
  config.validate();
  const double denom = static_cast<double>(xh.rows() - 1);
  const Matrix xc = center_columns(xh);
  const Matrix yc = center_columns(yh);
  const Matrix sxx = covariance(xc, xc, config.ridge);
  const Matrix syy = covariance(yc, yc, config.ridge);
  const Matrix sxy = covariance(xc, yc, 0.0);

  const Whitener wx = whiten(sxx, config.eig_floor);
  const Whitener wy = whiten(syy, config.eig_floor);
  const Matrix& a = wx.inv_sqrt;
  const Matrix& b = wy.inv_sqrt;
  const Matrix t = a * sxy * b;

  CcaResult result;
  Matrix g_t;  // d value / d T
  if (config.mode == CcaMode::Trace) {
    result.value = t.trace();
    g_t = Matrix::Identity(t.rows(), t.cols());
  } else {
    Eigen::JacobiSVD<Matrix> svd(t, Eigen::ComputeFullU | Eigen::ComputeFullV);
    result.value = svd.singularValues().sum();
    g_t = svd.matrixU() * svd.matrixV().transpose();
  }

  const Matrix g_a = g_t * b * sxy.transpose();
  const Matrix g_b = sxy.transpose() * a * g_t;
  const Matrix g_sxy = a * g_t * b;
  const Matrix g_sxx = inv_sqrt_backward(wx, g_a, config.eig_floor);
  const Matrix g_syy = inv_sqrt_backward(wy, g_b, config.eig_floor);

  Matrix dxc = (xc * (g_sxx + g_sxx.transpose()) + yc * g_sxy.transpose()) / denom;
  Matrix dyc = (yc * (g_syy + g_syy.transpose()) + xc * g_sxy) / denom;
  result.d_x = center_columns(dxc);
  result.d_y = center_columns(dyc);
  return result;
}

double cca_loss(const Matrix& xh, const Matrix& yh, const CcaConfig& config) {
  check_inputs(xh, yh);
  config.validate();
  const Matrix xc = center_columns(xh);
  const Matrix yc = center_columns(yh);
  const Matrix a = whiten(covariance(xc, xc, config.ridge), config.eig_floor).inv_sqrt;
  const Matrix b = whiten(covariance(yc, yc, config.ridge), config.eig_floor).inv_sqrt;
  const Matrix t = a * covariance(xc, yc, 0.0) * b;
  if (config.mode == CcaMode::Trace) return t.trace();
  Eigen::JacobiSVD<Matrix> svd(t);
  return svd.singularValues().sum();
}

std::pair<Matrix, Matrix> cca_grad(const Matrix& xh, const Matrix& yh, const CcaConfig& config) {
  CcaResult r = cca_value_and_grad(xh, yh, config);
  return {std::move(r.d_x), std::move(r.d_y)};
}

}  // namespace srctrace
