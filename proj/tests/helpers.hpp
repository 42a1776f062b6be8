#pragma once

#include "oracles.hpp"

#include "srctrace/common.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace testing_util {

using srctrace::Matrix;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                            double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline oracle::Mat to_oracle(const Matrix& m) {
  oracle::Mat out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  return out;
}

inline double max_abs_diff(const Matrix& a, const oracle::Mat& b) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      worst = std::max(worst, std::abs(a(i, j) - b[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]));
  return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("srctrace_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_util
