#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace srctrace {

/// Row-major dense matrix used for every activation and parameter.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Single-precision storage for embedding tables (the on-disk element type).
using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Rng = std::mt19937_64;

// Error taxonomy. The CLI maps UserError subclasses to exit code 1 and
// everything else to exit code 2.
struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad configuration value or flag.
struct ConfigError : UserError {
  using UserError::UserError;
};

/// Malformed or inconsistent input data (files, tables, labels).
struct DataError : UserError {
  using UserError::UserError;
};

struct IoError : UserError {
  using UserError::UserError;
};

/// Caller broke an operation's precondition (shape mismatch, bad order of calls).
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

/// Divergence, non-finite values, solver failure.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Combine a base seed with a stream tag (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace srctrace
