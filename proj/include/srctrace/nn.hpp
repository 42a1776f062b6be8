#pragma once

#include "srctrace/common.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace srctrace {

/// One named trainable array with its gradient and Adam moments.
///
/// Values are stored as a 2-D matrix; `shape` records the logical shape
/// (e.g. {Cout, Cin, 3} for a convolution kernel stored as Cout x 3*Cin).
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  Matrix value;
  Matrix grad;
  Matrix m;
  Matrix v;

  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

/// Owns every parameter of one model. Params live on the heap, so references
/// handed out by add() stay valid when the store is moved.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Param& add(std::string name, std::vector<std::size_t> shape, Eigen::Index rows,
             Eigen::Index cols);

  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  Param& operator[](std::size_t i) { return *params_[i]; }
  const Param& operator[](std::size_t i) const { return *params_[i]; }

  /// Total number of scalar parameters.
  std::size_t parameter_count() const;

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t t) { step_ = t; }
  void advance_step() { ++step_; }

  void zero_grad();

  /// Parameter values only, in store order.
  std::vector<Matrix> snapshot() const;
  void restore(const std::vector<Matrix>& values);

  /// When enabled, values are rounded to IEEE single precision now and after
  /// every optimizer step, so a float32 checkpoint is lossless.
  void set_single_precision(bool on);
  bool single_precision() const { return single_precision_; }
  void round_values();

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::uint64_t step_ = 0;
  bool single_precision_ = false;
};

/// Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
void init_scaled_uniform(Matrix& m, std::size_t fan_in, std::size_t fan_out, Rng& rng);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of every parameter; increments the step.
/// Throws NumericalError naming the first parameter with a non-finite gradient.
void adam_step(ParamStore& store, const AdamConfig& config);

// ---------------------------------------------------------------------------
// Pure forward kernels. Sequences are N x (C*L) matrices, channel-major per row.

Matrix dense_forward(const Matrix& x, const Matrix& w, const RowVector& b);

/// Valid, stride-1, width-3 convolution. `kernels` is Cout x (Cin*3) with
/// column index ci*3 + tau.
Matrix conv1d_forward(const Matrix& x, std::size_t in_channels, const Matrix& kernels,
                      const RowVector& bias);

/// Window 2, stride 2; a trailing odd element is dropped.
Matrix maxpool1d(const Matrix& x, std::size_t channels);

Matrix relu(const Matrix& x);
Matrix sigmoid(const Matrix& x);
Matrix softmax_rows(const Matrix& x);

/// Inverted dropout. Identity when `training` is false or `rate` is 0.
Matrix dropout(const Matrix& x, double rate, Rng& rng, bool training);

/// Single-head scaled dot-product self-attention over the rows of `tokens`.
Matrix self_attention(const Matrix& tokens, const Matrix& wq, const Matrix& wk, const Matrix& wv);

// ---------------------------------------------------------------------------
// Layers: forward caches what backward needs; backward accumulates parameter
// gradients and returns the gradient with respect to the layer input.

class Dense {
 public:
  Dense() = default;
  Dense(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& dout, bool need_input_grad = true);

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Param& weight() { return *w_; }
  Param& bias() { return *b_; }

 private:
  Param* w_ = nullptr;
  Param* b_ = nullptr;
  std::size_t in_ = 0, out_ = 0;
  Matrix x_;
  bool cached_ = false;
};

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParamStore& store, const std::string& name, std::size_t in_channels,
         std::size_t out_channels, Rng& rng);

  /// x: N x (Cin*L) -> N x (Cout*(L-2)).
  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& dout, bool need_input_grad = true);

  std::size_t in_channels() const { return cin_; }
  std::size_t out_channels() const { return cout_; }

 private:
  Param* w_ = nullptr;
  Param* b_ = nullptr;
  std::size_t cin_ = 0, cout_ = 0;
  std::size_t length_ = 0;
  Eigen::Index batch_ = 0;
  Matrix cols_;  // (Cin*3) x (N*Lout)
  bool cached_ = false;
};

class MaxPool1d {
 public:
  explicit MaxPool1d(std::size_t channels = 1) : channels_(channels) {}
  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& dout);

 private:
  std::size_t channels_;
  Eigen::Index in_cols_ = 0;
  Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> argmax_;
  bool cached_ = false;
};

class Relu {
 public:
  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& dout);

 private:
  Matrix mask_;
  bool cached_ = false;
};

class Dropout {
 public:
  explicit Dropout(double rate = 0.0);
  Matrix forward(const Matrix& x, Rng& rng, bool training);
  Matrix backward(const Matrix& dout);

 private:
  double rate_;
  Matrix scale_;  // empty when the forward pass was the identity
  bool cached_ = false;
};

/// G = sigmoid(x W + b), output G (.) x.
class SigmoidGate {
 public:
  SigmoidGate() = default;
  SigmoidGate(ParamStore& store, const std::string& name, std::size_t width, Rng& rng);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& dout);
  const Matrix& gate() const { return g_; }
  Dense& dense() { return dense_; }

 private:
  Dense dense_;
  Matrix x_;
  Matrix g_;
  bool cached_ = false;
};

/// Self-attention applied per sample: each row of the input (width T*d) is
/// viewed as T tokens of width d.
class SelfAttention {
 public:
  SelfAttention() = default;
  SelfAttention(ParamStore& store, const std::string& name, std::size_t tokens,
                std::size_t width, Rng& rng);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& dout);

  std::size_t tokens() const { return tokens_; }
  std::size_t width() const { return width_; }

 private:
  Param* wq_ = nullptr;
  Param* wk_ = nullptr;
  Param* wv_ = nullptr;
  std::size_t tokens_ = 0, width_ = 0;
  Matrix x_, q_, k_, v_;  // (N*T) x d stacks
  Matrix probs_;          // (N*T) x T
  bool cached_ = false;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (double precision test harness).

/// A contiguous block of values whose analytic gradient is already known.
struct GradTarget {
  std::string name;
  double* values;
  const double* analytic;
  std::size_t size;
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Check at most this many randomly chosen entries per target (0 = all).
  std::size_t max_entries_per_target = 0;
  std::uint64_t seed = 0;
};

/// Max over checked entries of |a - n| / max(1e-8, |a| + |n|), where n is the
/// central difference (f(v+eps) - f(v-eps)) / (2 eps). Values are restored.
double grad_check(const std::function<double()>& loss, std::span<const GradTarget> targets,
                  const GradCheckOptions& options = {});

/// Convenience: every parameter in `store`, with analytic gradients taken
/// from the store's grad buffers.
double grad_check(ParamStore& store, const std::function<double()>& loss,
                  const GradCheckOptions& options = {});

}  // namespace srctrace
