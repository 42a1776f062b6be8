#include "srctrace/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace srctrace {

namespace {

using ConstMatrixMap = Eigen::Map<const Matrix>;
using MatrixMap = Eigen::Map<Matrix>;

void require(bool ok, const char* what) {
  if (!ok) throw ContractViolation(what);
}

// cols(ci*3 + tau, n*lout + t) = x(n, ci*length + t + tau)
Matrix im2col(const Matrix& x, std::size_t cin, std::size_t length) {
  const auto n = x.rows();
  const auto lout = static_cast<Eigen::Index>(length - 2);
  Matrix cols(static_cast<Eigen::Index>(cin * 3), n * lout);
  for (Eigen::Index s = 0; s < n; ++s) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* src = x.data() + s * x.cols() + static_cast<Eigen::Index>(ci * length);
      for (Eigen::Index tau = 0; tau < 3; ++tau) {
        double* dst = cols.data() + (static_cast<Eigen::Index>(ci) * 3 + tau) * cols.cols() + s * lout;
        std::copy(src + tau, src + tau + lout, dst);
      }
    }
  }
  return cols;
}

// Inverse of the im2col layout for the conv output: (Cout x N*Lout) -> N x (Cout*Lout).
Matrix channels_to_rows(const Matrix& m, Eigen::Index n, Eigen::Index lout) {
  const auto cout = m.rows();
  Matrix out(n, cout * lout);
  for (Eigen::Index co = 0; co < cout; ++co)
    for (Eigen::Index s = 0; s < n; ++s)
      std::copy(m.data() + co * m.cols() + s * lout, m.data() + co * m.cols() + (s + 1) * lout,
                out.data() + s * out.cols() + co * lout);
  return out;
}

Matrix rows_to_channels(const Matrix& d, std::size_t cout, Eigen::Index lout) {
  const auto n = d.rows();
  Matrix out(static_cast<Eigen::Index>(cout), n * lout);
  for (Eigen::Index co = 0; co < static_cast<Eigen::Index>(cout); ++co)
    for (Eigen::Index s = 0; s < n; ++s)
      std::copy(d.data() + s * d.cols() + co * lout, d.data() + s * d.cols() + (co + 1) * lout,
                out.data() + co * out.cols() + s * lout);
  return out;
}

void softmax_rows_inplace(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

Param& ParamStore::add(std::string name, std::vector<std::size_t> shape, Eigen::Index rows,
                       Eigen::Index cols) {
  if (contains(name)) throw ContractViolation("duplicate parameter name " + name);
  auto p = std::make_unique<Param>();
  p->name = std::move(name);
  p->shape = std::move(shape);
  p->value = Matrix::Zero(rows, cols);
  p->grad = Matrix::Zero(rows, cols);
  p->m = Matrix::Zero(rows, cols);
  p->v = Matrix::Zero(rows, cols);
  params_.push_back(std::move(p));
  return *params_.back();
}

Param& ParamStore::get(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return *p;
  throw ContractViolation("no parameter named " + name);
}

const Param& ParamStore::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return *p;
  throw ContractViolation("no parameter named " + name);
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const auto& p) { return p->name == name; });
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

std::vector<Matrix> ParamStore::snapshot() const {
  std::vector<Matrix> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->value);
  return out;
}

void ParamStore::restore(const std::vector<Matrix>& values) {
  require(values.size() == params_.size(), "restore: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    require(values[i].rows() == params_[i]->value.rows() &&
                values[i].cols() == params_[i]->value.cols(),
            "restore: parameter shape mismatch");
    params_[i]->value = values[i];
  }
}

void ParamStore::set_single_precision(bool on) {
  single_precision_ = on;
  if (on) round_values();
}

void ParamStore::round_values() {
  for (auto& p : params_) p->value = p->value.cast<float>().cast<double>();
}

void init_scaled_uniform(Matrix& m, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

void adam_step(ParamStore& store, const AdamConfig& config) {
  for (std::size_t i = 0; i < store.size(); ++i)
    if (!store[i].grad.allFinite())
      throw NumericalError("diverged: non-finite gradient in parameter " + store[i].name);

  store.advance_step();
  const double t = static_cast<double>(store.step());
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < store.size(); ++i) {
    Param& p = store[i];
    p.m = config.beta1 * p.m + (1.0 - config.beta1) * p.grad;
    p.v = config.beta2 * p.v + (1.0 - config.beta2) * p.grad.cwiseAbs2();
    p.value.array() -=
        config.lr * (p.m.array() / c1) / ((p.v.array() / c2).sqrt() + config.eps);
  }
  if (store.single_precision()) store.round_values();
}

// ---------------------------------------------------------------------------
// Pure kernels

Matrix dense_forward(const Matrix& x, const Matrix& w, const RowVector& b) {
  require(x.cols() == w.rows() && w.cols() == b.size(), "dense_forward: shape mismatch");
  Matrix out = x * w;
  out.rowwise() += b;
  return out;
}

Matrix conv1d_forward(const Matrix& x, std::size_t in_channels, const Matrix& kernels,
                      const RowVector& bias) {
  require(in_channels > 0 && x.cols() % static_cast<Eigen::Index>(in_channels) == 0,
          "conv1d_forward: input width not a multiple of channel count");
  require(kernels.cols() == static_cast<Eigen::Index>(in_channels * 3) &&
              kernels.rows() == bias.size(),
          "conv1d_forward: kernel shape mismatch");
  const auto length = static_cast<std::size_t>(x.cols()) / in_channels;
  if (length < 3) throw ContractViolation("input shorter than kernel");
  const auto lout = static_cast<Eigen::Index>(length - 2);
  Matrix y = kernels * im2col(x, in_channels, length);
  y.colwise() += bias.transpose();
  return channels_to_rows(y, x.rows(), lout);
}

Matrix maxpool1d(const Matrix& x, std::size_t channels) {
  MaxPool1d pool(channels);
  return pool.forward(x);
}

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix sigmoid(const Matrix& x) {
  return x.unaryExpr([](double v) {
    // Branches keep exp() from overflowing for large |v|.
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Matrix softmax_rows(const Matrix& x) {
  Matrix out = x;
  softmax_rows_inplace(out);
  return out;
}

Matrix dropout(const Matrix& x, double rate, Rng& rng, bool training) {
  Dropout layer(rate);
  return layer.forward(x, rng, training);
}

Matrix self_attention(const Matrix& tokens, const Matrix& wq, const Matrix& wk, const Matrix& wv) {
  require(tokens.rows() >= 1, "self_attention: need at least one token");
  require(wq.rows() == tokens.cols() && wk.rows() == tokens.cols() && wv.rows() == tokens.cols() &&
              wq.cols() == wk.cols(),
          "self_attention: shape mismatch");
  const Matrix q = tokens * wq;
  const Matrix k = tokens * wk;
  const Matrix v = tokens * wv;
  Matrix scores = (q * k.transpose()) / std::sqrt(static_cast<double>(tokens.cols()));
  softmax_rows_inplace(scores);
  return scores * v;
}

// ---------------------------------------------------------------------------
// Layers

Dense::Dense(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng)
    : in_(in), out_(out) {
  w_ = &store.add(name + ".w", {in, out}, static_cast<Eigen::Index>(in),
                  static_cast<Eigen::Index>(out));
  b_ = &store.add(name + ".b", {out}, 1, static_cast<Eigen::Index>(out));
  init_scaled_uniform(w_->value, in, out, rng);
}

Matrix Dense::forward(const Matrix& x) {
  x_ = x;
  cached_ = true;
  return dense_forward(x, w_->value, b_->value.row(0));
}

Matrix Dense::backward(const Matrix& dout, bool need_input_grad) {
  if (!cached_) throw ContractViolation("backward called before forward");
  require(dout.rows() == x_.rows() && dout.cols() == w_->value.cols(), "Dense::backward: shape");
  w_->grad.noalias() += x_.transpose() * dout;
  b_->grad.row(0) += dout.colwise().sum();
  if (!need_input_grad) return {};
  return dout * w_->value.transpose();
}

Conv1d::Conv1d(ParamStore& store, const std::string& name, std::size_t in_channels,
               std::size_t out_channels, Rng& rng)
    : cin_(in_channels), cout_(out_channels) {
  w_ = &store.add(name + ".w", {out_channels, in_channels, 3},
                  static_cast<Eigen::Index>(out_channels), static_cast<Eigen::Index>(in_channels * 3));
  b_ = &store.add(name + ".b", {out_channels}, 1, static_cast<Eigen::Index>(out_channels));
  init_scaled_uniform(w_->value, in_channels * 3, out_channels * 3, rng);
}

Matrix Conv1d::forward(const Matrix& x) {
  require(x.cols() % static_cast<Eigen::Index>(cin_) == 0,
          "Conv1d: input width not a multiple of channel count");
  length_ = static_cast<std::size_t>(x.cols()) / cin_;
  if (length_ < 3) throw ContractViolation("input shorter than kernel");
  batch_ = x.rows();
  cols_ = im2col(x, cin_, length_);
  cached_ = true;
  Matrix y = w_->value * cols_;
  y.colwise() += b_->value.row(0).transpose();
  return channels_to_rows(y, batch_, static_cast<Eigen::Index>(length_ - 2));
}

Matrix Conv1d::backward(const Matrix& dout, bool need_input_grad) {
  if (!cached_) throw ContractViolation("backward called before forward");
  const auto lout = static_cast<Eigen::Index>(length_ - 2);
  require(dout.rows() == batch_ && dout.cols() == static_cast<Eigen::Index>(cout_) * lout,
          "Conv1d::backward: shape");
  const Matrix d = rows_to_channels(dout, cout_, lout);
  w_->grad.noalias() += d * cols_.transpose();
  b_->grad.row(0) += d.rowwise().sum().transpose();
  if (!need_input_grad) return {};

  const Matrix dcols = w_->value.transpose() * d;
  Matrix dx = Matrix::Zero(batch_, static_cast<Eigen::Index>(cin_ * length_));
  for (Eigen::Index s = 0; s < batch_; ++s) {
    for (std::size_t ci = 0; ci < cin_; ++ci) {
      double* dst = dx.data() + s * dx.cols() + static_cast<Eigen::Index>(ci * length_);
      for (Eigen::Index tau = 0; tau < 3; ++tau) {
        const double* src =
            dcols.data() + (static_cast<Eigen::Index>(ci) * 3 + tau) * dcols.cols() + s * lout;
        for (Eigen::Index t = 0; t < lout; ++t) dst[t + tau] += src[t];
      }
    }
  }
  return dx;
}

Matrix MaxPool1d::forward(const Matrix& x) {
  require(x.cols() % static_cast<Eigen::Index>(channels_) == 0,
          "MaxPool1d: input width not a multiple of channel count");
  const auto length = x.cols() / static_cast<Eigen::Index>(channels_);
  if (length < 2) throw ContractViolation("nothing to pool");
  const auto lout = length / 2;
  const auto ch = static_cast<Eigen::Index>(channels_);
  Matrix out(x.rows(), ch * lout);
  argmax_.resize(x.rows(), ch * lout);
  for (Eigen::Index s = 0; s < x.rows(); ++s)
    for (Eigen::Index c = 0; c < ch; ++c)
      for (Eigen::Index t = 0; t < lout; ++t) {
        const Eigen::Index i0 = c * length + 2 * t;
        // Ties go to the first element of the window.
        const Eigen::Index pick = x(s, i0 + 1) > x(s, i0) ? i0 + 1 : i0;
        out(s, c * lout + t) = x(s, pick);
        argmax_(s, c * lout + t) = pick;
      }
  in_cols_ = x.cols();
  cached_ = true;
  return out;
}

Matrix MaxPool1d::backward(const Matrix& dout) {
  if (!cached_) throw ContractViolation("backward called before forward");
  require(dout.rows() == argmax_.rows() && dout.cols() == argmax_.cols(),
          "MaxPool1d::backward: shape");
  Matrix dx = Matrix::Zero(dout.rows(), in_cols_);
  for (Eigen::Index s = 0; s < dout.rows(); ++s)
    for (Eigen::Index j = 0; j < dout.cols(); ++j) dx(s, argmax_(s, j)) += dout(s, j);
  return dx;
}

Matrix Relu::forward(const Matrix& x) {
  mask_ = (x.array() > 0.0).cast<double>();
  cached_ = true;
  return x.cwiseMax(0.0);
}

Matrix Relu::backward(const Matrix& dout) {
  if (!cached_) throw ContractViolation("backward called before forward");
  return dout.cwiseProduct(mask_);
}

Dropout::Dropout(double rate) : rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
}

Matrix Dropout::forward(const Matrix& x, Rng& rng, bool training) {
  cached_ = true;
  if (!training || rate_ == 0.0) {
    scale_.resize(0, 0);
    return x;
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - rate_);
  scale_.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < scale_.size(); ++i)
    scale_.data()[i] = u(rng) < rate_ ? 0.0 : keep_scale;
  return x.cwiseProduct(scale_);
}

Matrix Dropout::backward(const Matrix& dout) {
  if (!cached_) throw ContractViolation("backward called before forward");
  if (scale_.size() == 0) return dout;
  return dout.cwiseProduct(scale_);
}

SigmoidGate::SigmoidGate(ParamStore& store, const std::string& name, std::size_t width, Rng& rng)
    : dense_(store, name, width, width, rng) {}

Matrix SigmoidGate::forward(const Matrix& x) {
  x_ = x;
  g_ = sigmoid(dense_.forward(x));
  cached_ = true;
  return g_.cwiseProduct(x);
}

Matrix SigmoidGate::backward(const Matrix& dout) {
  if (!cached_) throw ContractViolation("backward called before forward");
  const Matrix dz =
      dout.cwiseProduct(x_).cwiseProduct(g_).cwiseProduct((1.0 - g_.array()).matrix());
  Matrix dx = dout.cwiseProduct(g_);
  dx += dense_.backward(dz);
  return dx;
}

SelfAttention::SelfAttention(ParamStore& store, const std::string& name, std::size_t tokens,
                             std::size_t width, Rng& rng)
    : tokens_(tokens), width_(width) {
  const auto d = static_cast<Eigen::Index>(width);
  wq_ = &store.add(name + ".wq", {width, width}, d, d);
  wk_ = &store.add(name + ".wk", {width, width}, d, d);
  wv_ = &store.add(name + ".wv", {width, width}, d, d);
  init_scaled_uniform(wq_->value, width, width, rng);
  init_scaled_uniform(wk_->value, width, width, rng);
  init_scaled_uniform(wv_->value, width, width, rng);
}

Matrix SelfAttention::forward(const Matrix& x) {
  const auto t = static_cast<Eigen::Index>(tokens_);
  const auto d = static_cast<Eigen::Index>(width_);
  require(x.cols() == t * d, "SelfAttention: input width must equal tokens * width");
  const Eigen::Index n = x.rows();
  // A row-major N x (T*d) buffer is the same memory as an (N*T) x d token stack.
  x_ = ConstMatrixMap(x.data(), n * t, d);
  q_ = x_ * wq_->value;
  k_ = x_ * wk_->value;
  v_ = x_ * wv_->value;
  probs_.resize(n * t, t);
  Matrix out(n * t, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (Eigen::Index s = 0; s < n; ++s) {
    Matrix scores = q_.middleRows(s * t, t) * k_.middleRows(s * t, t).transpose() * scale;
    softmax_rows_inplace(scores);
    probs_.middleRows(s * t, t) = scores;
    out.middleRows(s * t, t).noalias() = scores * v_.middleRows(s * t, t);
  }
  cached_ = true;
  return ConstMatrixMap(out.data(), n, t * d);
}

Matrix SelfAttention::backward(const Matrix& dout) {
  if (!cached_) throw ContractViolation("backward called before forward");
  const auto t = static_cast<Eigen::Index>(tokens_);
  const auto d = static_cast<Eigen::Index>(width_);
  const Eigen::Index n = x_.rows() / t;
  require(dout.rows() == n && dout.cols() == t * d, "SelfAttention::backward: shape");
  const ConstMatrixMap dout_tok(dout.data(), n * t, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Matrix dq(n * t, d), dk(n * t, d), dv(n * t, d);
  for (Eigen::Index s = 0; s < n; ++s) {
    const auto p = probs_.middleRows(s * t, t);
    const auto dO = dout_tok.middleRows(s * t, t);
    dv.middleRows(s * t, t).noalias() = p.transpose() * dO;
    const Matrix dp = dO * v_.middleRows(s * t, t).transpose();
    const Vector row_dot = dp.cwiseProduct(p).rowwise().sum();
    Matrix ds = p.cwiseProduct((dp.colwise() - row_dot).matrix()) * scale;
    dq.middleRows(s * t, t).noalias() = ds * k_.middleRows(s * t, t);
    dk.middleRows(s * t, t).noalias() = ds.transpose() * q_.middleRows(s * t, t);
  }
  wq_->grad.noalias() += x_.transpose() * dq;
  wk_->grad.noalias() += x_.transpose() * dk;
  wv_->grad.noalias() += x_.transpose() * dv;
  Matrix dx = dq * wq_->value.transpose();
  dx.noalias() += dk * wk_->value.transpose();
  dx.noalias() += dv * wv_->value.transpose();
  return ConstMatrixMap(dx.data(), n, t * d);
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check(const std::function<double()>& loss, std::span<const GradTarget> targets,
                  const GradCheckOptions& options) {
  Rng rng(options.seed);
  double worst = 0.0;
  for (const GradTarget& target : targets) {
    std::vector<std::size_t> entries(target.size);
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries_per_target > 0 && entries.size() > options.max_entries_per_target) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_target);
    }
    for (std::size_t i : entries) {
      const double saved = target.values[i];
      target.values[i] = saved + options.eps;
      const double up = loss();
      target.values[i] = saved - options.eps;
      const double down = loss();
      target.values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double analytic = target.analytic[i];
      const double err =
          std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double grad_check(ParamStore& store, const std::function<double()>& loss,
                  const GradCheckOptions& options) {
  std::vector<GradTarget> targets;
  targets.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    Param& p = store[i];
    targets.push_back({p.name, p.value.data(), p.grad.data(), p.size()});
  }
  return grad_check(loss, targets, options);
}

}  // namespace srctrace
