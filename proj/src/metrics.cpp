#include "srctrace/metrics.hpp"

#include "srctrace/models.hpp"

#include <algorithm>
#include <memory>
#include <cmath>
#include <numeric>
#include <sstream>

namespace srctrace {

std::vector<int> argmax_rows(const Matrix& probs) {
  std::vector<int> out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c)
      if (probs(r, c) > probs(r, best)) best = c;
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw ContractViolation("accuracy: length mismatch");
  if (preds.empty()) throw DataError("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double eer_binary(std::span<const double> scores, std::span<const bool> is_positive,
                  EerMethod method) {
  if (scores.size() != is_positive.size()) throw ContractViolation("eer_binary: length mismatch");
  const auto n_pos = static_cast<long long>(std::count(is_positive.begin(), is_positive.end(), true));
  const auto n_neg = static_cast<long long>(scores.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw DataError("EER undefined: need both positive and negative samples");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return scores[i] < scores[j]; });

  // Operating points in increasing threshold order: -inf, each midpoint between
  // consecutive distinct scores, +inf. fa = negatives >= t, fr = positives < t.
  struct Point {
    long long fa, fr;
  };
  std::vector<Point> points;
  points.reserve(scores.size() + 2);
  long long fa = n_neg, fr = 0;
  points.push_back({fa, fr});
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    std::size_t j = i;
    for (; j < order.size() && scores[order[j]] == s; ++j) {
      if (is_positive[order[j]]) ++fr;
      else --fa;
    }
    points.push_back({fa, fr});  // threshold just above s (midpoint, or +inf after the last)
    i = j;
  }

  if (method == EerMethod::Midpoint) {
    // |FAR - FRR| and FAR + FRR scaled by n_pos * n_neg stay exact in integers.
    long long best_gap = -1, best_sum = 0;
    for (const Point& p : points) {
      const long long gap = std::llabs(p.fa * n_pos - p.fr * n_neg);
      const long long sum = p.fa * n_pos + p.fr * n_neg;
      if (best_gap < 0 || gap < best_gap || (gap == best_gap && sum < best_sum)) {
        best_gap = gap;
        best_sum = sum;
      }
    }
    return static_cast<double>(best_sum) / (2.0 * static_cast<double>(n_pos * n_neg));
  }

  const auto far = [&](const Point& p) { return static_cast<double>(p.fa) / static_cast<double>(n_neg); };
  const auto frr = [&](const Point& p) { return static_cast<double>(p.fr) / static_cast<double>(n_pos); };
  for (std::size_t k = 1; k < points.size(); ++k) {
    const double d_cur = far(points[k]) - frr(points[k]);
    if (d_cur <= 0.0) {
      const double d_prev = far(points[k - 1]) - frr(points[k - 1]);
      const double alpha = d_prev / (d_prev - d_cur);
      return far(points[k - 1]) + alpha * (far(points[k]) - far(points[k - 1]));
    }
  }
  return 0.5;  // unreachable: the last point has FAR = 0, FRR = 1
}

OvaEer eer_ova(const Matrix& probs, std::span<const int> labels, EerMethod method) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size())
    throw ContractViolation("eer_ova: label count mismatch");
  const auto c = static_cast<std::size_t>(probs.cols());
  std::vector<std::size_t> counts(c, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) throw DataError("label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  OvaEer out;
  out.per_class.reserve(c);
  std::vector<double> scores(labels.size());
  // std::vector<bool> has no contiguous storage, so flags live in a plain array.
  std::unique_ptr<bool[]> positive(new bool[labels.size()]);
  for (std::size_t k = 0; k < c; ++k) {
    if (counts[k] == 0) throw DataError("class " + std::to_string(k) + " absent from labels");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      scores[i] = probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
      positive[i] = labels[i] == static_cast<int>(k);
    }
    out.per_class.push_back(
        eer_binary(scores, std::span<const bool>(positive.get(), labels.size()), method));
  }
  out.average = std::accumulate(out.per_class.begin(), out.per_class.end(), 0.0) /
                static_cast<double>(c);
  return out;
}

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels,
                                 std::size_t num_classes) {
  if (preds.size() != labels.size()) throw ContractViolation("confusion_matrix: length mismatch");
  const auto c = static_cast<Eigen::Index>(num_classes);
  ConfusionMatrix m = ConfusionMatrix::Zero(c, c);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || preds[i] >= c || labels[i] < 0 || labels[i] >= c)
      throw DataError("confusion_matrix: class index out of range");
    ++m(labels[i], preds[i]);
  }
  return m;
}

MetricsReport make_report(const Matrix& probs, std::span<const int> labels,
                          std::vector<std::string> class_names, EerMethod method) {
  if (class_names.size() != static_cast<std::size_t>(probs.cols()))
    throw ContractViolation("make_report: class name count does not match probability columns");
  MetricsReport r;
  const std::vector<int> preds = argmax_rows(probs);
  r.n = labels.size();
  r.accuracy = accuracy(preds, labels);
  r.confusion = confusion_matrix(preds, labels, class_names.size());
  OvaEer eer = eer_ova(probs, labels, method);
  r.eer_per_class = std::move(eer.per_class);
  r.eer_avg = eer.average;
  r.loss = cross_entropy(probs, labels);
  r.class_names = std::move(class_names);
  return r;
}

nlohmann::json to_json(const MetricsReport& report) {
  nlohmann::json confusion = nlohmann::json::array();
  for (Eigen::Index i = 0; i < report.confusion.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < report.confusion.cols(); ++j) row.push_back(report.confusion(i, j));
    confusion.push_back(std::move(row));
  }
  return {{"accuracy", report.accuracy},
          {"eer_avg", report.eer_avg},
          {"eer_per_class", report.eer_per_class},
          {"loss", report.loss},
          {"n", report.n},
          {"class_names", report.class_names},
          {"confusion", std::move(confusion)}};
}

MetricsReport metrics_report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.accuracy = j.at("accuracy").get<double>();
  r.eer_avg = j.at("eer_avg").get<double>();
  r.eer_per_class = j.at("eer_per_class").get<std::vector<double>>();
  r.loss = j.at("loss").get<double>();
  r.n = j.at("n").get<std::size_t>();
  r.class_names = j.at("class_names").get<std::vector<std::string>>();
  const auto& rows = j.at("confusion");
  const auto c = static_cast<Eigen::Index>(rows.size());
  r.confusion = ConfusionMatrix::Zero(c, c);
  for (Eigen::Index i = 0; i < c; ++i)
    for (Eigen::Index k = 0; k < c; ++k) r.confusion(i, k) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)].get<long long>();
  return r;
}

std::string confusion_csv(const MetricsReport& report) {
  std::ostringstream out;
  out << "true\\pred";
  for (const auto& name : report.class_names) out << ',' << name;
  out << '\n';
  for (Eigen::Index i = 0; i < report.confusion.rows(); ++i) {
    out << report.class_names[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < report.confusion.cols(); ++j) out << ',' << report.confusion(i, j);
    out << '\n';
  }
  return out.str();
}

}  // namespace srctrace
