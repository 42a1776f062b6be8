#pragma once

#include "srctrace/common.hpp"

#include <json.hpp>

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace srctrace {

using ConfusionMatrix = Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class EerMethod {
  Midpoint,     ///< (FAR + FRR) / 2 at the sweep threshold closest to the crossing
  Interpolated, ///< linear interpolation between the two thresholds bracketing the crossing
};

struct MetricsReport {
  double accuracy = 0.0;
  std::vector<double> eer_per_class;
  double eer_avg = 0.0;
  ConfusionMatrix confusion;
  std::size_t n = 0;
  double loss = 0.0;  ///< mean cross-entropy over the evaluated samples
  std::vector<std::string> class_names;
};

/// Argmax per row; ties go to the smallest index.
std::vector<int> argmax_rows(const Matrix& probs);

double accuracy(std::span<const int> preds, std::span<const int> labels);

/// Equal error rate of one binary detection problem (higher score = positive).
double eer_binary(std::span<const double> scores, std::span<const bool> is_positive,
                  EerMethod method = EerMethod::Midpoint);

struct OvaEer {
  std::vector<double> per_class;
  double average = 0.0;
};

/// One-vs-all EER of every class column of `probs`, plus the unweighted mean.
OvaEer eer_ova(const Matrix& probs, std::span<const int> labels,
               EerMethod method = EerMethod::Midpoint);

/// Entry (i, j) counts samples of true class i predicted as j.
ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels,
                                 std::size_t num_classes);

/// Everything above, computed from class probabilities.
MetricsReport make_report(const Matrix& probs, std::span<const int> labels,
                          std::vector<std::string> class_names,
                          EerMethod method = EerMethod::Midpoint);

nlohmann::json to_json(const MetricsReport& report);
MetricsReport metrics_report_from_json(const nlohmann::json& j);

/// Confusion matrix as CSV with a class-name header row and column.
std::string confusion_csv(const MetricsReport& report);

}  // namespace srctrace
