#pragma once

#include "srctrace/dataset.hpp"
#include "srctrace/metrics.hpp"
#include "srctrace/models.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace srctrace {

struct TrainConfig {
  int epochs = 50;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int patience = 5;         ///< epochs without validation improvement before stopping
  double min_delta = 1e-4;  ///< improvement must exceed this
  double val_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  AdamConfig adam() const { return {lr, beta1, beta2, adam_eps}; }

  static nlohmann::json to_json(const TrainConfig& c);
};

/// Unknown keys are rejected; absent keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochRecord {
  int epoch = 0;  ///< 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int stopped_epoch = 0;  ///< number of epochs actually run
  int best_epoch = 0;     ///< epoch whose parameters were restored
  double first_batch_loss = 0.0;

  /// "epoch,train_loss,val_loss,val_acc" rows.
  std::string to_csv() const;
};

/// Mini-batch Adam training with early stopping on validation cross-entropy.
/// The parameters of the best validation epoch are restored before returning.
TrainHistory train(Model& model, const PairedDataset& train_data, const PairedDataset& val_data,
                   const TrainConfig& config);

/// Class probabilities in evaluation mode (dropout off).
Matrix predict(Model& model, const PairedDataset& data);

MetricsReport evaluate(Model& model, const PairedDataset& test_data,
                       EerMethod method = EerMethod::Midpoint);

/// Unweighted mean over folds. The confusion matrix is pooled over folds.
struct AveragedReport {
  double accuracy = 0.0;
  double eer_avg = 0.0;
  std::vector<double> eer_per_class;
  std::vector<double> fold_accuracy;
  std::vector<double> fold_eer_avg;
  ConfusionMatrix confusion;
  std::size_t n = 0;
  std::vector<std::string> class_names;
};

AveragedReport average_reports(const std::vector<MetricsReport>& reports);
nlohmann::json to_json(const AveragedReport& report);

struct KFoldResult {
  FoldPlan plan;
  std::vector<MetricsReport> reports;
  std::vector<TrainHistory> histories;
  AveragedReport average;
};

/// Called once per finished fold, possibly from a worker thread.
using FoldCallback =
    std::function<void(int fold, Model& model, const TrainHistory&, const MetricsReport&)>;

/// Stratified k-fold cross-validation. Fold i trains a fresh model seeded with
/// seed + i on the other folds (minus a stratified validation slice) and tests
/// on fold i. Up to `jobs` folds run concurrently.
KFoldResult run_kfold(const PairedDataset& data, int k, const ModelConfig& model_config,
                      const TrainConfig& config, int jobs = 1, const FoldCallback& on_fold = {});

/// JSON header (config, hash, step, names, shapes) plus float32 payload.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);
/// As above, refusing a checkpoint whose config hash differs from `expected`.
Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace srctrace
