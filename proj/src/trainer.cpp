#include "srctrace/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace srctrace {

namespace {

constexpr std::size_t kEvalChunk = 512;

Matrix gather_b(const Model& model, const PairedDataset& data, std::span<const std::size_t> rows) {
  return model.config().is_fusion() ? data.view_b().gather(rows) : Matrix();
}

void check_dims(const Model& model, const PairedDataset& data) {
  const ModelConfig& c = model.config();
  if (data.view_a().dim() != c.d_in_a)
    throw DataError("view A has dim " + std::to_string(data.view_a().dim()) + ", model expects " +
                    std::to_string(c.d_in_a));
  if (c.is_fusion() && data.view_b().dim() != c.d_in_b)
    throw DataError("view B has dim " + std::to_string(data.view_b().dim()) + ", model expects " +
                    std::to_string(c.d_in_b));
  if (!data.view_a().has_labels()) throw DataError("dataset has no labels");
  if (data.num_classes() != c.n_classes)
    throw DataError("dataset has " + std::to_string(data.num_classes()) + " classes, model expects " +
                    std::to_string(c.n_classes));
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (patience < 1) throw ConfigError("patience must be at least 1");
  if (!(min_delta >= 0.0)) throw ConfigError("min_delta must be non-negative");
  if (!(val_fraction > 0.0 && val_fraction < 0.5))
    throw ConfigError("val_fraction must lie in (0, 0.5)");
}

nlohmann::json TrainConfig::to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"lr", c.lr},
          {"beta1", c.beta1},           {"beta2", c.beta2},           {"adam_eps", c.adam_eps},
          {"patience", c.patience},     {"min_delta", c.min_delta},
          {"val_fraction", c.val_fraction}, {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::set<std::string> known = {"epochs", "batch_size", "lr", "beta1", "beta2",
                                              "adam_eps", "patience", "min_delta",
                                              "val_fraction", "seed"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown train config key '" + key + "'");
  TrainConfig c;
  try {
    if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    if (j.contains("beta1")) c.beta1 = j["beta1"].get<double>();
    if (j.contains("beta2")) c.beta2 = j["beta2"].get<double>();
    if (j.contains("adam_eps")) c.adam_eps = j["adam_eps"].get<double>();
    if (j.contains("patience")) c.patience = j["patience"].get<int>();
    if (j.contains("min_delta")) c.min_delta = j["min_delta"].get<double>();
    if (j.contains("val_fraction")) c.val_fraction = j["val_fraction"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

std::string TrainHistory::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,train_loss,val_loss,val_acc\n";
  for (const auto& e : epochs)
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_accuracy << '\n';
  return out.str();
}

Matrix predict(Model& model, const PairedDataset& data) {
  const std::size_t n = data.size();
  Matrix probs(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(model.config().n_classes));
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < n; start += kEvalChunk) {
    const std::size_t end = std::min(n, start + kEvalChunk);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    ForwardOutput out = model.forward(data.view_a().gather(rows), gather_b(model, data, rows),
                                      /*training=*/false);
    probs.middleRows(static_cast<Eigen::Index>(start), out.probs.rows()) = out.probs;
  }
  return probs;
}

TrainHistory train(Model& model, const PairedDataset& train_data, const PairedDataset& val_data,
                   const TrainConfig& config) {
  config.validate();
  check_dims(model, train_data);
  check_dims(model, val_data);
  if (val_data.size() == 0) throw DataError("validation set is empty");
  if (train_data.size() < 2) throw DataError("training set needs at least 2 samples");

  ParamStore& params = model.params();
  params.set_single_precision(true);
  const AdamConfig adam = config.adam();
  const std::uint64_t shuffle_seed = derive_seed(config.seed, 2);

  TrainHistory history;
  // The snapshot follows the lowest validation loss seen; patience only
  // resets on an improvement larger than min_delta over the last reset.
  double best_val = std::numeric_limits<double>::infinity();
  double patience_ref = best_val;
  std::vector<Matrix> best_params = params.snapshot();
  int since_improvement = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches = batch_iter(train_data, config.batch_size, shuffle_seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& rows = batches[bi];
      std::vector<int> labels(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = train_data.labels()[rows[i]];
      model.forward(train_data.view_a().gather(rows), gather_b(model, train_data, rows),
                    /*training=*/true);
      const LossParts parts = model.backward(labels);
      if (!std::isfinite(parts.total))
        throw NumericalError("diverged at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(bi + 1));
      if (epoch == 1 && bi == 0) history.first_batch_loss = parts.total;
      loss_sum += parts.total;
      try {
        adam_step(params, adam);
      } catch (const NumericalError& e) {
        throw NumericalError("diverged at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(bi + 1) + " (" + e.what() + ")");
      }
    }

    const Matrix val_probs = predict(model, val_data);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = batches.empty() ? 0.0 : loss_sum / static_cast<double>(batches.size());
    rec.val_loss = cross_entropy(val_probs, val_data.labels());
    rec.val_accuracy = accuracy(argmax_rows(val_probs), val_data.labels());
    if (!std::isfinite(rec.val_loss))
      throw NumericalError("diverged at epoch " + std::to_string(epoch) + " (validation loss)");
    history.epochs.push_back(rec);
    history.stopped_epoch = epoch;

    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      best_params = params.snapshot();
      history.best_epoch = epoch;
    }
    if (rec.val_loss < patience_ref - config.min_delta) {
      patience_ref = rec.val_loss;
      since_improvement = 0;
    } else if (++since_improvement >= config.patience) {
      break;
    }
  }
  params.restore(best_params);
  return history;
}

MetricsReport evaluate(Model& model, const PairedDataset& test_data, EerMethod method) {
  check_dims(model, test_data);
  if (test_data.size() == 0) throw DataError("test set is empty");
  return make_report(predict(model, test_data), test_data.labels(), test_data.view_a().class_names(),
                     method);
}

AveragedReport average_reports(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ContractViolation("average_reports: no reports");
  AveragedReport avg;
  const std::size_t c = reports.front().eer_per_class.size();
  avg.eer_per_class.assign(c, 0.0);
  avg.confusion = ConfusionMatrix::Zero(reports.front().confusion.rows(),
                                        reports.front().confusion.cols());
  avg.class_names = reports.front().class_names;
  for (const auto& r : reports) {
    avg.fold_accuracy.push_back(r.accuracy);
    avg.fold_eer_avg.push_back(r.eer_avg);
    for (std::size_t i = 0; i < c; ++i) avg.eer_per_class[i] += r.eer_per_class[i];
    avg.confusion += r.confusion;
    avg.n += r.n;
  }
  const auto k = static_cast<double>(reports.size());
  avg.accuracy = std::accumulate(avg.fold_accuracy.begin(), avg.fold_accuracy.end(), 0.0) / k;
  avg.eer_avg = std::accumulate(avg.fold_eer_avg.begin(), avg.fold_eer_avg.end(), 0.0) / k;
  for (double& e : avg.eer_per_class) e /= k;
  return avg;
}

nlohmann::json to_json(const AveragedReport& report) {
  nlohmann::json confusion = nlohmann::json::array();
  for (Eigen::Index i = 0; i < report.confusion.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < report.confusion.cols(); ++j) row.push_back(report.confusion(i, j));
    confusion.push_back(std::move(row));
  }
  return {{"accuracy", report.accuracy},
          {"eer_avg", report.eer_avg},
          {"eer_per_class", report.eer_per_class},
          {"fold_accuracy", report.fold_accuracy},
          {"fold_eer_avg", report.fold_eer_avg},
          {"n", report.n},
          {"class_names", report.class_names},
          {"confusion_pooled", std::move(confusion)}};
}

KFoldResult run_kfold(const PairedDataset& data, int k, const ModelConfig& model_config,
                      const TrainConfig& config, int jobs, const FoldCallback& on_fold) {
  if (k < 2) throw ConfigError("k must be at least 2");
  config.validate();
  KFoldResult result;
  result.plan = stratified_kfold(data.labels(), k, config.seed);
  result.reports.resize(static_cast<std::size_t>(k));
  result.histories.resize(static_cast<std::size_t>(k));

  auto run_fold = [&](int fold) {
    const PairedDataset pool = data.select(result.plan.train_indices(fold));
    const PairedDataset test = data.select(result.plan.test_indices(fold));
    TrainConfig fold_config = config;
    fold_config.seed = config.seed + static_cast<std::uint64_t>(fold);
    const auto [fit_rows, val_rows] =
        stratified_split(pool.labels(), config.val_fraction, fold_config.seed);
    Model model(model_config, fold_config.seed);
    TrainHistory history =
        train(model, pool.select(fit_rows), pool.select(val_rows), fold_config);
    MetricsReport report = evaluate(model, test);
    if (on_fold) on_fold(fold, model, history, report);
    result.histories[static_cast<std::size_t>(fold)] = std::move(history);
    result.reports[static_cast<std::size_t>(fold)] = std::move(report);
  };

  const int workers = std::clamp(jobs, 1, k);
  if (workers == 1) {
    for (int fold = 0; fold < k; ++fold) run_fold(fold);
  } else {
    std::mutex mu;
    int next = 0;
    std::exception_ptr failure;
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) {
      threads.emplace_back([&] {
        for (;;) {
          int fold;
          {
            std::lock_guard lock(mu);
            if (failure || next >= k) return;
            fold = next++;
          }
          try {
            run_fold(fold);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  result.average = average_reports(result.reports);
  return result;
}

}  // namespace srctrace
