#pragma once

#include "srctrace/common.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace srctrace {

/// Expected embedding width for a known upstream model tag, if the tag is known.
std::optional<std::size_t> known_model_dim(const std::string& source_model);

/// N utterance embeddings of width D with integer source labels.
///
/// Immutable after construction. A table without labels has an empty label
/// vector and no class names (C = 0 on disk).
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::vector<std::string> ids, FloatMatrix vectors, std::vector<int> labels,
                 std::vector<std::string> class_names, std::string source_model = "unknown");

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(vectors_.cols()); }
  std::size_t num_classes() const { return class_names_.size(); }
  bool has_labels() const { return !class_names_.empty(); }

  const std::vector<std::string>& ids() const { return ids_; }
  const FloatMatrix& vectors() const { return vectors_; }
  const std::vector<int>& labels() const { return labels_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::string& source_model() const { return source_model_; }

  /// New table holding the given rows, in the given order.
  EmbeddingTable select(std::span<const std::size_t> rows) const;

  /// Gather rows as double precision, in the given order.
  Matrix gather(std::span<const std::size_t> rows) const;

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) = default;

 private:
  std::vector<std::string> ids_;
  FloatMatrix vectors_;
  std::vector<int> labels_;
  std::vector<std::string> class_names_;
  std::string source_model_ = "unknown";
};

/// Two views of the same utterances, aligned row by row.
class PairedDataset {
 public:
  PairedDataset() = default;
  PairedDataset(EmbeddingTable view_a, EmbeddingTable view_b);

  /// Single-view dataset: both views refer to the same table.
  static PairedDataset single(EmbeddingTable view);

  const EmbeddingTable& view_a() const { return a_; }
  const EmbeddingTable& view_b() const { return b_; }
  std::size_t size() const { return a_.size(); }
  const std::vector<int>& labels() const { return a_.labels(); }
  std::size_t num_classes() const { return a_.num_classes(); }

  PairedDataset select(std::span<const std::size_t> rows) const;

 private:
  EmbeddingTable a_;
  EmbeddingTable b_;
};

/// Fold assignment for k-fold cross-validation.
struct FoldPlan {
  int k = 0;
  std::vector<int> assignments;
  std::uint64_t seed = 0;

  std::vector<std::size_t> test_indices(int fold) const;
  std::vector<std::size_t> train_indices(int fold) const;
};

/// Path of the JSON sidecar for an STEB file: "x.steb" -> "x.manifest.json".
std::filesystem::path manifest_path_for(const std::filesystem::path& steb_path);

/// Write `table` as STEB plus its sidecar manifest.
void write_embedding_file(const EmbeddingTable& table, const std::filesystem::path& path);

/// Read an STEB file, consulting the sidecar manifest when present.
EmbeddingTable load_embedding_file(const std::filesystem::path& path);

/// Reorder `b` to match `a`'s id order.
PairedDataset pair_align(const EmbeddingTable& a, const EmbeddingTable& b);

/// Class-stratified fold plan; classes are 0..max(label).
FoldPlan stratified_kfold(std::span<const int> labels, int k, std::uint64_t seed);

/// Stratified holdout. Returns (kept, held_out) index lists, both sorted.
///
/// Each class with m members contributes round(m * fraction) samples to the
/// held-out side, at least one when m >= 2 and never all of them.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    std::span<const int> labels, double fraction, std::uint64_t seed);

/// Shuffled index batches for one epoch. Batches shorter than 2 are dropped.
std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                 std::uint64_t shuffle_seed, int epoch);

inline std::vector<std::vector<std::size_t>> batch_iter(const EmbeddingTable& table,
                                                        std::size_t batch_size,
                                                        std::uint64_t shuffle_seed, int epoch) {
  return batch_iter(table.size(), batch_size, shuffle_seed, epoch);
}

inline std::vector<std::vector<std::size_t>> batch_iter(const PairedDataset& data,
                                                        std::size_t batch_size,
                                                        std::uint64_t shuffle_seed, int epoch) {
  return batch_iter(data.size(), batch_size, shuffle_seed, epoch);
}

}  // namespace srctrace
