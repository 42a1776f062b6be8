#include "srctrace/dataset.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <unordered_map>

namespace srctrace {

namespace {

constexpr std::array<char, 4> kMagic = {'S', 'T', 'E', 'B'};
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 17;

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u16(std::vector<char>& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xffu));
  out.push_back(static_cast<char>((v >> 8) & 0xffu));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::uint16_t get_u16(const char* p) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(p[0]) |
                                    (static_cast<unsigned char>(p[1]) << 8));
}

std::vector<std::string> default_class_names(std::size_t c) {
  std::vector<std::string> names;
  names.reserve(c);
  for (std::size_t i = 0; i < c; ++i) names.push_back("class_" + std::to_string(i));
  return names;
}

}  // namespace

std::optional<std::size_t> known_model_dim(const std::string& source_model) {
  static const std::map<std::string, std::size_t> dims = {
      {"ecapa", 192},        {"x-vector", 512}, {"whisper", 512},       {"wav2vec2", 768},
      {"wavlm", 768},        {"unispeech-sat", 768}, {"wav2vec2-emo", 768}, {"trillsson", 1024},
      {"xls-r", 1280},       {"mms", 1280},
  };
  auto it = dims.find(source_model);
  if (it == dims.end()) return std::nullopt;
  return it->second;
}

EmbeddingTable::EmbeddingTable(std::vector<std::string> ids, FloatMatrix vectors,
                               std::vector<int> labels, std::vector<std::string> class_names,
                               std::string source_model)
    : ids_(std::move(ids)),
      vectors_(std::move(vectors)),
      labels_(std::move(labels)),
      class_names_(std::move(class_names)),
      source_model_(std::move(source_model)) {
  if (static_cast<std::size_t>(vectors_.rows()) != ids_.size())
    throw DataError("embedding table: " + std::to_string(vectors_.rows()) + " vectors but " +
                    std::to_string(ids_.size()) + " ids");
  if (class_names_.empty()) {
    if (!labels_.empty()) throw DataError("embedding table: labels given without class names");
  } else {
    if (labels_.size() != ids_.size())
      throw DataError("embedding table: " + std::to_string(labels_.size()) + " labels but " +
                      std::to_string(ids_.size()) + " ids");
    const int c = static_cast<int>(class_names_.size());
    for (int label : labels_)
      if (label < 0 || label >= c) throw DataError("label out of range");
  }
  if (auto expected = known_model_dim(source_model_); expected && *expected != dim())
    throw DataError("embedding table: " + source_model_ + " embeddings must have dim " +
                    std::to_string(*expected) + ", got " + std::to_string(dim()));
  if (!vectors_.allFinite()) throw DataError("embedding table: non-finite vector entry");
}

EmbeddingTable EmbeddingTable::select(std::span<const std::size_t> rows) const {
  std::vector<std::string> ids;
  std::vector<int> labels;
  FloatMatrix vectors(static_cast<Eigen::Index>(rows.size()), vectors_.cols());
  ids.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    if (r >= size()) throw ContractViolation("select: row index out of range");
    ids.push_back(ids_[r]);
    if (has_labels()) labels.push_back(labels_[r]);
    vectors.row(static_cast<Eigen::Index>(i)) = vectors_.row(static_cast<Eigen::Index>(r));
  }
  return EmbeddingTable(std::move(ids), std::move(vectors), std::move(labels), class_names_,
                        source_model_);
}

Matrix EmbeddingTable::gather(std::span<const std::size_t> rows) const {
  Matrix out(static_cast<Eigen::Index>(rows.size()), vectors_.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw ContractViolation("gather: row index out of range");
    out.row(static_cast<Eigen::Index>(i)) =
        vectors_.row(static_cast<Eigen::Index>(rows[i])).cast<double>();
  }
  return out;
}

PairedDataset::PairedDataset(EmbeddingTable view_a, EmbeddingTable view_b)
    : a_(std::move(view_a)), b_(std::move(view_b)) {
  if (a_.ids() != b_.ids()) throw DataError("paired dataset: id sequences differ between views");
  if (a_.labels() != b_.labels())
    throw DataError("paired dataset: label sequences differ between views");
}

PairedDataset PairedDataset::single(EmbeddingTable view) {
  EmbeddingTable copy = view;
  return PairedDataset(std::move(view), std::move(copy));
}

PairedDataset PairedDataset::select(std::span<const std::size_t> rows) const {
  return PairedDataset(a_.select(rows), b_.select(rows));
}

std::vector<std::size_t> FoldPlan::test_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i)
    if (assignments[i] == fold) out.push_back(i);
  return out;
}

std::vector<std::size_t> FoldPlan::train_indices(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < assignments.size(); ++i)
    if (assignments[i] != fold) out.push_back(i);
  return out;
}

std::filesystem::path manifest_path_for(const std::filesystem::path& steb_path) {
  std::filesystem::path p = steb_path;
  if (p.extension() == ".steb") p.replace_extension();
  p += ".manifest.json";
  return p;
}

void write_embedding_file(const EmbeddingTable& table, const std::filesystem::path& path) {
  constexpr std::uint64_t u32_max = std::numeric_limits<std::uint32_t>::max();
  if (table.size() > u32_max || table.dim() > u32_max)
    throw DataError("STEB: dimension exceeds format limit of 2^32 - 1");
  if (table.num_classes() > std::numeric_limits<std::uint16_t>::max() + 1ULL)
    throw DataError("STEB: class count exceeds 16-bit label range");

  std::vector<char> buf;
  buf.reserve(kHeaderBytes + table.size() * table.dim() * 4 + table.size() * 2);
  buf.insert(buf.end(), kMagic.begin(), kMagic.end());
  buf.push_back(static_cast<char>(kVersion));
  put_u32(buf, static_cast<std::uint32_t>(table.size()));
  put_u32(buf, static_cast<std::uint32_t>(table.dim()));
  put_u32(buf, static_cast<std::uint32_t>(table.num_classes()));
  const FloatMatrix& v = table.vectors();
  for (Eigen::Index r = 0; r < v.rows(); ++r)
    for (Eigen::Index c = 0; c < v.cols(); ++c) put_u32(buf, std::bit_cast<std::uint32_t>(v(r, c)));
  if (table.has_labels())
    for (int label : table.labels()) put_u16(buf, static_cast<std::uint16_t>(label));

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed: " + path.string());
  }

  nlohmann::json manifest = {{"ids", table.ids()},
                             {"class_names", table.class_names()},
                             {"source_model", table.source_model()}};
  std::ofstream mout(manifest_path_for(path), std::ios::trunc);
  if (!mout) throw IoError("cannot write manifest for " + path.string());
  mout << manifest.dump(2) << '\n';
}

EmbeddingTable load_embedding_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), buf.begin()))
    throw DataError(path.string() + ": not an STEB file");
  if (buf.size() < kHeaderBytes) throw DataError(path.string() + ": corrupt file");
  if (static_cast<std::uint8_t>(buf[4]) != kVersion)
    throw DataError(path.string() + ": unsupported STEB version " +
                    std::to_string(static_cast<unsigned char>(buf[4])));
  const std::uint64_t n = get_u32(buf.data() + 5);
  const std::uint64_t d = get_u32(buf.data() + 9);
  const std::uint64_t c = get_u32(buf.data() + 13);
  const std::uint64_t expected = kHeaderBytes + n * d * 4 + (c > 0 ? n * 2 : 0);
  if (buf.size() != expected) throw DataError(path.string() + ": corrupt file");

  FloatMatrix vectors(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const char* p = buf.data() + kHeaderBytes;
  for (Eigen::Index r = 0; r < vectors.rows(); ++r)
    for (Eigen::Index col = 0; col < vectors.cols(); ++col, p += 4)
      vectors(r, col) = std::bit_cast<float>(get_u32(p));
  std::vector<int> labels;
  if (c > 0) {
    labels.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i, p += 2) {
      const std::uint16_t label = get_u16(p);
      if (label >= c) throw DataError(path.string() + ": label out of range");
      labels.push_back(label);
    }
  }

  std::vector<std::string> ids;
  std::vector<std::string> class_names = default_class_names(c);
  std::string source_model = "unknown";
  const auto mpath = manifest_path_for(path);
  if (std::filesystem::exists(mpath)) {
    std::ifstream min(mpath);
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(min);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(mpath.string() + ": " + e.what());
    }
    if (manifest.contains("ids")) ids = manifest["ids"].get<std::vector<std::string>>();
    if (manifest.contains("class_names"))
      class_names = manifest["class_names"].get<std::vector<std::string>>();
    if (manifest.contains("source_model"))
      source_model = manifest["source_model"].get<std::string>();
    if (ids.size() != n && manifest.contains("ids"))
      throw DataError(mpath.string() + ": manifest lists " + std::to_string(ids.size()) +
                      " ids for " + std::to_string(n) + " vectors");
    if (class_names.size() != c)
      throw DataError(mpath.string() + ": manifest lists " + std::to_string(class_names.size()) +
                      " class names, file declares " + std::to_string(c));
  }
  if (ids.empty()) {
    ids.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) ids.push_back(std::to_string(i));
  }
  return EmbeddingTable(std::move(ids), std::move(vectors), std::move(labels),
                        std::move(class_names), std::move(source_model));
}

PairedDataset pair_align(const EmbeddingTable& a, const EmbeddingTable& b) {
  if (a.size() == 0 || b.size() == 0) throw DataError("pair_align: both tables must be non-empty");
  std::unordered_map<std::string, std::size_t> b_rows;
  b_rows.reserve(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (!b_rows.emplace(b.ids()[i], i).second)
      throw DataError("pair_align: duplicate id " + b.ids()[i]);
  }
  std::vector<std::size_t> order;
  order.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto it = b_rows.find(a.ids()[i]);
    if (it == b_rows.end()) throw DataError("unpairable sample " + a.ids()[i]);
    if (a.has_labels() != b.has_labels() ||
        (a.has_labels() && a.labels()[i] != b.labels()[it->second]))
      throw DataError("label conflict for sample " + a.ids()[i]);
    order.push_back(it->second);
  }
  if (a.size() != b.size()) {
    std::vector<bool> used(b.size(), false);
    for (std::size_t r : order) used[r] = true;
    for (std::size_t i = 0; i < b.size(); ++i)
      if (!used[i]) throw DataError("unpairable sample " + b.ids()[i]);
  }
  return PairedDataset(a, b.select(order));
}

namespace {

std::vector<std::vector<std::size_t>> members_by_class(std::span<const int> labels) {
  int max_label = -1;
  for (int l : labels) {
    if (l < 0) throw DataError("negative label");
    max_label = std::max(max_label, l);
  }
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < labels.size(); ++i)
    members[static_cast<std::size_t>(labels[i])].push_back(i);
  return members;
}

}  // namespace

FoldPlan stratified_kfold(std::span<const int> labels, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("stratified_kfold: k must be at least 2");
  auto members = members_by_class(labels);
  for (const auto& m : members)
    if (m.size() < static_cast<std::size_t>(k)) throw DataError("class too small for k folds");

  FoldPlan plan{k, std::vector<int>(labels.size(), -1), seed};
  std::mt19937_64 rng(seed);
  // Round-robin continues across classes so total fold sizes stay balanced.
  std::size_t next = 0;
  for (auto& m : members) {
    std::shuffle(m.begin(), m.end(), rng);
    for (std::size_t idx : m) {
      plan.assignments[idx] = static_cast<int>(next % static_cast<std::size_t>(k));
      ++next;
    }
  }
  return plan;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    std::span<const int> labels, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ConfigError("stratified_split: fraction must lie in (0, 1)");
  auto members = members_by_class(labels);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> kept, held;
  for (auto& m : members) {
    if (m.empty()) continue;
    std::shuffle(m.begin(), m.end(), rng);
    auto n_held = static_cast<std::size_t>(std::llround(static_cast<double>(m.size()) * fraction));
    if (m.size() >= 2) n_held = std::clamp<std::size_t>(n_held, 1, m.size() - 1);
    else n_held = 0;
    held.insert(held.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(n_held));
    kept.insert(kept.end(), m.begin() + static_cast<std::ptrdiff_t>(n_held), m.end());
  }
  std::sort(kept.begin(), kept.end());
  std::sort(held.begin(), held.end());
  return {std::move(kept), std::move(held)};
}

std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                 std::uint64_t shuffle_seed, int epoch) {
  if (batch_size < 2) throw ConfigError("batch size must be at least 2");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start < 2) break;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace srctrace
