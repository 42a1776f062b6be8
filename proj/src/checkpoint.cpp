#include "srctrace/trainer.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <iterator>

namespace srctrace {

namespace {

constexpr std::array<char, 4> kMagic = {'S', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace

// Layout: "STCK", u32 version, u32 header length, JSON header, then every
// parameter as little-endian float32 in header order.
void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const ParamStore& params = model.params();
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i)
    entries.push_back({{"name", params[i].name}, {"shape", params[i].shape}});
  const nlohmann::json header = {{"version", kVersion},
                                 {"model_config", ModelConfig::to_json(model.config())},
                                 {"config_hash", config_hash(model.config())},
                                 {"step", params.step()},
                                 {"params", std::move(entries)}};
  const std::string text = header.dump();

  std::string buf(kMagic.begin(), kMagic.end());
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(text.size()));
  buf += text;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& v = params[i].value;
    for (Eigen::Index k = 0; k < v.size(); ++k)
      put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v.data()[k])));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || !std::equal(kMagic.begin(), kMagic.end(), buf.begin()))
    throw DataError(path.string() + ": not a checkpoint file");
  if (get_u32(buf.data() + 4) != kVersion)
    throw DataError(path.string() + ": unsupported checkpoint version");
  const std::size_t header_len = get_u32(buf.data() + 8);
  if (buf.size() < 12 + header_len) throw DataError(path.string() + ": corrupt checkpoint");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.begin() + 12, buf.begin() + 12 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception&) {
    throw DataError(path.string() + ": corrupt checkpoint");
  }
  const ModelConfig config = model_config_from_json(header.at("model_config"));
  if (header.at("config_hash").get<std::string>() != config_hash(config))
    throw DataError(path.string() + ": config hash does not match embedded config");

  Model model(config, 0);
  ParamStore& params = model.params();
  const auto& entries = header.at("params");
  if (entries.size() != params.size())
    throw DataError(path.string() + ": parameter list does not match architecture");
  std::size_t expected = 12 + header_len;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (entries[i].at("name").get<std::string>() != params[i].name ||
        entries[i].at("shape").get<std::vector<std::size_t>>() != params[i].shape)
      throw DataError(path.string() + ": parameter " + params[i].name + " does not match architecture");
    expected += params[i].size() * 4;
  }
  if (buf.size() != expected) throw DataError(path.string() + ": corrupt checkpoint");

  const char* p = buf.data() + 12 + header_len;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& v = params[i].value;
    for (Eigen::Index k = 0; k < v.size(); ++k, p += 4)
      v.data()[k] = static_cast<double>(std::bit_cast<float>(get_u32(p)));
  }
  params.set_step(header.at("step").get<std::uint64_t>());
  return model;
}

Model load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Model model = load_checkpoint(path);
  if (config_hash(model.config()) != config_hash(expected))
    throw DataError(path.string() + ": config-hash mismatch (checkpoint " +
                    config_hash(model.config()) + ", expected " + config_hash(expected) + ")");
  return model;
}

}  // namespace srctrace
