#pragma once

#include "srctrace/models.hpp"
#include "srctrace/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace srctrace::cli {

/// Exit codes: 0 success, 1 user/config error, 2 internal/numerical error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

/// Paths of one split's two views (view_b empty when absent).
struct ViewPaths {
  std::filesystem::path view_a;
  std::filesystem::path view_b;
};

/// Parsed run configuration file with every default filled in.
struct RunConfig {
  ViewPaths train;
  std::optional<ViewPaths> val;
  std::optional<ViewPaths> test;
  double test_fraction = 0.2;
  nlohmann::json model;  ///< model section as given (dims may be absent)
  TrainConfig train_config;
  std::filesystem::path output_dir;
};

/// Relative paths are resolved against the config file's directory.
RunConfig load_run_config(const std::filesystem::path& path);

/// Fully resolved configuration (model dims inferred from data) as JSON.
nlohmann::json resolved_json(const RunConfig& config, const ModelConfig& model);

/// Entry point shared by the executable and the tests. `args` excludes argv[0].
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace srctrace::cli
