#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xfb/json.hpp"
#include "xfb/train.hpp"

namespace xfb {

enum class Verbosity { quiet, info, debug };
Verbosity parse_verbosity(std::string_view text);

// Settings shared by every subcommand; see docs/config.md for the file schema.
struct GlobalConfig {
  std::string workspace = ".";
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  Verbosity verbosity = Verbosity::info;
  std::vector<std::pair<std::string, std::string>> overrides;  // scenario keys
  std::optional<Json> victim_training;     // TrainConfig object
  std::optional<Json> surrogate_training;  // TrainConfig object
  std::string serve_host = "127.0.0.1";
  std::size_t serve_threads = 8;
  std::size_t max_body_bytes = 1 << 20;
  int retries = 3;
  std::chrono::milliseconds initial_backoff{100};
  std::chrono::seconds request_timeout{30};

  // Relative paths resolve under the workspace; absolute paths are kept.
  std::string resolve(const std::string& path) const;
};

// Reads the JSON file (if given) over the defaults, then applies
// XFB_WORKSPACE from `env_workspace`. Unknown keys are a validation error.
GlobalConfig load_global_config(const std::optional<std::string>& path,
                                const std::optional<std::string>& env_workspace);
GlobalConfig parse_global_config(const Json& j);

// Fields missing from the object keep the value in `base`.
TrainConfig train_config_from_json(const Json& j, TrainConfig base);
Json train_config_to_json(const TrainConfig& c);

// "1,2,3" -> {1, 2, 3}
std::vector<std::uint64_t> parse_seed_list(std::string_view text);

}  // namespace xfb
