#include "xfb/config.hpp"

#include <filesystem>
#include <set>

#include "xfb/error.hpp"
#include "xfb/io.hpp"

namespace xfb {

namespace {

void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  require(j.is_object(), ErrorKind::validation, where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    require(allowed.count(it.key()) == 1, ErrorKind::validation, "unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
T get_as(const Json& j, const std::string& key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::validation, where + "." + key + " has the wrong type");
  }
}

std::size_t get_count(const Json& j, const std::string& key, const std::string& where) {
  require(j.at(key).is_number_unsigned() || (j.at(key).is_number_integer() && j.at(key).get<std::int64_t>() >= 0),
          ErrorKind::validation, where + "." + key + " must be a non-negative integer");
  return j.at(key).get<std::size_t>();
}

}  // namespace

Verbosity parse_verbosity(std::string_view text) {
  if (text == "quiet") return Verbosity::quiet;
  if (text == "info") return Verbosity::info;
  if (text == "debug") return Verbosity::debug;
  fail(ErrorKind::validation, "verbosity must be quiet, info or debug, got '" + std::string(text) + "'");
}

std::string GlobalConfig::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  if (p.is_absolute()) return path;
  return (std::filesystem::path(workspace) / p).lexically_normal().string();
}

GlobalConfig parse_global_config(const Json& j) {
  check_keys(j, {"workspace", "seeds", "verbosity", "overrides", "victim_training", "surrogate_training", "serve",
                 "extract"},
             "config");
  GlobalConfig c;
  if (j.contains("workspace")) c.workspace = get_as<std::string>(j, "workspace", "config");
  if (j.contains("seeds")) {
    require(j["seeds"].is_array() && !j["seeds"].empty(), ErrorKind::validation,
            "config.seeds must be a non-empty array");
    c.seeds.clear();
    for (const auto& s : j["seeds"]) {
      require(s.is_number_unsigned(), ErrorKind::validation, "config.seeds entries must be non-negative integers");
      c.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  if (j.contains("verbosity")) c.verbosity = parse_verbosity(get_as<std::string>(j, "verbosity", "config"));
  if (j.contains("overrides")) {
    require(j["overrides"].is_object(), ErrorKind::validation, "config.overrides must be an object");
    for (auto it = j["overrides"].begin(); it != j["overrides"].end(); ++it) {
      const Json& v = it.value();
      std::string text;
      if (v.is_string()) {
        text = v.get<std::string>();
      } else if (v.is_number_integer() || v.is_number_unsigned()) {
        text = v.dump();
      } else if (v.is_number_float()) {
        text = format_double(v.get<double>());
      } else {
        fail(ErrorKind::validation, "config.overrides." + it.key() + " must be a string or number");
      }
      c.overrides.emplace_back(it.key(), text);
    }
  }
  if (j.contains("victim_training")) {
    train_config_from_json(j["victim_training"], {});
    c.victim_training = j["victim_training"];
  }
  if (j.contains("surrogate_training")) {
    train_config_from_json(j["surrogate_training"], {});
    c.surrogate_training = j["surrogate_training"];
  }
  if (j.contains("serve")) {
    const Json& s = j["serve"];
    check_keys(s, {"host", "threads", "max_body_bytes"}, "config.serve");
    if (s.contains("host")) c.serve_host = get_as<std::string>(s, "host", "config.serve");
    if (s.contains("threads")) c.serve_threads = get_count(s, "threads", "config.serve");
    if (s.contains("max_body_bytes")) c.max_body_bytes = get_count(s, "max_body_bytes", "config.serve");
    require(c.serve_threads >= 1, ErrorKind::validation, "config.serve.threads must be at least 1");
  }
  if (j.contains("extract")) {
    const Json& e = j["extract"];
    check_keys(e, {"retries", "initial_backoff_ms", "timeout_s"}, "config.extract");
    if (e.contains("retries")) c.retries = static_cast<int>(get_count(e, "retries", "config.extract"));
    if (e.contains("initial_backoff_ms")) {
      c.initial_backoff = std::chrono::milliseconds(get_count(e, "initial_backoff_ms", "config.extract"));
    }
    if (e.contains("timeout_s")) c.request_timeout = std::chrono::seconds(get_count(e, "timeout_s", "config.extract"));
  }
  return c;
}

GlobalConfig load_global_config(const std::optional<std::string>& path,
                                const std::optional<std::string>& env_workspace) {
  GlobalConfig c;
  if (path) {
    Json j;
    try {
      j = Json::parse(read_file(*path));
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::validation, "config file " + *path + " is not valid JSON: " + e.what());
    }
    c = parse_global_config(j);
  }
  if (env_workspace && !env_workspace->empty()) c.workspace = *env_workspace;
  return c;
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
  const std::string where = "training config";
  check_keys(j, {"optimizer", "initial_lr", "lr_decay_factor", "lr_decay_every", "epochs", "batch_size", "momentum",
                 "weight_decay", "seed"},
             where);
  if (j.contains("optimizer")) c.optimizer = parse_optimizer(get_as<std::string>(j, "optimizer", where));
  if (j.contains("initial_lr")) c.initial_lr = get_as<double>(j, "initial_lr", where);
  if (j.contains("lr_decay_factor")) c.lr_decay_factor = get_as<double>(j, "lr_decay_factor", where);
  if (j.contains("lr_decay_every")) c.lr_decay_every = get_count(j, "lr_decay_every", where);
  if (j.contains("epochs")) c.epochs = get_count(j, "epochs", where);
  if (j.contains("batch_size")) c.batch_size = get_count(j, "batch_size", where);
  if (j.contains("momentum")) c.momentum = get_as<double>(j, "momentum", where);
  if (j.contains("weight_decay")) c.weight_decay = get_as<double>(j, "weight_decay", where);
  if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j, "seed", where);
  c.validate();
  return c;
}

Json train_config_to_json(const TrainConfig& c) {
  return Json{{"optimizer", std::string(to_string(c.optimizer))},
              {"initial_lr", c.initial_lr},
              {"lr_decay_factor", c.lr_decay_factor},
              {"lr_decay_every", c.lr_decay_every},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"momentum", c.momentum},
              {"weight_decay", c.weight_decay},
              {"seed", c.seed}};
}

std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
  std::vector<std::uint64_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string_view part = text.substr(start, comma == std::string_view::npos ? text.size() - start : comma - start);
    require(!part.empty(), ErrorKind::validation, "empty entry in seed list '" + std::string(text) + "'");
    out.push_back(parse_u64(part, "seed"));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace xfb
