#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <pthread.h>
#include <thread>

#include "xfb/config.hpp"
#include "xfb/datagen.hpp"
#include "xfb/detectors.hpp"
#include "xfb/error.hpp"
#include "xfb/experiments.hpp"
#include "xfb/extractor.hpp"
#include "xfb/io.hpp"
#include "xfb/json.hpp"
#include "xfb/model.hpp"
#include "xfb/rng.hpp"
#include "xfb/service.hpp"
#include "xfb/train.hpp"

namespace fs = std::filesystem;
using namespace xfb;

namespace {

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation:
    case ErrorKind::dimension:
    case ErrorKind::parameter:
    case ErrorKind::format:
    case ErrorKind::mode:
      return 1;
    case ErrorKind::network:
      return 3;
    default:
      return 2;
  }
}

void print_error(std::string_view kind, const std::string& message) {
  std::cerr << canonical_json(Json{{"error", std::string(kind)}, {"message", message}}) << std::endl;
}

struct Context {
  GlobalConfig config;
  bool force = false;

  void log(const std::string& message, Verbosity level = Verbosity::info) const {
    if (config.verbosity == Verbosity::quiet) return;
    if (level == Verbosity::debug && config.verbosity != Verbosity::debug) return;
    std::cerr << canonical_json(Json{{"level", level == Verbosity::debug ? "debug" : "info"}, {"message", message}})
              << std::endl;
  }

  std::string input(const std::string& path) const {
    const std::string p = config.resolve(path);
    require(fs::exists(p), ErrorKind::validation, "input file not found: " + p);
    return p;
  }

  // Refuses existing outputs unless --force; creates parent directories.
  std::string output(const std::string& path) const {
    const std::string p = config.resolve(path);
    require(force || !fs::exists(p), ErrorKind::validation, "output exists: " + p + " (use --force to overwrite)");
    const fs::path parent = fs::path(p).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    return p;
  }

  std::uint64_t seed_or_default(const std::optional<std::uint64_t>& seed) const {
    return seed ? *seed : config.seeds.front();
  }
};

void print_json(const Json& j) { std::cout << canonical_json_pretty(j) << std::flush; }

ScenarioParams scenario_params(const Context& ctx, const std::vector<std::string>& overrides,
                               const std::string& scenario = "E1") {
  ScenarioParams p = scenario_defaults(scenario);
  for (const auto& [k, v] : ctx.config.overrides) p.apply_override(k, v);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::validation, "override must be key=value, got '" + kv + "'");
    p.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return p;
}

std::vector<std::pair<std::string, std::string>> split_overrides(const Context& ctx,
                                                                  const std::vector<std::string>& overrides) {
  auto out = ctx.config.overrides;
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::validation, "override must be key=value, got '" + kv + "'");
    out.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return out;
}

TrainConfig training_from(const std::optional<std::string>& file, const std::optional<Json>& from_config,
                          TrainConfig base, const Context& ctx) {
  if (from_config) base = train_config_from_json(*from_config, base);
  if (file) {
    Json j;
    try {
      j = Json::parse(read_file(ctx.input(*file)));
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::validation, "training config is not valid JSON: " + std::string(e.what()));
    }
    base = train_config_from_json(j, base);
  }
  return base;
}

Json file_ref(const std::string& path, const std::string& bytes) {
  return Json{{"path", path}, {"sha256", sha256_hex(bytes)}};
}

// ---- subcommands ----------------------------------------------------------------------

struct GenDataArgs {
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string train_out = "train.xfb";
  std::string test_out = "test.xfb";
  std::optional<std::string> pool_out;
  std::optional<std::size_t> pool_size;
  std::optional<double> alpha;
  std::optional<std::string> generic_out;
};

void run_gen_data(const Context& ctx, const GenDataArgs& a) {
  const std::uint64_t seed = ctx.seed_or_default(a.seed);
  const ScenarioParams p = scenario_params(ctx, a.overrides);
  const std::string train_path = ctx.output(a.train_out);
  const std::string test_path = ctx.output(a.test_out);
  std::optional<std::string> pool_path, generic_path;
  if (a.pool_out) pool_path = ctx.output(*a.pool_out);
  if (a.generic_out) generic_path = ctx.output(*a.generic_out);

  const DatasetSplit split = sample_dataset(victim_task(p, seed));
  const std::string train_bytes = serialize_dataset(split.train);
  const std::string test_bytes = serialize_dataset(split.test);
  write_file(train_path, train_bytes);
  write_file(test_path, test_bytes);
  Json out{{"seed", seed},
           {"train", file_ref(train_path, train_bytes)},
           {"test", file_ref(test_path, test_bytes)},
           {"train_size", split.train.size()},
           {"test_size", split.test.size()}};
  if (pool_path) {
    const AttackerPool pool = attacker_pool(p, seed, a.pool_size.value_or(p.pool_size), a.alpha.value_or(p.alpha));
    const std::string bytes = serialize_pool(pool);
    write_file(*pool_path, bytes);
    out["pool"] = file_ref(*pool_path, bytes);
    out["pool_size"] = pool.size();
    out["pool_victim_count"] = pool.victim_count();
  }
  if (generic_path) {
    const LabeledDataset generic = generic_dataset(p, seed);
    const std::string bytes = serialize_dataset(generic);
    write_file(*generic_path, bytes);
    out["generic"] = file_ref(*generic_path, bytes);
    out["generic_classes"] = generic.classes;
  }
  print_json(out);
}

struct TrainVictimArgs {
  std::string data;
  std::string arch = "mlp";
  std::optional<std::string> config;
  std::optional<std::string> eval;
  std::optional<std::uint64_t> seed;
  std::size_t epochs = 30;
  std::string out;
};

void run_train_victim(const Context& ctx, const TrainVictimArgs& a) {
  const std::uint64_t seed = ctx.seed_or_default(a.seed);
  const std::string out_path = ctx.output(a.out);
  const LabeledDataset data = load_dataset(ctx.input(a.data));
  const ArchitectureSpec arch = resolve_arch(a.arch, data.dims, data.classes);
  const TrainConfig cfg = training_from(a.config, ctx.config.victim_training,
                                        default_victim_training(arch, a.epochs, Rng::derive(seed, 2)), ctx);
  ctx.log("training " + arch.to_text() + " for " + std::to_string(cfg.epochs) + " epochs");
  const Model model = train_victim(data, arch, cfg, Rng::derive(seed, 1));
  const std::string bytes = serialize_model(model);
  write_file(out_path, bytes);
  Json out{{"model", file_ref(out_path, bytes)},
           {"arch", arch.to_text()},
           {"training", train_config_to_json(cfg)},
           {"train_accuracy", accuracy(model, data.inputs, data.labels)}};
  if (a.eval) {
    const LabeledDataset test = load_dataset(ctx.input(*a.eval));
    out["eval_accuracy"] = accuracy(model, model.normalization.apply(test.raw_inputs()), test.labels);
  }
  print_json(out);
}

struct ServeArgs {
  std::string model;
  std::string granularity = "full";
  std::optional<std::string> detector;
  std::string action = "log";
  int port = 8080;
  std::optional<std::string> log;
  std::optional<std::string> host;
  std::optional<std::size_t> threads;
};

void run_serve(const Context& ctx, const ServeArgs& a) {
  const Model model = load_model(ctx.input(a.model));
  const Granularity g = Granularity::parse(a.granularity);
  std::optional<Detector> detector;
  if (a.detector) detector = load_detector(ctx.input(*a.detector));
  std::shared_ptr<QueryLog> log;
  if (a.log) {
    log = std::make_shared<QueryLog>(ctx.output(*a.log));
  } else {
    log = std::make_shared<QueryLog>();
  }
  const PredictionService service(model, g, detector, parse_detector_action(a.action), log);
  ServiceConfig sc;
  sc.host = a.host.value_or(ctx.config.serve_host);
  sc.port = a.port;
  sc.threads = a.threads.value_or(ctx.config.serve_threads);
  sc.max_body_bytes = ctx.config.max_body_bytes;

  // SIGINT/SIGTERM are handled on a dedicated thread via sigwait.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  HttpServer server(service, sc);
  const int port = server.start();
  std::cout << canonical_json(Json{{"listening", Json{{"host", sc.host}, {"port", port}}}}) << std::endl;
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
  });
  waiter.detach();
  server.wait();
  ctx.log("stopped after " + std::to_string(log->size()) + " logged queries");
}

struct ExtractArgs {
  std::optional<std::string> endpoint;
  std::optional<std::string> victim;
  std::string granularity = "full";
  std::string pool;
  std::size_t budget = 10000;
  std::size_t concurrency = 1;
  std::string arch = "mlp";
  std::string targets = "soft";
  std::string balance = "none";
  std::optional<std::size_t> classes;
  std::optional<std::string> config;
  std::size_t epochs = 30;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> test;
  std::optional<std::string> transfer_out;
  std::string out;
  std::optional<std::string> report;
};

void run_extract(const Context& ctx, const ExtractArgs& a) {
  require(a.endpoint.has_value() != a.victim.has_value(), ErrorKind::validation,
          "exactly one of --endpoint and --victim is required");
  const std::uint64_t seed = ctx.seed_or_default(a.seed);
  const std::string out_path = ctx.output(a.out);
  std::optional<std::string> report_path, transfer_path;
  if (a.report) report_path = ctx.output(*a.report);
  if (a.transfer_out) transfer_path = ctx.output(*a.transfer_out);
  const AttackerPool pool = load_pool(ctx.input(a.pool));
  const BalancingPolicy balancing = BalancingPolicy::parse(a.balance);
  const TargetMode targets = parse_target_mode(a.targets);

  std::unique_ptr<QueryTarget> target;
  std::unique_ptr<PredictionService> local;
  if (a.endpoint) {
    RetryPolicy policy;
    policy.retries = ctx.config.retries;
    policy.initial_backoff = ctx.config.initial_backoff;
    policy.timeout = ctx.config.request_timeout;
    target = std::make_unique<HttpTarget>(*a.endpoint, policy);
  } else {
    local = std::make_unique<PredictionService>(load_model(ctx.input(*a.victim)), Granularity::parse(a.granularity));
    target = std::make_unique<LocalTarget>(*local);
  }
  ctx.log("querying " + std::to_string(std::min(a.budget, pool.size())) + " pool rows");
  TransferSet set = build_transfer_set(*target, pool, a.budget, Rng::derive(seed, 3), a.concurrency);
  if (a.classes) {
    require(*a.classes >= 2, ErrorKind::validation, "--classes must be at least 2");
    require(set.classes == 0 || set.classes <= *a.classes, ErrorKind::validation,
            "--classes is smaller than the class count seen in responses");
    set.classes = *a.classes;
  }
  require(set.classes >= 2, ErrorKind::validation,
          "class count unknown (label-only responses); pass --classes");
  require(set.accepted() > 0, ErrorKind::validation, "every query was rejected; nothing to train on");
  if (transfer_path) write_file(*transfer_path, serialize_transfer_set(set));

  SurrogateConfig cfg;
  cfg.arch = resolve_arch(a.arch, set.dims, set.classes);
  cfg.train = training_from(a.config, ctx.config.surrogate_training,
                            default_surrogate_training(cfg.arch, a.epochs, Rng::derive(seed, 5)), ctx);
  cfg.target_mode = targets;
  cfg.balance = balancing;
  cfg.init_seed = Rng::derive(seed, 4);
  ctx.log("training surrogate " + cfg.arch.to_text());
  const Model surrogate = train_surrogate(set, cfg, set.classes);
  const std::string bytes = serialize_model(surrogate);
  write_file(out_path, bytes);

  Json report{{"surrogate", file_ref(out_path, bytes)},
              {"arch", cfg.arch.to_text()},
              {"granularity", set.granularity.to_string()},
              {"budget", a.budget},
              {"queried", set.queried()},
              {"accepted", set.accepted()},
              {"rejected", set.rejected_indices.size()},
              {"classes", set.classes},
              {"targets", std::string(to_string(targets))},
              {"balance", balancing.to_string()},
              {"seed", seed},
              {"training", train_config_to_json(cfg.train)}};
  Json hist = Json::array();
  for (auto c : class_histogram(set, set.classes)) hist.push_back(c);
  report["histogram"] = hist;
  if (a.test) {
    const LabeledDataset test = load_dataset(ctx.input(*a.test));
    const Tensor raw = test.raw_inputs();
    const double acc_s = accuracy(surrogate, surrogate.normalization.apply(raw), test.labels);
    report["surrogate_accuracy"] = acc_s;
    if (local) {
      const double acc_v = accuracy(local->model(), local->model().normalization.apply(raw), test.labels);
      report["victim_accuracy"] = acc_v;
      report["recovery"] = recovery_ratio(acc_s, acc_v);
    }
  }
  if (report_path) write_file(*report_path, canonical_json_pretty(report));
  print_json(report);
}

struct DetectorFitArgs {
  std::string kind;
  std::string victim;
  std::optional<std::string> backbone;
  std::string in;
  std::string out_data;
  double target_tnr = 0.95;
  bool fixed_threshold = false;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void run_detector_fit(const Context& ctx, const DetectorFitArgs& a) {
  const DetectorKind kind = parse_detector_kind(a.kind);
  const std::string out_path = ctx.output(a.out);
  require(kind != DetectorKind::binary || a.backbone.has_value(), ErrorKind::validation,
          "--backbone is required for the binary detector");
  const Model model = kind == DetectorKind::binary ? load_model(ctx.input(*a.backbone)) : load_model(ctx.input(a.victim));
  const LabeledDataset in = load_dataset(ctx.input(a.in));
  const AttackerPool out = load_pool(ctx.input(a.out_data));
  DetectorFitOptions opts;
  opts.target_tnr = a.target_tnr;
  opts.fixed_threshold = a.fixed_threshold;
  opts.seed = ctx.seed_or_default(a.seed);
  ctx.log("fitting " + a.kind + " detector");
  const Detector det = fit_detector(kind, model, in.raw_inputs(), in.labels, out.inputs, opts);
  const std::string bytes = serialize_detector(det);
  write_file(out_path, bytes);
  print_json(Json{{"detector", file_ref(out_path, bytes)},
                  {"kind", std::string(to_string(kind))},
                  {"threshold", det.threshold},
                  {"threshold_mode", det.threshold_mode},
                  {"model_digest", det.model_digest()}});
}

struct DetectorEvalArgs {
  std::string detector;
  std::string in;
  std::string out_data;
  std::optional<std::string> report;
};

void run_detector_eval(const Context& ctx, const DetectorEvalArgs& a) {
  std::optional<std::string> report_path;
  if (a.report) report_path = ctx.output(*a.report);
  const Detector det = load_detector(ctx.input(a.detector));
  const LabeledDataset in = load_dataset(ctx.input(a.in));
  const AttackerPool out = load_pool(ctx.input(a.out_data));
  const DetectionMetrics m = evaluate(det, in.raw_inputs(), out.inputs);
  const Json report{{"kind", std::string(to_string(det.kind))},
                    {"tpr", m.tpr},
                    {"tnr", m.tnr},
                    {"threshold", m.threshold},
                    {"out_flagged", m.out_flagged},
                    {"out_total", m.out_total},
                    {"in_passed", m.in_passed},
                    {"in_total", m.in_total},
                    {"out_alpha", out.alpha}};
  if (report_path) write_file(*report_path, canonical_json_pretty(report));
  print_json(report);
}

struct ExperimentRunArgs {
  std::string scenario;
  std::optional<std::string> seeds;
  std::vector<std::string> overrides;
  std::string out = "report.json";
};

void run_experiment_cmd(const Context& ctx, const ExperimentRunArgs& a) {
  ExperimentSpec spec;
  spec.scenario = a.scenario;
  spec.seeds = a.seeds ? parse_seed_list(*a.seeds) : ctx.config.seeds;
  spec.overrides = split_overrides(ctx, a.overrides);
  spec.output = ctx.output(a.out);
  fs::path artifacts = spec.output;
  artifacts.replace_extension();
  artifacts += ".artifacts";
  if (fs::exists(artifacts)) {
    require(ctx.force, ErrorKind::validation, "output exists: " + artifacts.string() + " (use --force to overwrite)");
    fs::remove_all(artifacts);
  }
  spec.validate();
  ctx.log("running " + spec.scenario + " over " + std::to_string(spec.seeds.size()) + " seeds");
  const ExperimentResult r = run_experiment(spec);
  Json summary{{"report", spec.output}, {"checks", r.report["checks"]}, {"runtime_seconds", r.runtime["total"]}};
  print_json(summary);
}

struct ExperimentVerifyArgs {
  std::string report;
  std::size_t seed_index = 0;
};

void run_experiment_verify(const Context& ctx, const ExperimentVerifyArgs& a) {
  const Json r = verify_report(ctx.input(a.report), a.seed_index);
  print_json(r);
  require(r["ok"].get<bool>(), ErrorKind::validation, "recomputed values differ from the report");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xfb: model extraction and out-of-distribution query detection testbed"};
  app.require_subcommand(1);

  std::optional<std::string> config_file, workspace, verbosity;
  bool force = false;
  app.add_option("--config-file", config_file, "JSON settings file (docs/config.md)");
  app.add_option("--workspace", workspace, "Directory for relative paths (overrides XFB_WORKSPACE)");
  app.add_option("--verbosity", verbosity, "quiet, info or debug");
  app.add_flag("--force", force, "Overwrite existing outputs");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Sample the victim task (and optionally an attacker pool)");
  gen_cmd->add_option("--seed", gen.seed, "Task seed");
  gen_cmd->add_option("--override", gen.overrides, "Task parameter key=value (repeatable)");
  gen_cmd->add_option("--train-out", gen.train_out, "Training split file")->capture_default_str();
  gen_cmd->add_option("--test-out", gen.test_out, "Test split file")->capture_default_str();
  gen_cmd->add_option("--pool-out", gen.pool_out, "Attacker pool file");
  gen_cmd->add_option("--pool-size", gen.pool_size, "Pool rows");
  gen_cmd->add_option("--alpha", gen.alpha, "Fraction of pool rows from the victim's generator");
  gen_cmd->add_option("--generic-out", gen.generic_out, "Generic multi-family training data for a backbone");
  gen_cmd->add_flag("--force", force, "Overwrite existing outputs");

  TrainVictimArgs tv;
  auto* tv_cmd = app.add_subcommand("train-victim", "Train a classifier on a dataset file");
  tv_cmd->add_option("--data", tv.data, "Training dataset")->required();
  tv_cmd->add_option("--arch", tv.arch, "Preset or full architecture string")->capture_default_str();
  tv_cmd->add_option("--config", tv.config, "Training config JSON");
  tv_cmd->add_option("--epochs", tv.epochs, "Epochs when no config sets them")->capture_default_str();
  tv_cmd->add_option("--eval", tv.eval, "Dataset to report accuracy on");
  tv_cmd->add_option("--seed", tv.seed, "Initialization and shuffling seed");
  tv_cmd->add_option("--out", tv.out, "Model file")->required();
  tv_cmd->add_flag("--force", force, "Overwrite existing outputs");

  ServeArgs sv;
  auto* sv_cmd = app.add_subcommand("serve", "Serve a model over HTTP");
  sv_cmd->add_option("--model", sv.model, "Model file")->required();
  sv_cmd->add_option("--granularity", sv.granularity, "full, topk:K, rounded:D or label")->capture_default_str();
  sv_cmd->add_option("--detector", sv.detector, "Detector file");
  sv_cmd->add_option("--action", sv.action, "log or block")->capture_default_str();
  sv_cmd->add_option("--port", sv.port, "TCP port (0 = any free port)")->capture_default_str();
  sv_cmd->add_option("--host", sv.host, "Bind address");
  sv_cmd->add_option("--threads", sv.threads, "Worker threads");
  sv_cmd->add_option("--log", sv.log, "Query log file (JSON lines)");
  sv_cmd->add_flag("--force", force, "Overwrite existing outputs");

  ExtractArgs ex;
  auto* ex_cmd = app.add_subcommand("extract", "Query a victim and train a surrogate");
  ex_cmd->add_option("--endpoint", ex.endpoint, "Base URL of a running serve");
  ex_cmd->add_option("--victim", ex.victim, "Model file queried in-process");
  ex_cmd->add_option("--granularity", ex.granularity, "Response granularity with --victim")->capture_default_str();
  ex_cmd->add_option("--pool", ex.pool, "Attacker pool file")->required();
  ex_cmd->add_option("--budget", ex.budget, "Query budget")->capture_default_str();
  ex_cmd->add_option("--concurrency", ex.concurrency, "Requests in flight")->capture_default_str();
  ex_cmd->add_option("--arch", ex.arch, "Surrogate architecture")->capture_default_str();
  ex_cmd->add_option("--targets", ex.targets, "soft or hard")->capture_default_str();
  ex_cmd->add_option("--balance", ex.balance, "none, oversample or drop:<t>")->capture_default_str();
  ex_cmd->add_option("--classes", ex.classes, "Class count (required for label-only APIs)");
  ex_cmd->add_option("--config", ex.config, "Surrogate training config JSON");
  ex_cmd->add_option("--epochs", ex.epochs, "Epochs when no config sets them")->capture_default_str();
  ex_cmd->add_option("--seed", ex.seed, "Query order and training seed");
  ex_cmd->add_option("--test", ex.test, "Labeled dataset for accuracy and recovery");
  ex_cmd->add_option("--transfer-out", ex.transfer_out, "Transfer-set file");
  ex_cmd->add_option("--out", ex.out, "Surrogate model file")->required();
  ex_cmd->add_option("--report", ex.report, "Report JSON");
  ex_cmd->add_flag("--force", force, "Overwrite existing outputs");

  auto* det_cmd = app.add_subcommand("detector", "Out-of-distribution query detectors");
  det_cmd->require_subcommand(1);
  DetectorFitArgs df;
  auto* df_cmd = det_cmd->add_subcommand("fit", "Fit a detector");
  df_cmd->add_option("--kind", df.kind, "binary, msp, odin or mahalanobis")->required();
  df_cmd->add_option("--victim", df.victim, "Victim model")->required();
  df_cmd->add_option("--backbone", df.backbone, "Feature backbone (binary only)");
  df_cmd->add_option("--in", df.in, "In-distribution labeled data")->required();
  df_cmd->add_option("--out-data", df.out_data, "Out-of-distribution pool")->required();
  df_cmd->add_option("--target-tnr", df.target_tnr, "Calibration target")->capture_default_str();
  df_cmd->add_flag("--fixed-threshold", df.fixed_threshold, "Binary: keep the 0.5 probability threshold");
  df_cmd->add_option("--seed", df.seed, "Holdout and CV seed");
  df_cmd->add_option("--out", df.out, "Detector file")->required();
  df_cmd->add_flag("--force", force, "Overwrite existing outputs");
  DetectorEvalArgs de;
  auto* de_cmd = det_cmd->add_subcommand("eval", "Evaluate a detector");
  de_cmd->add_option("--detector", de.detector, "Detector file")->required();
  de_cmd->add_option("--in", de.in, "In-distribution labeled data")->required();
  de_cmd->add_option("--out-data", de.out_data, "Out-of-distribution pool")->required();
  de_cmd->add_option("--report", de.report, "Report JSON");
  de_cmd->add_flag("--force", force, "Overwrite existing outputs");

  auto* exp_cmd = app.add_subcommand("experiment", "Scenario runner");
  exp_cmd->require_subcommand(1);
  ExperimentRunArgs er;
  auto* er_cmd = exp_cmd->add_subcommand("run", "Run a scenario");
  er_cmd->add_option("--scenario", er.scenario, "E1..E5")->required();
  er_cmd->add_option("--seeds", er.seeds, "Comma-separated seeds");
  er_cmd->add_option("--override", er.overrides, "Scenario parameter key=value (repeatable)");
  er_cmd->add_option("--out", er.out, "Report path")->capture_default_str();
  er_cmd->add_flag("--force", force, "Overwrite existing outputs");
  ExperimentVerifyArgs ev;
  auto* ev_cmd = exp_cmd->add_subcommand("verify", "Recompute a report's numbers from its artifacts");
  ev_cmd->add_option("--report", ev.report, "Report path")->required();
  ev_cmd->add_option("--seed-index", ev.seed_index, "Which seed to recompute")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << std::flush;
    std::string message = e.what();
    if (argc > 1 && argv[1][0] != '-' && app.get_subcommands({}).size() > 0) {
      bool known = false;
      for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == argv[1];
      if (!known) message = "unknown subcommand '" + std::string(argv[1]) + "'";
    }
    print_error("usage", message);
    return 1;
  }

  try {
    Context ctx;
    const char* env = std::getenv("XFB_WORKSPACE");
    ctx.config = load_global_config(config_file, env ? std::optional<std::string>(env) : std::nullopt);
    if (workspace) ctx.config.workspace = *workspace;
    if (verbosity) ctx.config.verbosity = parse_verbosity(*verbosity);
    ctx.force = force;
    fs::create_directories(ctx.config.workspace);

    if (gen_cmd->parsed()) run_gen_data(ctx, gen);
    if (tv_cmd->parsed()) run_train_victim(ctx, tv);
    if (sv_cmd->parsed()) run_serve(ctx, sv);
    if (ex_cmd->parsed()) run_extract(ctx, ex);
    if (df_cmd->parsed()) run_detector_fit(ctx, df);
    if (de_cmd->parsed()) run_detector_eval(ctx, de);
    if (er_cmd->parsed()) run_experiment_cmd(ctx, er);
    if (ev_cmd->parsed()) run_experiment_verify(ctx, ev);
  } catch (const Error& e) {
    print_error(to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    print_error("io", e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error("runtime", e.what());
    return 2;
  }
  return 0;
}
