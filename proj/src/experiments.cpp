#include "xfb/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>

#include "xfb/detectors.hpp"
#include "xfb/error.hpp"
#include "xfb/extractor.hpp"
#include "xfb/io.hpp"
#include "xfb/nn.hpp"
#include "xfb/rng.hpp"
#include "xfb/service.hpp"
#include "xfb/train.hpp"

namespace fs = std::filesystem;

namespace xfb {

namespace {

// Stream tags for the per-seed sub-seeds.
enum : std::uint64_t {
  kFamilyTag = 0x46414d31,
  kSplitTag,
  kDisjointTag,
  kPoolTag,
  kQueryTag,
  kVictimInitTag,
  kVictimTrainTag,
  kSurrogateInitTag,
  kSurrogateTrainTag,
  kLowDiversityTag,
  kSkewedPoolTag,
  kBackboneTag,
  kDetectorOutTag,
  kDetectorFitTag,
  kEvalPoolTag,
};

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t tag) { return Rng::derive(seed, tag); }

const std::vector<double> kAlphaSweep = {0.0, 0.25, 0.5, 0.75, 1.0};
const std::vector<std::string> kE2Granularities = {"full", "topk:3", "rounded:2", "label"};
const std::vector<DetectorKind> kDetectorKinds = {DetectorKind::binary, DetectorKind::msp, DetectorKind::odin,
                                                  DetectorKind::mahalanobis};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::size_t to_count(const std::string& key, const std::string& value) {
  try {
    return static_cast<std::size_t>(parse_u64(value, key));
  } catch (const Error&) {
    fail(ErrorKind::validation, "override " + key + " needs a non-negative integer, got '" + value + "'");
  }
}

double to_real(const std::string& key, const std::string& value) {
  try {
    return parse_double(value, key);
  } catch (const Error&) {
    fail(ErrorKind::validation, "override " + key + " needs a number, got '" + value + "'");
  }
}

// Everything a scenario needs for one seed's victim.
struct VictimSetup {
  DatasetSpec spec;
  DatasetSplit split;
  Model victim;
  double accuracy = 0.0;
  std::vector<double> per_class;
};

}  // namespace

DatasetSpec victim_task(const ScenarioParams& p, std::uint64_t seed) {
  DatasetSpec spec;
  spec.family.seed = sub_seed(seed, kFamilyTag);
  spec.family.num_prototypes = p.classes;
  spec.family.dims = {16, 16, 1};
  spec.family.smoothness = p.smoothness;
  spec.family.shared_weight = p.shared_weight;
  spec.classes = p.classes;
  spec.samples_per_class = p.samples_per_class;
  spec.noise_sigma = p.noise_sigma;
  spec.jitter_pixels = p.jitter;
  spec.split_seed = sub_seed(seed, kSplitTag);
  return spec;
}

TrainConfig default_victim_training(const ArchitectureSpec& arch, std::size_t epochs, std::uint64_t seed) {
  TrainConfig c;
  if (arch.family == Family::cnn) {
    c.optimizer = OptimizerKind::adam;
    c.initial_lr = 0.001;
  } else {
    c.optimizer = OptimizerKind::sgd_momentum;
    c.initial_lr = 0.01;
  }
  c.epochs = epochs;
  c.lr_decay_every = epochs * 2 / 3;
  c.lr_decay_factor = 0.1;
  c.batch_size = 32;
  c.seed = seed;
  return c;
}

TrainConfig default_surrogate_training(const ArchitectureSpec& arch, std::size_t epochs, std::uint64_t seed) {
  TrainConfig c;
  c.optimizer = OptimizerKind::sgd_momentum;
  c.initial_lr = 0.01;
  if (arch.family == Family::cnn) {
    c.optimizer = OptimizerKind::adam;
    c.initial_lr = 0.001;
  }
  c.epochs = epochs;
  c.lr_decay_every = epochs * 2 / 3;
  c.lr_decay_factor = 0.1;
  c.batch_size = 64;
  c.seed = seed;
  return c;
}

namespace {

FamilyParams disjoint_family(const ScenarioParams& p, std::uint64_t seed) {
  return {sub_seed(seed, kDisjointTag), p.foreign_prototypes, {16, 16, 1}, p.smoothness, 0.0};
}

PoolOptions foreign_options(const ScenarioParams& p) {
  PoolOptions o;
  o.foreign_noise_sigma = p.foreign_noise;
  return o;
}

}  // namespace

AttackerPool attacker_pool(const ScenarioParams& p, std::uint64_t seed, std::size_t size, double alpha) {
  return sample_pool(victim_task(p, seed), disjoint_family(p, seed), size, alpha, sub_seed(seed, kPoolTag),
                     foreign_options(p));
}

LabeledDataset generic_dataset(const ScenarioParams& p, std::uint64_t seed) {
  const Dims dims{16, 16, 1};
  const std::size_t classes = p.backbone_families * p.backbone_prototypes;
  require(classes >= 2, ErrorKind::validation, "backbone task needs at least 2 classes");
  require(p.backbone_samples >= 1, ErrorKind::validation, "backbone_samples must be at least 1");
  Tensor raw({classes * p.backbone_samples, dims.size()});
  LabeledDataset data;
  data.dims = dims;
  data.classes = classes;
  data.family_seed = sub_seed(seed, kBackboneTag);
  data.part = "train";
  Rng rng(data.family_seed);
  std::size_t row = 0;
  for (std::size_t f = 0; f < p.backbone_families; ++f) {
    const PatternFamily family =
        make_family({Rng::derive(data.family_seed, f + 1), p.backbone_prototypes, dims, p.smoothness, 0.0});
    for (std::size_t k = 0; k < p.backbone_prototypes; ++k) {
      for (std::size_t i = 0; i < p.backbone_samples; ++i) {
        draw_sample(family.prototypes[k], dims, p.noise_sigma, p.jitter, rng, raw.row(row++));
        data.labels.push_back(f * p.backbone_prototypes + k);
      }
    }
  }
  data.normalization = channel_statistics(raw, dims.channels);
  data.inputs = data.normalization.apply(raw);
  return data;
}

namespace {

VictimSetup make_victim(const ScenarioParams& p, std::uint64_t seed, const std::string& arch_name) {
  VictimSetup v;
  v.spec = victim_task(p, seed);
  v.split = sample_dataset(v.spec);
  const ArchitectureSpec arch = resolve_arch(arch_name, v.spec.family.dims, p.classes);
  v.victim = train_victim(v.split.train, arch, default_victim_training(arch, p.victim_epochs, sub_seed(seed, kVictimTrainTag)),
                          sub_seed(seed, kVictimInitTag));
  v.accuracy = accuracy(v.victim, v.split.test.inputs, v.split.test.labels);
  v.per_class = per_class_accuracy(v.victim, v.split.test.inputs, v.split.test.labels, p.classes);
  return v;
}

// Artifact bookkeeping: files under <root>/seed-<s>/, referenced relative to
// the report directory.
class Artifacts {
 public:
  Artifacts(fs::path report_dir, fs::path root) : report_dir_(std::move(report_dir)), root_(std::move(root)) {}

  Json write(std::uint64_t seed, const std::string& name, const std::string& bytes) {
    const fs::path path = root_ / ("seed-" + std::to_string(seed)) / name;
    write_file(path.string(), bytes);
    files_.push_back(path.string());
    return Json{{"path", fs::relative(path, report_dir_).generic_string()}, {"sha256", sha256_hex(bytes)}};
  }

  const std::vector<std::string>& files() const { return files_; }

 private:
  fs::path report_dir_;
  fs::path root_;
  std::vector<std::string> files_;
};

struct Extraction {
  Model surrogate;
  TransferSet set;
  double accuracy = 0.0;
  std::vector<double> per_class;
};

Extraction extract(const ScenarioParams& p, const VictimSetup& v, const AttackerPool& pool, const Granularity& g,
                   const std::string& arch_name, TargetMode targets, const BalancingPolicy& balancing,
                   std::size_t budget, std::uint64_t seed) {
  PredictionService service(v.victim, g);
  LocalTarget target(service);
  Extraction e;
  e.set = build_transfer_set(target, pool, budget, sub_seed(seed, kQueryTag), p.concurrency);
  SurrogateConfig cfg;
  cfg.arch = resolve_arch(arch_name, v.spec.family.dims, p.classes);
  cfg.train = default_surrogate_training(cfg.arch, p.surrogate_epochs, sub_seed(seed, kSurrogateTrainTag));
  cfg.target_mode = targets;
  cfg.balance = balancing;
  cfg.init_seed = sub_seed(seed, kSurrogateInitTag);
  e.surrogate = train_surrogate(e.set, cfg, p.classes);
  const Tensor test_raw = v.split.test.raw_inputs();
  const Tensor x = e.surrogate.normalization.apply(test_raw);
  e.accuracy = accuracy(e.surrogate, x, v.split.test.labels);
  e.per_class = per_class_accuracy(e.surrogate, x, v.split.test.labels, p.classes);
  return e;
}

Json count_array(const std::vector<std::size_t>& v) {
  Json a = Json::array();
  for (std::size_t x : v) a.push_back(x);
  return a;
}

Json extraction_record(std::uint64_t seed, const std::string& variant, const VictimSetup& v, const Extraction& e,
                       const Json& victim_ref, const Json& test_ref, const Json& surrogate_ref) {
  Json r;
  r["seed"] = seed;
  r["variant"] = variant;
  r["victim_accuracy"] = v.accuracy;
  r["surrogate_accuracy"] = e.accuracy;
  r["recovery"] = recovery_ratio(e.accuracy, v.accuracy);
  r["recovery_2dp"] = round2(recovery_ratio(e.accuracy, v.accuracy));
  r["per_class_victim"] = json_array(v.per_class);
  r["per_class_surrogate"] = json_array(e.per_class);
  r["min_per_class_surrogate"] = *std::min_element(e.per_class.begin(), e.per_class.end());
  r["histogram"] = e.set.accepted() > 0 ? count_array(class_histogram(e.set, v.victim.classes())) : Json::array();
  r["accepted"] = e.set.accepted();
  r["rejected"] = e.set.rejected_indices.size();
  r["granularity"] = e.set.granularity.to_string();
  r["artifacts"] = Json{{"victim", victim_ref}, {"test_data", test_ref}, {"surrogate", surrogate_ref}};
  return r;
}

Model train_backbone(const ScenarioParams& p, std::uint64_t seed) {
  const LabeledDataset data = generic_dataset(p, seed);
  const ArchitectureSpec arch = resolve_arch("backbone", data.dims, data.classes);
  TrainConfig c;
  c.optimizer = OptimizerKind::adam;
  c.initial_lr = 0.001;
  c.epochs = p.backbone_epochs;
  c.batch_size = 32;
  c.seed = Rng::derive(sub_seed(seed, kBackboneTag), 0);
  Model backbone = train(Model::initialize(arch, c.seed), data.inputs, one_hot(data.labels, data.classes), c);
  backbone.normalization = data.normalization;
  return backbone;
}

std::string alpha_tag(double alpha) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "a%.2f", alpha);
  return buf;
}

Json detection_metrics_json(const DetectionMetrics& m) {
  return Json{{"tpr", m.tpr},          {"tnr", m.tnr},           {"threshold", m.threshold},
              {"out_flagged", m.out_flagged}, {"out_total", m.out_total}, {"in_passed", m.in_passed},
              {"in_total", m.in_total}};
}

// ---- scenarios ---------------------------------------------------------------------

using Runtime = std::map<std::string, double>;

void run_e1_e2(const ScenarioParams& p, bool sweep, std::uint64_t seed, Artifacts& art, Json& records, Runtime& rt) {
  auto t0 = std::chrono::steady_clock::now();
  const VictimSetup v = make_victim(p, seed, p.victim_arch);
  rt["victim"] += seconds_since(t0);
  const Json victim_ref = art.write(seed, "victim.xfbm", serialize_model(v.victim));
  const Json test_ref = art.write(seed, "test.xfb", serialize_dataset(v.split.test));
  const AttackerPool pool =
      attacker_pool(p, seed, p.pool_size, p.alpha);
  const std::vector<std::string> modes = sweep ? kE2Granularities : std::vector<std::string>{p.granularity};
  for (const auto& mode : modes) {
    t0 = std::chrono::steady_clock::now();
    const Granularity g = Granularity::parse(mode);
    TargetMode targets = parse_target_mode(p.targets);
    if (g.mode == Granularity::Mode::label) targets = TargetMode::hard;
    const Extraction e = extract(p, v, pool, g, p.surrogate_arch, targets, BalancingPolicy::parse(p.balance), p.budget, seed);
    std::string name = mode;
    std::replace(name.begin(), name.end(), ':', '-');
    const Json s_ref = art.write(seed, "surrogate-" + name + ".xfbm", serialize_model(e.surrogate));
    records.push_back(extraction_record(seed, mode, v, e, victim_ref, test_ref, s_ref));
    rt["extract:" + mode] += seconds_since(t0);
  }
}

void run_e3(const ScenarioParams& p, std::uint64_t seed, Artifacts& art, Json& records, Runtime& rt) {
  auto t0 = std::chrono::steady_clock::now();
  const VictimSetup v = make_victim(p, seed, p.victim_arch);
  rt["victim"] += seconds_since(t0);
  const Json victim_ref = art.write(seed, "victim.xfbm", serialize_model(v.victim));
  const Json test_ref = art.write(seed, "test.xfb", serialize_dataset(v.split.test));
  const AttackerPool pool =
      attacker_pool(p, seed, p.pool_size, p.alpha);
  const Granularity g = Granularity::parse(p.granularity);
  const std::vector<std::pair<std::string, std::string>> variants = {{"matched", p.surrogate_arch},
                                                                     {"mismatched", p.mismatch_arch}};
  for (const auto& [variant, arch] : variants) {
    t0 = std::chrono::steady_clock::now();
    const Extraction e =
        extract(p, v, pool, g, arch, parse_target_mode(p.targets), BalancingPolicy::parse(p.balance), p.budget, seed);
    const Json s_ref = art.write(seed, "surrogate-" + variant + ".xfbm", serialize_model(e.surrogate));
    Json r = extraction_record(seed, variant, v, e, victim_ref, test_ref, s_ref);
    r["surrogate_arch"] = resolve_arch(arch, v.spec.family.dims, p.classes).to_text();
    r["victim_arch"] = v.victim.arch.to_text();
    records.push_back(std::move(r));
    rt["extract:" + variant] += seconds_since(t0);
  }
}

void run_e4(const ScenarioParams& p, std::uint64_t seed, Artifacts& art, Json& records, Runtime& rt) {
  auto t0 = std::chrono::steady_clock::now();
  const VictimSetup v = make_victim(p, seed, p.victim_arch);
  rt["victim"] += seconds_since(t0);
  const Json victim_ref = art.write(seed, "victim.xfbm", serialize_model(v.victim));
  const Json test_ref = art.write(seed, "test.xfb", serialize_dataset(v.split.test));
  const Granularity g = Granularity::parse(p.granularity);
  const TargetMode targets = parse_target_mode(p.targets);

  // Baseline: the E1 pool.
  t0 = std::chrono::steady_clock::now();
  const AttackerPool pool =
      attacker_pool(p, seed, p.pool_size, 0.0);
  const Extraction base = extract(p, v, pool, g, p.surrogate_arch, targets, BalancingPolicy{}, p.budget, seed);
  records.push_back(extraction_record(seed, "baseline", v, base, victim_ref, test_ref,
                                      art.write(seed, "surrogate-baseline.xfbm", serialize_model(base.surrogate))));
  rt["extract:baseline"] += seconds_since(t0);

  // Low diversity: one-prototype foreign family.
  t0 = std::chrono::steady_clock::now();
  FamilyParams narrow = disjoint_family(p, seed);
  narrow.seed = sub_seed(seed, kLowDiversityTag);
  narrow.num_prototypes = 1;
  const AttackerPool narrow_pool =
      sample_pool(v.spec, narrow, p.pool_size, 0.0, sub_seed(seed, kLowDiversityTag), foreign_options(p));
  const Extraction low = extract(p, v, narrow_pool, g, p.surrogate_arch, targets, BalancingPolicy{}, p.budget, seed);
  records.push_back(extraction_record(seed, "low_diversity", v, low, victim_ref, test_ref,
                                      art.write(seed, "surrogate-low_diversity.xfbm", serialize_model(low.surrogate))));
  rt["extract:low_diversity"] += seconds_since(t0);

  // Skewed in-distribution pool, with and without oversampling. Class c gets
  // weight skew_ratio^(c / (m - 1)).
  PoolOptions skew = foreign_options(p);
  for (std::size_t c = 0; c < p.classes; ++c) {
    skew.victim_class_weights.push_back(
        std::pow(p.skew_ratio, static_cast<double>(c) / static_cast<double>(p.classes - 1)));
  }
  const AttackerPool skewed_pool = sample_pool(v.spec, disjoint_family(p, seed), p.skewed_budget, 1.0,
                                               sub_seed(seed, kSkewedPoolTag), skew);
  const TargetMode skew_targets = parse_target_mode(p.skewed_targets);
  for (const std::string policy : {"none", "oversample"}) {
    t0 = std::chrono::steady_clock::now();
    const Extraction e = extract(p, v, skewed_pool, g, p.surrogate_arch, skew_targets, BalancingPolicy::parse(policy),
                                 p.skewed_budget, seed);
    const std::string variant = "skewed_" + policy;
    records.push_back(extraction_record(seed, variant, v, e, victim_ref, test_ref,
                                        art.write(seed, "surrogate-" + variant + ".xfbm", serialize_model(e.surrogate))));
    rt["extract:" + variant] += seconds_since(t0);
  }
}

void run_e5(const ScenarioParams& p, std::uint64_t seed, Artifacts& art, Json& records, Runtime& rt) {
  auto t0 = std::chrono::steady_clock::now();
  const VictimSetup v = make_victim(p, seed, p.victim_arch);
  rt["victim"] += seconds_since(t0);
  const Json victim_ref = art.write(seed, "victim.xfbm", serialize_model(v.victim));
  const Json test_ref = art.write(seed, "test.xfb", serialize_dataset(v.split.test));

  t0 = std::chrono::steady_clock::now();
  const Model backbone = train_backbone(p, seed);
  rt["backbone"] += seconds_since(t0);
  const Json backbone_ref = art.write(seed, "backbone.xfbm", serialize_model(backbone));

  const Tensor in_train = v.split.train.raw_inputs();
  const Tensor in_test = v.split.test.raw_inputs();
  const AttackerPool out_fit = sample_pool(v.spec, disjoint_family(p, seed), p.detector_out_size, 0.0,
                                           sub_seed(seed, kDetectorOutTag), foreign_options(p));
  DetectorFitOptions fit;
  fit.target_tnr = p.target_tnr;
  fit.seed = sub_seed(seed, kDetectorFitTag);

  std::vector<AttackerPool> eval_pools;
  std::vector<Json> eval_refs;
  for (std::size_t i = 0; i < kAlphaSweep.size(); ++i) {
    eval_pools.push_back(sample_pool(v.spec, disjoint_family(p, seed), p.eval_pool_size, kAlphaSweep[i],
                                     Rng::derive(sub_seed(seed, kEvalPoolTag), i), foreign_options(p)));
    eval_refs.push_back(art.write(seed, "eval-pool-" + alpha_tag(kAlphaSweep[i]) + ".xfb", serialize_pool(eval_pools.back())));
  }

  // Binary first: comparators are also evaluated at its achieved TNR.
  std::vector<std::vector<double>> binary_tnr(1);
  double matched_tnr = 0.0;
  for (DetectorKind kind : kDetectorKinds) {
    t0 = std::chrono::steady_clock::now();
    const Model& model = kind == DetectorKind::binary ? backbone : v.victim;
    const Detector det = fit_detector(kind, model, in_train, v.split.train.labels, out_fit.inputs, fit);
    const std::string name(to_string(kind));
    const Json det_ref = art.write(seed, "detector-" + name + ".xfbd", serialize_detector(det));
    const auto in_scores = det.scores(in_test);
    const double tnr_at_calibrated = evaluate_scores(in_scores, std::vector<double>{0.0}, det.threshold).tnr;
    if (kind == DetectorKind::binary) matched_tnr = tnr_at_calibrated;
    const double matched_threshold = calibrate_threshold(in_scores, std::max(matched_tnr, 1e-9));
    for (std::size_t i = 0; i < kAlphaSweep.size(); ++i) {
      const auto out_scores = det.scores(eval_pools[i].inputs);
      const DetectionMetrics m = evaluate_scores(in_scores, out_scores, det.threshold);
      const DetectionMetrics mm = evaluate_scores(in_scores, out_scores, matched_threshold);
      Json r = detection_metrics_json(m);
      r["seed"] = seed;
      r["variant"] = name;
      r["alpha"] = kAlphaSweep[i];
      r["tpr_matched"] = mm.tpr;
      r["tnr_matched"] = mm.tnr;
      r["threshold_matched"] = matched_threshold;
      r["threshold_mode"] = det.threshold_mode;
      r["victim_accuracy"] = v.accuracy;
      if (kind == DetectorKind::binary) {
        r["lambda"] = det.binary.logistic.lambda;
        r["converged"] = det.binary.logistic.converged;
      }
      if (kind == DetectorKind::odin) {
        r["temperature"] = det.temperature;
        r["epsilon"] = det.epsilon;
      }
      if (kind == DetectorKind::mahalanobis) r["gamma"] = det.mahalanobis.gamma;
      r["artifacts"] = Json{{"victim", victim_ref},
                            {"test_data", test_ref},
                            {"detector", det_ref},
                            {"backbone", backbone_ref},
                            {"eval_pool", eval_refs[i]}};
      records.push_back(std::move(r));
    }
    rt["detector:" + name] += seconds_since(t0);
  }
}

Json aggregate(const Json& records) {
  // Group by (variant, alpha?) and summarize every scalar metric.
  static const std::vector<std::string> metrics = {"victim_accuracy", "surrogate_accuracy", "recovery",
                                                   "min_per_class_surrogate", "tpr", "tnr", "tpr_matched"};
  std::map<std::string, std::map<std::string, std::vector<double>>> groups;
  for (const auto& r : records) {
    std::string key = r["variant"].get<std::string>();
    if (r.contains("alpha")) key += "@" + alpha_tag(r["alpha"].get<double>()).substr(1);
    for (const auto& m : metrics) {
      if (r.contains(m)) groups[key][m].push_back(r[m].get<double>());
    }
  }
  Json out = Json::object();
  for (const auto& [key, values] : groups) {
    for (const auto& [metric, xs] : values) {
      const double sum = std::accumulate(xs.begin(), xs.end(), 0.0);
      out[key][metric] = Json{{"mean", sum / static_cast<double>(xs.size())},
                              {"min", *std::min_element(xs.begin(), xs.end())},
                              {"max", *std::max_element(xs.begin(), xs.end())}};
    }
  }
  return out;
}

double agg(const Json& report, const std::string& group, const std::string& metric) {
  const Json& a = report.at("aggregate");
  require(a.contains(group) && a[group].contains(metric), ErrorKind::validation,
          "report has no aggregate " + group + "/" + metric);
  return a[group][metric]["mean"].get<double>();
}

Json check(const std::string& name, bool pass, Json values) {
  return Json{{"name", name}, {"pass", pass}, {"values", std::move(values)}};
}

std::string csv_cell(const Json& v) {
  if (v.is_string()) {
    std::string s = v.get<std::string>();
    if (s.find_first_of(",\"\n") != std::string::npos) {
      std::string q = "\"";
      for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
      return q + "\"";
    }
    return s;
  }
  if (v.is_array()) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ";") + csv_cell(x);
    return s;
  }
  return canonical_json(v);
}

}  // namespace

double recovery_ratio(double acc_surrogate, double acc_victim) {
  require(std::isfinite(acc_victim) && acc_victim > 0.0, ErrorKind::validation,
          "victim accuracy must be positive to compute a recovery ratio");
  return acc_surrogate / acc_victim;
}

double round2(double value) { return std::round(value * 100.0) / 100.0; }

std::vector<double> per_class_accuracy(const Model& model, const Tensor& inputs, std::span<const std::size_t> labels,
                                       std::size_t classes) {
  require(inputs.rows() == labels.size(), ErrorKind::dimension, "one label per input row required");
  std::vector<std::size_t> total(classes, 0);
  std::vector<std::size_t> correct(classes, 0);
  const auto predicted = predict_labels(model, inputs);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < classes, ErrorKind::validation, "label out of range");
    ++total[labels[i]];
    if (predicted[i] == labels[i]) ++correct[labels[i]];
  }
  std::string missing;
  for (std::size_t c = 0; c < classes; ++c) {
    if (total[c] == 0) missing += (missing.empty() ? "" : ", ") + std::to_string(c);
  }
  require(missing.empty(), ErrorKind::validation, "classes with no samples: " + missing);
  std::vector<double> out(classes);
  for (std::size_t c = 0; c < classes; ++c) out[c] = static_cast<double>(correct[c]) / static_cast<double>(total[c]);
  return out;
}

// ---- parameters ---------------------------------------------------------------------

namespace {

struct ParamField {
  const char* key;
  std::function<void(ScenarioParams&, const std::string&, const std::string&)> set;
  std::function<Json(const ScenarioParams&)> get;
};

#define XFB_COUNT(name) \
  {#name, [](ScenarioParams& p, const std::string& k, const std::string& v) { p.name = to_count(k, v); }, \
   [](const ScenarioParams& p) { return Json(p.name); }}
#define XFB_REAL(name) \
  {#name, [](ScenarioParams& p, const std::string& k, const std::string& v) { p.name = to_real(k, v); }, \
   [](const ScenarioParams& p) { return Json(p.name); }}
#define XFB_TEXT(name) \
  {#name, [](ScenarioParams& p, const std::string&, const std::string& v) { p.name = v; }, \
   [](const ScenarioParams& p) { return Json(p.name); }}

const std::vector<ParamField>& param_fields() {
  static const std::vector<ParamField> fields = {
      XFB_COUNT(classes),        XFB_COUNT(samples_per_class), XFB_REAL(noise_sigma),
      XFB_COUNT(jitter),         XFB_REAL(smoothness),         XFB_REAL(shared_weight),
      XFB_TEXT(victim_arch),     XFB_COUNT(victim_epochs),     XFB_COUNT(pool_size),
      XFB_REAL(alpha),           XFB_COUNT(foreign_prototypes), XFB_REAL(foreign_noise),
      XFB_COUNT(budget),         XFB_COUNT(concurrency),       XFB_TEXT(granularity),
      XFB_TEXT(surrogate_arch),  XFB_COUNT(surrogate_epochs),  XFB_TEXT(targets),
      XFB_TEXT(balance),         XFB_TEXT(mismatch_arch),      XFB_COUNT(skewed_budget),
      XFB_REAL(skew_ratio),      XFB_TEXT(skewed_targets),     XFB_COUNT(backbone_families),
      XFB_COUNT(backbone_prototypes), XFB_COUNT(backbone_samples), XFB_COUNT(backbone_epochs),
      XFB_COUNT(detector_out_size), XFB_COUNT(eval_pool_size), XFB_REAL(target_tnr),
      XFB_REAL(slack),
  };
  return fields;
}

#undef XFB_COUNT
#undef XFB_REAL
#undef XFB_TEXT

void validate_params(const ScenarioParams& p) {
  require(p.classes >= 2, ErrorKind::validation, "classes must be at least 2");
  require(p.alpha >= 0.0 && p.alpha <= 1.0, ErrorKind::validation, "alpha must be in [0, 1]");
  require(p.budget >= 1, ErrorKind::validation, "budget must be at least 1");
  require(p.budget <= p.pool_size, ErrorKind::validation, "budget exceeds the pool size");
  require(p.concurrency >= 1, ErrorKind::validation, "concurrency must be at least 1");
  require(p.victim_epochs >= 1 && p.surrogate_epochs >= 1, ErrorKind::validation, "epochs must be at least 1");
  require(p.skew_ratio > 0.0 && p.skew_ratio <= 1.0, ErrorKind::validation, "skew_ratio must be in (0, 1]");
  require(p.target_tnr > 0.0 && p.target_tnr < 1.0, ErrorKind::validation, "target_tnr must be in (0, 1)");
  require(p.slack >= 0.0, ErrorKind::validation, "slack must be >= 0");
  Granularity::parse(p.granularity);
  parse_target_mode(p.targets);
  parse_target_mode(p.skewed_targets);
  BalancingPolicy::parse(p.balance);
  const Dims dims{16, 16, 1};
  resolve_arch(p.victim_arch, dims, p.classes);
  resolve_arch(p.surrogate_arch, dims, p.classes);
  resolve_arch(p.mismatch_arch, dims, p.classes);
}

}  // namespace

void ScenarioParams::apply_override(const std::string& key, const std::string& value) {
  for (const auto& f : param_fields()) {
    if (key == f.key) {
      f.set(*this, key, value);
      return;
    }
  }
  fail(ErrorKind::validation, "unknown override key '" + key + "'");
}

Json ScenarioParams::to_json() const {
  Json j = Json::object();
  for (const auto& f : param_fields()) j[f.key] = f.get(*this);
  return j;
}

std::vector<std::string> ScenarioParams::keys() {
  std::vector<std::string> out;
  for (const auto& f : param_fields()) out.emplace_back(f.key);
  return out;
}

ScenarioParams scenario_defaults(const std::string& scenario) {
  ScenarioParams p;
  if (scenario == "E3") {
    p.victim_arch = "cnn";
    p.surrogate_arch = "cnn";
    p.mismatch_arch = "mlp";
    p.budget = 3000;
  }
  return p;
}

void ExperimentSpec::validate() const {
  static const std::set<std::string> known = {"E1", "E2", "E3", "E4", "E5"};
  require(known.count(scenario) == 1, ErrorKind::validation, "unknown scenario '" + scenario + "' (expected E1..E5)");
  require(!seeds.empty(), ErrorKind::validation, "at least one seed is required");
  require(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(), ErrorKind::validation,
          "seeds must be distinct");
  require(!output.empty(), ErrorKind::validation, "an output path is required");
  ScenarioParams p = scenario_defaults(scenario);
  for (const auto& [k, v] : overrides) p.apply_override(k, v);
  validate_params(p);
  if (scenario == "E2") {
    require(p.classes >= 3, ErrorKind::validation, "E2 needs at least 3 classes for topk:3");
  }
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  ScenarioParams p = scenario_defaults(spec.scenario);
  for (const auto& [k, v] : spec.overrides) p.apply_override(k, v);

  const fs::path report_path = fs::absolute(spec.output);
  const fs::path report_dir = report_path.parent_path();
  fs::path stem = report_path;
  stem.replace_extension();
  const fs::path artifact_root = stem.string() + ".artifacts";
  Artifacts art(report_dir, artifact_root);

  Json records = Json::array();
  Json runtime = Json::object();
  const auto start = std::chrono::steady_clock::now();
  for (std::uint64_t seed : spec.seeds) {
    Runtime rt;
    const auto seed_start = std::chrono::steady_clock::now();
    if (spec.scenario == "E1") run_e1_e2(p, false, seed, art, records, rt);
    if (spec.scenario == "E2") run_e1_e2(p, true, seed, art, records, rt);
    if (spec.scenario == "E3") run_e3(p, seed, art, records, rt);
    if (spec.scenario == "E4") run_e4(p, seed, art, records, rt);
    if (spec.scenario == "E5") run_e5(p, seed, art, records, rt);
    rt["total"] = seconds_since(seed_start);
    runtime["seed-" + std::to_string(seed)] = rt;
  }
  runtime["total"] = seconds_since(start);

  Json report;
  report["format"] = "xfb-experiment-report";
  report["format_version"] = 1;
  report["scenario"] = spec.scenario;
  Json seeds = Json::array();
  for (auto s : spec.seeds) seeds.push_back(s);
  report["seeds"] = seeds;
  Json overrides = Json::object();
  for (const auto& [k, v] : spec.overrides) overrides[k] = v;
  report["overrides"] = overrides;
  report["params"] = p.to_json();
  report["records"] = records;
  report["aggregate"] = aggregate(records);
  report["checks"] = scenario_checks(report);
  report["notes"] = Json::array({"alpha is the fraction of attacker-pool samples drawn from the victim's generator; "
                                 "it stands in for label overlap between attacker and victim data.",
                                 "top-k soft targets spread the unlisted probability mass uniformly over the "
                                 "unlisted classes; rounded responses are renormalized before training."});

  ExperimentResult result;
  result.report = report;
  result.runtime = runtime;
  write_file(report_path.string(), canonical_json_pretty(report));
  result.files.push_back(report_path.string());
  const std::string base = stem.string();
  write_file(base + ".records.csv", records_csv(report));
  write_file(base + ".histogram.csv", histogram_csv(report));
  write_file(base + ".sweep.csv", sweep_csv(report));
  write_file(base + ".runtime.json", canonical_json_pretty(runtime));
  for (const char* suffix : {".records.csv", ".histogram.csv", ".sweep.csv", ".runtime.json"}) {
    result.files.push_back(base + suffix);
  }
  for (const auto& f : art.files()) result.files.push_back(f);
  return result;
}

Json scenario_checks(const Json& report) {
  const std::string scenario = report.at("scenario").get<std::string>();
  const double slack = report.at("params").at("slack").get<double>();
  Json checks = Json::array();
  if (scenario == "E1") {
    const double rec = agg(report, report["params"]["granularity"].get<std::string>(), "recovery");
    const double victim_min = report["aggregate"][report["params"]["granularity"].get<std::string>()]["victim_accuracy"]["min"].get<double>();
    checks.push_back(check("mean recovery >= 0.85", rec >= 0.85, Json{{"recovery", rec}}));
    checks.push_back(check("victim accuracy >= 0.90 on every seed", victim_min >= 0.90, Json{{"min", victim_min}}));
  } else if (scenario == "E2") {
    const double full = agg(report, "full", "recovery");
    const double topk = agg(report, "topk:3", "recovery");
    const double rounded = agg(report, "rounded:2", "recovery");
    const double label = agg(report, "label", "recovery");
    Json vals{{"full", full}, {"topk:3", topk}, {"rounded:2", rounded}, {"label", label}, {"slack", slack}};
    checks.push_back(check("full >= topk:3 - slack", full >= topk - slack, vals));
    checks.push_back(check("topk:3 >= rounded:2 - slack", topk >= rounded - slack, vals));
    checks.push_back(check("rounded:2 >= label - slack", rounded >= label - slack, vals));
    checks.push_back(check("label <= full - 0.05", label <= full - 0.05, vals));
  } else if (scenario == "E3") {
    const double matched = agg(report, "matched", "recovery");
    const double mismatched = agg(report, "mismatched", "recovery");
    checks.push_back(check("matched - mismatched >= 0.10", matched - mismatched >= 0.10,
                           Json{{"matched", matched}, {"mismatched", mismatched}}));
  } else if (scenario == "E4") {
    const double base = agg(report, "baseline", "recovery");
    const double low = agg(report, "low_diversity", "recovery");
    const double none = agg(report, "skewed_none", "min_per_class_surrogate");
    const double over = agg(report, "skewed_oversample", "min_per_class_surrogate");
    checks.push_back(check("low_diversity <= 0.5 * baseline", low <= 0.5 * base,
                           Json{{"baseline", base}, {"low_diversity", low}}));
    checks.push_back(check("oversample improves min per-class accuracy by > 0.02", over - none > 0.02,
                           Json{{"none", none}, {"oversample", over}}));
  } else if (scenario == "E5") {
    const double tpr0 = agg(report, "binary@0.00", "tpr");
    const double tnr0 = agg(report, "binary@0.00", "tnr");
    const double tpr1 = agg(report, "binary@1.00", "tpr");
    checks.push_back(check("alpha=0: binary TPR >= 0.90", tpr0 >= 0.90, Json{{"tpr", tpr0}}));
    checks.push_back(check("alpha=0: binary TNR >= 0.93", tnr0 >= 0.93, Json{{"tnr", tnr0}}));
    for (const std::string kind : {"msp", "odin", "mahalanobis"}) {
      const double other = agg(report, kind + "@0.00", "tpr_matched");
      checks.push_back(check("alpha=0: binary TPR >= " + kind + " TPR at matched TNR", tpr0 >= other,
                             Json{{"binary", tpr0}, {kind, other}}));
    }
    checks.push_back(check("alpha=1: binary TPR <= 0.60", tpr1 <= 0.60, Json{{"tpr", tpr1}}));
    Json curve = Json::array();
    bool monotone = true;
    double prev = 0.0;
    for (std::size_t i = 0; i < kAlphaSweep.size(); ++i) {
      const double t = agg(report, "binary@" + alpha_tag(kAlphaSweep[i]).substr(1), "tpr");
      curve.push_back(t);
      if (i > 0 && t > prev + 0.05) monotone = false;
      prev = t;
    }
    checks.push_back(check("binary TPR non-increasing in alpha within 0.05", monotone, Json{{"tpr", curve}}));
  }
  return checks;
}

// ---- CSV -------------------------------------------------------------------------------

std::string records_csv(const Json& report) {
  std::set<std::string> columns;
  for (const auto& r : report["records"]) {
    for (auto it = r.begin(); it != r.end(); ++it) {
      if (!it.value().is_object()) columns.insert(it.key());
    }
  }
  std::vector<std::string> cols(columns.begin(), columns.end());
  std::ostringstream out;
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : report["records"]) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      out << (i ? "," : "");
      if (r.contains(cols[i])) out << csv_cell(r[cols[i]]);
    }
    out << '\n';
  }
  return out.str();
}

std::string histogram_csv(const Json& report) {
  std::ostringstream out;
  out << "seed,variant,class,count\n";
  for (const auto& r : report["records"]) {
    if (!r.contains("histogram")) continue;
    for (std::size_t c = 0; c < r["histogram"].size(); ++c) {
      out << r["seed"].get<std::uint64_t>() << ',' << csv_cell(r["variant"]) << ',' << c << ','
          << r["histogram"][c].get<std::size_t>() << '\n';
    }
  }
  return out.str();
}

std::string sweep_csv(const Json& report) {
  std::ostringstream out;
  if (report["scenario"] == "E5") {
    out << "seed,detector,alpha,tpr,tnr,tpr_matched\n";
    for (const auto& r : report["records"]) {
      out << r["seed"].get<std::uint64_t>() << ',' << csv_cell(r["variant"]) << ',' << csv_cell(r["alpha"]) << ','
          << csv_cell(r["tpr"]) << ',' << csv_cell(r["tnr"]) << ',' << csv_cell(r["tpr_matched"]) << '\n';
    }
  } else {
    out << "seed,variant,recovery,surrogate_accuracy,victim_accuracy\n";
    for (const auto& r : report["records"]) {
      out << r["seed"].get<std::uint64_t>() << ',' << csv_cell(r["variant"]) << ',' << csv_cell(r["recovery"]) << ','
          << csv_cell(r["surrogate_accuracy"]) << ',' << csv_cell(r["victim_accuracy"]) << '\n';
    }
  }
  return out.str();
}

// ---- verification -------------------------------------------------------------------------

Json verify_report(const std::string& report_path, std::size_t seed_index) {
  const Json report = Json::parse(read_file(report_path));
  require(report.value("format", "") == "xfb-experiment-report", ErrorKind::format, "not an experiment report");
  const auto& seeds = report.at("seeds");
  require(seed_index < seeds.size(), ErrorKind::validation, "seed index out of range");
  const std::uint64_t seed = seeds[seed_index].get<std::uint64_t>();
  const fs::path dir = fs::absolute(report_path).parent_path();

  std::map<std::string, std::string> cache;
  auto load = [&](const Json& ref) -> const std::string& {
    const std::string path = (dir / ref.at("path").get<std::string>()).string();
    auto it = cache.find(path);
    if (it != cache.end()) return it->second;
    std::string bytes = read_file(path);
    require(sha256_hex(bytes) == ref.at("sha256").get<std::string>(), ErrorKind::validation,
            "artifact digest mismatch: " + path);
    return cache.emplace(path, std::move(bytes)).first->second;
  };

  Json checks = Json::array();
  bool ok = true;
  auto compare = [&](const std::string& what, double stored, double recomputed) {
    const bool same = stored == recomputed;
    ok = ok && same;
    checks.push_back(Json{{"value", what}, {"stored", stored}, {"recomputed", recomputed}, {"identical", same}});
  };

  const ScenarioParams p = [&] {
    ScenarioParams q = scenario_defaults(report["scenario"].get<std::string>());
    for (auto it = report["overrides"].begin(); it != report["overrides"].end(); ++it) {
      q.apply_override(it.key(), it.value().get<std::string>());
    }
    return q;
  }();

  for (const auto& r : report.at("records")) {
    if (r["seed"].get<std::uint64_t>() != seed) continue;
    const auto& a = r.at("artifacts");
    const Model victim = deserialize_model(load(a.at("victim")));
    const LabeledDataset test = deserialize_dataset(load(a.at("test_data")));
    const std::string tag = r["variant"].get<std::string>() +
                            (r.contains("alpha") ? "@" + alpha_tag(r["alpha"].get<double>()).substr(1) : "");
    compare(tag + " victim_accuracy", r["victim_accuracy"].get<double>(), accuracy(victim, test.inputs, test.labels));
    if (a.contains("surrogate")) {
      const Model s = deserialize_model(load(a.at("surrogate")));
      const Tensor x = s.normalization.apply(test.raw_inputs());
      const double acc = accuracy(s, x, test.labels);
      compare(tag + " surrogate_accuracy", r["surrogate_accuracy"].get<double>(), acc);
      compare(tag + " recovery", r["recovery"].get<double>(),
              recovery_ratio(acc, accuracy(victim, test.inputs, test.labels)));
      const auto pc = per_class_accuracy(s, x, test.labels, p.classes);
      compare(tag + " min_per_class_surrogate", r["min_per_class_surrogate"].get<double>(),
              *std::min_element(pc.begin(), pc.end()));
    }
    if (a.contains("detector")) {
      const Detector det = deserialize_detector(load(a.at("detector")));
      const AttackerPool pool = deserialize_pool(load(a.at("eval_pool")));
      const DetectionMetrics m = evaluate(det, test.raw_inputs(), pool.inputs);
      compare(tag + " tpr", r["tpr"].get<double>(), m.tpr);
      compare(tag + " tnr", r["tnr"].get<double>(), m.tnr);
      compare(tag + " threshold", r["threshold"].get<double>(), det.threshold);
    }
  }
  require(!checks.empty(), ErrorKind::validation, "no records for the chosen seed");
  return Json{{"ok", ok}, {"seed", seed}, {"checks", checks}};
}

}  // namespace xfb
