// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Usage: xfb_acceptance [--workdir DIR] [--only 1,2,...]

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "xfb/arch.hpp"
#include "xfb/detectors.hpp"
#include "xfb/error.hpp"
#include "xfb/experiments.hpp"
#include "xfb/extractor.hpp"
#include "xfb/io.hpp"
#include "xfb/nn.hpp"
#include "xfb/service.hpp"

// After the library headers: resolv.h defines _res, which breaks Eigen.
#include <httplib.h>

namespace fs = std::filesystem;
using namespace xfb;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double rel_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

Json load_json(const std::string& path) { return Json::parse(read_file(path)); }

// ---- 1 ------------------------------------------------------------------------

ArchitectureSpec random_arch(Rng& rng, bool cnn) {
  std::ostringstream s;
  const auto pick = [&](std::size_t lo, std::size_t hi) { return lo + static_cast<std::size_t>(rng.below(hi - lo + 1)); };
  if (cnn) {
    const std::size_t side = pick(3, 5), ch = pick(1, 2);
    s << "family=cnn input=" << side << "x" << side << "x" << ch << " hidden=conv:" << pick(1, 3) << ":"
      << (rng.below(2) == 0 ? 1 : 3);
    if (rng.below(2) == 0) s << ",conv:" << pick(1, 3) << ":3";
    s << ",dense:" << pick(2, 5);
  } else {
    s << "family=mlp input=1x1x" << pick(2, 8) << " hidden=dense:" << pick(2, 6);
    if (rng.below(2) == 0) s << ",dense:" << pick(2, 6);
  }
  s << " classes=" << pick(2, 5);
  return ArchitectureSpec::parse(s.str());
}

Outcome gradients() {
  const auto t0 = Clock::now();
  Rng rng(2026);
  double worst = 0.0;
  std::size_t compared = 0;
  for (int instance = 0; instance < 20; ++instance) {
    const ArchitectureSpec arch = random_arch(rng, instance % 2 == 1);
    Model m = Model::zeros(arch);
    for (double& p : m.params) p = 0.5 * rng.normal();
    const std::size_t n = arch.input.size(), k = arch.classes;
    Tensor x({2, n});
    for (double& v : x.values()) v = rng.normal();
    Tensor t({2, k});
    for (std::size_t r = 0; r < 2; ++r) {
      double sum = 0.0;
      for (double& v : t.row(r)) sum += (v = rng.uniform() + 0.05);
      for (double& v : t.row(r)) v /= sum;
    }
    const LossGradient g = grad_params(m, x, t);
    const double h = 1e-5;
    for (std::size_t p = 0; p < m.params.size(); ++p) {
      const double saved = m.params[p];
      m.params[p] = saved + h;
      const double up = loss_soft_ce(forward(m, x), t);
      m.params[p] = saved - h;
      const double down = loss_soft_ce(forward(m, x), t);
      m.params[p] = saved;
      const double fd = (up - down) / (2 * h);
      if (std::abs(fd) < 1e-7 && std::abs(g.grad[p]) < 1e-7) continue;
      worst = std::max(worst, rel_error(g.grad[p], fd));
      ++compared;
    }
    const std::size_t target = static_cast<std::size_t>(rng.below(k));
    const auto gi = grad_input(m, x.row(0), OutputSelector::index(target));
    std::vector<double> xv(x.row(0).begin(), x.row(0).end());
    const auto logp = [&](const std::vector<double>& v) {
      return std::log(softmax(forward(m, Tensor({1, v.size()}, v)).row(0))[target]);
    };
    for (std::size_t j = 0; j < n; ++j) {
      const double saved = xv[j];
      xv[j] = saved + h;
      const double up = logp(xv);
      xv[j] = saved - h;
      const double down = logp(xv);
      xv[j] = saved;
      const double fd = (up - down) / (2 * h);
      if (std::abs(fd) < 1e-7 && std::abs(gi[j]) < 1e-7) continue;
      worst = std::max(worst, rel_error(gi[j], fd));
      ++compared;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 30.0, "20 instances, " + std::to_string(compared) + " gradient entries, max rel error " +
                                           fmt(worst) + ", " + fmt(secs) + " s"};
}

// ---- 2 ------------------------------------------------------------------------

Outcome identities() {
  Rng rng(7);
  bool odin_ok = true;
  double maha_worst = 0.0, ce_worst = 0.0;
  const auto arch = ArchitectureSpec::parse("family=mlp input=1x6x1 hidden=dense:7 classes=4");
  for (int trial = 0; trial < 200; ++trial) {
    Model m = Model::zeros(arch);
    for (double& p : m.params) p = rng.normal();
    std::vector<double> x(6);
    for (double& v : x) v = rng.normal();
    const std::vector<double> lo(6, -3.0), hi(6, 3.0);
    odin_ok = odin_ok && score_odin(m, x, 1.0, 0.0, lo, hi) == score_msp(m, x);

    MahalanobisParams p;
    p.means = Eigen::MatrixXd(3, 5);
    for (Eigen::Index i = 0; i < p.means.size(); ++i) p.means.data()[i] = 2.0 * rng.normal();
    p.covariance = Eigen::MatrixXd::Identity(5, 5);
    p.factorize();
    std::vector<double> f(5);
    for (double& v : f) v = 3.0 * rng.normal();
    double best = INFINITY;
    for (Eigen::Index c = 0; c < 3; ++c) {
      double d = 0.0;
      for (Eigen::Index j = 0; j < 5; ++j) d += (f[j] - p.means(c, j)) * (f[j] - p.means(c, j));
      best = std::min(best, d);
    }
    maha_worst = std::max(maha_worst, std::abs(p.score(f) - best) / std::max(1.0, best));

    Tensor logits({1, 5});
    for (double& v : logits.values()) v = 4.0 * rng.normal();
    const std::size_t cls = static_cast<std::size_t>(rng.below(5));
    Tensor onehot({1, 5});
    onehot.at(0, cls) = 1.0;
    ce_worst = std::max(ce_worst, std::abs(loss_soft_ce(logits, onehot) + std::log(softmax(logits.row(0))[cls])));
  }
  return {odin_ok && maha_worst <= 1e-12 && ce_worst <= 1e-12,
          std::string("ODIN(T=1,eps=0)==MSP bitwise: ") + (odin_ok ? "yes" : "no") + ", Mahalanobis(I) vs Euclidean " +
              fmt(maha_worst) + ", one-hot CE vs -log p " + fmt(ce_worst)};
}

// ---- 3 ------------------------------------------------------------------------

Outcome oracles() {
  const Json cases = load_json(std::string(XFB_FIXTURE_DIR) + "/oracle_cases.json");
  const Json expected = load_json(std::string(XFB_FIXTURE_DIR) + "/oracle_expected.json");
  const auto doubles = [](const Json& j) { return j.get<std::vector<double>>(); };
  double worst = 0.0;
  bool exact = true;

  {
    const Json& c = cases["mahalanobis"];
    const std::size_t d = c["dim"];
    const auto feats = doubles(c["features"]);
    const auto p = fit_mahalanobis(Tensor({feats.size() / d, d}, feats), c["labels"].get<std::vector<std::size_t>>(),
                                   c["classes"], c["gamma"].get<double>());
    const auto q = doubles(c["queries"]);
    const auto s = doubles(expected["mahalanobis"]["scores"]);
    for (std::size_t i = 0; i < s.size(); ++i) {
      worst = std::max(worst, rel_error(p.score(std::span<const double>(q.data() + i * d, d)), s[i]));
    }
  }
  {
    const Json& c = cases["logistic_cv"];
    const Json& e = expected["logistic_cv"];
    const std::size_t d = c["dim"];
    const auto zf = doubles(c["z"]);
    Eigen::MatrixXd z(zf.size() / d, d);
    for (Eigen::Index r = 0; r < z.rows(); ++r)
      for (Eigen::Index j = 0; j < z.cols(); ++j) z(r, j) = zf[static_cast<std::size_t>(r) * d + j];
    LogisticOptions opt;
    opt.tolerance = 1e-12;
    const auto cv = cross_validate_folds(z, c["y"].get<std::vector<int>>(), doubles(c["lambdas"]),
                                         c["folds"].get<std::vector<std::size_t>>(), opt);
    const auto acc = doubles(e["mean_accuracy"]);
    for (std::size_t i = 0; i < acc.size(); ++i) worst = std::max(worst, std::abs(cv.mean_accuracy[i] - acc[i]));
    exact = exact && cv.chosen_lambda == e["chosen_lambda"].get<double>();
    const auto m = fit_logistic(z, c["y"].get<std::vector<int>>(), cv.chosen_lambda, opt);
    const auto w = doubles(e["weights"]);
    for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(m.weights[j] - w[j]));
    worst = std::max(worst, std::abs(m.bias - e["bias"].get<double>()));
  }
  {
    const Json& c = cases["odin"];
    Model m = Model::zeros(ArchitectureSpec::parse("family=mlp input=1x5x1 hidden=dense:6 classes=4"));
    m.params.clear();
    for (const char* key : {"w1", "b1", "w2", "b2"}) {
      const auto v = doubles(c[key]);
      m.params.insert(m.params.end(), v.begin(), v.end());
    }
    const auto x = doubles(c["inputs"]);
    const auto settings = c["settings"].get<std::vector<std::vector<double>>>();
    const auto s = expected["odin"]["scores"].get<std::vector<std::vector<double>>>();
    const std::vector<double> lo(5, c["lower"].get<double>()), hi(5, c["upper"].get<double>());
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t k = 0; k < settings.size(); ++k)
        worst = std::max(worst, std::abs(score_odin(m, std::span<const double>(x.data() + i * 5, 5), settings[k][0],
                                                     settings[k][1], lo, hi) -
                                         s[i][k]));
  }
  {
    const Json& c = cases["thresholds"];
    const Json& e = expected["thresholds"];
    const auto in = doubles(c["in_scores"]), out = doubles(c["out_scores"]), targets = doubles(c["targets"]);
    const auto cal = doubles(e["calibrated"]);
    for (std::size_t i = 0; i < targets.size(); ++i) exact = exact && calibrate_threshold(in, targets[i]) == cal[i];
    for (const Json& row : e["counts"]) {
      const auto m = evaluate_scores(in, out, row["threshold"].get<double>());
      exact = exact && m.in_passed == row["in_passed"].get<std::size_t>() &&
              m.out_flagged == row["out_flagged"].get<std::size_t>();
    }
  }
  return {worst <= 1e-9 && exact, "max deviation " + fmt(worst) + ", lambda choice, thresholds and counts " +
                                      (exact ? "exact" : "DIFFER")};
}

// ---- 4..8 ---------------------------------------------------------------------

struct ScenarioRun {
  Json report;
  double seconds = 0.0;
  std::string path;
};

// A rerun goes to a subdirectory under the same name: reports hold paths relative to themselves.
ScenarioRun run_scenario(const std::string& workdir, const std::string& scenario, const std::string& subdir = "") {
  const std::string dir = subdir.empty() ? workdir : workdir + "/" + subdir;
  std::filesystem::create_directories(dir);
  ExperimentSpec spec;
  spec.scenario = scenario;
  spec.seeds = {1, 2, 3};
  spec.output = dir + "/" + scenario + ".json";
  const auto t0 = Clock::now();
  ScenarioRun r;
  r.report = run_experiment(spec).report;
  r.seconds = seconds_since(t0);
  r.path = spec.output;
  return r;
}

Outcome checks_outcome(const ScenarioRun& run, const std::string& extra = "") {
  bool all = true;
  std::ostringstream s;
  for (const Json& c : run.report["checks"]) {
    const bool ok = c["pass"].get<bool>();
    all = all && ok;
    s << (ok ? "" : "NOT ") << c["name"].get<std::string>() << " " << canonical_json(c["values"]) << "; ";
  }
  s << fmt(run.seconds) << " s" << extra;
  return {all, s.str()};
}

// ---- 9 ------------------------------------------------------------------------

Outcome wire(const std::string& workdir) {
  ScenarioParams p;
  const DatasetSplit split = sample_dataset(victim_task(p, 11));
  const ArchitectureSpec arch = resolve_arch("mlp", split.train.dims, split.train.classes);
  const Model victim = train_victim(split.train, arch, default_victim_training(arch, 3, 12), 13);
  const AttackerPool pool = attacker_pool(p, 11, 2000, 0.25);

  bool equal = true;
  std::size_t compared = 0;
  for (const auto& g : {Granularity::full(), Granularity::topk(3), Granularity::rounded(2), Granularity::label()}) {
    const PredictionService svc(victim, g);
    ServiceConfig cfg;
    cfg.port = 0;
    HttpServer server(svc, cfg);
    const int port = server.start();
    LocalTarget local(svc);
    HttpTarget remote("http://127.0.0.1:" + std::to_string(port));
    const TransferSet a = build_transfer_set(local, pool, 1000, 5, 1);
    const TransferSet b = build_transfer_set(remote, pool, 1000, 5, 8);
    equal = equal && a.inputs == b.inputs && a.responses == b.responses && a.pool_indices == b.pool_indices;
    compared += b.accepted();
  }

  // Hammer: 64 clients, 10000 requests, every answer logged once with dense ids.
  const std::string log_path = workdir + "/hammer.jsonl";
  fs::remove(log_path);
  auto log = std::make_shared<QueryLog>(log_path);
  const PredictionService svc(victim, Granularity::full(), std::nullopt, DetectorAction::log, log);
  ServiceConfig cfg;
  cfg.port = 0;
  cfg.threads = 16;
  HttpServer server(svc, cfg);
  const int port = server.start();
  constexpr std::size_t kClients = 64, kRequests = 10000;
  std::atomic<std::size_t> next{0}, ok{0};
  std::mutex err_mu;
  std::map<std::string, std::size_t> errors;
  std::vector<std::thread> clients;
  for (std::size_t c = 0; c < kClients; ++c) {
    clients.emplace_back([&] {
      httplib::Client cli("127.0.0.1", port);
      cli.set_keep_alive(true);
      cli.set_read_timeout(60, 0);
      for (std::size_t i = next++; i < kRequests; i = next++) {
        const auto row = pool.inputs.row(i % pool.size());
        const auto res = cli.Post("/v1/predict", canonical_json(Json{{"input", json_array(row)}}), "application/json");
        if (res && res->status == 200) {
          ++ok;
        } else {
          const std::string why = res ? "status " + std::to_string(res->status) : httplib::to_string(res.error());
          const std::lock_guard<std::mutex> lock(err_mu);
          ++errors[why];
        }
      }
    });
  }
  for (auto& t : clients) t.join();
  server.stop();

  const auto entries = log->entries();
  bool dense = entries.size() == kRequests;
  for (std::size_t i = 0; dense && i < entries.size(); ++i) dense = entries[i].id == i;
  std::ifstream in(log_path);
  std::string line;
  std::size_t lines = 0;
  bool monotone = true;
  std::int64_t last = -1;
  while (std::getline(in, line)) {
    const auto id = Json::parse(line)["id"].get<std::int64_t>();
    monotone = monotone && id == last + 1;
    last = id;
    ++lines;
  }
  const bool pass = equal && ok == kRequests && dense && monotone && lines == kRequests;
  std::string failures;
  for (const auto& [why, n] : errors) failures += ", " + std::to_string(n) + " x " + why;
  return {pass, "HTTP vs in-process over 4 granularities (" + std::to_string(compared) + " responses): " +
                    (equal ? "identical" : "DIFFERENT") + "; hammer " + std::to_string(ok.load()) + "/" +
                    std::to_string(kRequests) + " ok, " + std::to_string(entries.size()) + " log entries, " +
                    std::to_string(lines) + " file lines, ids " + (dense && monotone ? "dense and increasing" : "BROKEN") + failures};
}

}  // namespace

int main(int argc, char** argv) {
  std::string workdir = "acceptance-work";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      workdir = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string part;
      while (std::getline(ss, part, ',')) only.insert(std::stoi(part));
    } else {
      std::cerr << "usage: xfb_acceptance [--workdir DIR] [--only 1,2,...]\n";
      return 2;
    }
  }
  fs::remove_all(workdir);
  fs::create_directories(workdir);
  const auto wanted = [&](int n) { return only.empty() || only.count(n) == 1; };

  static const char* kTitles[] = {"",
                                  "gradient correctness",
                                  "reduction identities",
                                  "oracle equivalence",
                                  "E1 baseline extraction",
                                  "E2 response granularity",
                                  "E3 architecture mismatch",
                                  "E4 transfer-set quality",
                                  "E5 detection vs overlap",
                                  "wire fidelity and concurrency",
                                  "determinism"};
  Json summary = Json::array();
  bool all = true;
  ScenarioRun e1;
  const auto report = [&](int n, const std::function<Outcome()>& body) {
    if (!wanted(n)) return;
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << "  " << kTitles[n] << "  (" << o.detail
              << ")" << std::endl;
    summary.push_back(Json{{"criterion", n}, {"title", kTitles[n]}, {"pass", o.pass}, {"detail", o.detail}});
  };

  report(1, gradients);
  report(2, identities);
  report(3, oracles);
  report(4, [&] {
    e1 = run_scenario(workdir, "E1");
    Outcome o = checks_outcome(e1);
    if (e1.seconds >= 600.0) o.pass = false;
    return o;
  });
  report(5, [&] { return checks_outcome(run_scenario(workdir, "E2")); });
  report(6, [&] { return checks_outcome(run_scenario(workdir, "E3")); });
  report(7, [&] { return checks_outcome(run_scenario(workdir, "E4")); });
  report(8, [&] { return checks_outcome(run_scenario(workdir, "E5")); });
  report(9, [&] { return wire(workdir); });
  report(10, [&] {
    if (e1.path.empty()) e1 = run_scenario(workdir, "E1");
    const ScenarioRun again = run_scenario(workdir, "E1", "repeat");
    const bool same = read_file(e1.path) == read_file(again.path);
    const bool canon = canonical_json(e1.report) == canonical_json(again.report);
    return Outcome{same && canon, std::string("E1 rerun with seeds 1,2,3: report bytes ") +
                                      (same ? "identical" : "DIFFER") + ", sha256 " +
                                      sha256_hex(read_file(again.path)).substr(0, 16)};
  });

  write_file(workdir + "/acceptance.json", canonical_json_pretty(summary));
  std::cout << (all ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL") << std::endl;
  return all ? 0 : 1;
}
