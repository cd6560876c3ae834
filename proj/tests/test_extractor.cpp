#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "xfb/arch.hpp"
#include "xfb/error.hpp"
#include "xfb/extractor.hpp"
#include "xfb/nn.hpp"

using namespace xfb;

namespace {

PredictionResponse full(std::vector<double> p) {
  PredictionResponse r;
  r.mode = Granularity::Mode::full;
  r.probs = std::move(p);
  return r;
}

PredictionResponse label(std::size_t c) {
  PredictionResponse r;
  r.mode = Granularity::Mode::label;
  r.label = c;
  return r;
}

TransferSet hand_set(std::vector<PredictionResponse> responses, Granularity g) {
  TransferSet s;
  s.dims = {1, 2, 1};
  s.granularity = g;
  s.inputs = Tensor({responses.size(), 2});
  for (std::size_t i = 0; i < responses.size(); ++i) {
    s.inputs.at(i, 0) = static_cast<double>(i);
    s.pool_indices.push_back(i);
  }
  s.responses = std::move(responses);
  return s;
}

Model victim(std::uint64_t seed = 1) {
  Model m = xfb::test::random_model(ArchitectureSpec::parse("family=mlp input=1x6x1 hidden=dense:8 classes=4"), seed);
  m.normalization = {{0.5}, {0.3}};
  return m;
}

AttackerPool uniform_pool(std::size_t n, std::uint64_t seed) {
  AttackerPool pool;
  pool.dims = {1, 6, 1};
  pool.inputs = Tensor({n, 6});
  Rng rng(seed);
  for (double& v : pool.inputs.values()) v = rng.uniform();
  return pool;
}

}  // namespace

TEST_CASE("extractor: soft targets from each granularity") {
  {
    const auto t = responses_to_targets(hand_set({full({0.7, 0.2, 0.1})}, Granularity::full()), TargetMode::soft, 3);
    CHECK(std::vector<double>(t.row(0).begin(), t.row(0).end()) == std::vector<double>{0.7, 0.2, 0.1});
  }
  {
    const auto r = truncate(std::vector<double>{0.7, 0.2, 0.06, 0.04}, Granularity::topk(2));
    const auto t = responses_to_targets(hand_set({r}, Granularity::topk(2)), TargetMode::soft, 4);
    CHECK(t.at(0, 0) == 0.7);
    CHECK(t.at(0, 1) == 0.2);
    CHECK(t.at(0, 2) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(t.at(0, 3) == doctest::Approx(0.05).epsilon(1e-12));
  }
  {
    PredictionResponse r = full({0.33, 0.33, 0.33});
    r.mode = Granularity::Mode::rounded;
    const auto t = responses_to_targets(hand_set({r}, Granularity::rounded(2)), TargetMode::soft, 3);
    for (std::size_t c = 0; c < 3; ++c) CHECK(t.at(0, c) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("extractor: hard targets are one-hot") {
  const auto t = responses_to_targets(hand_set({label(2)}, Granularity::label()), TargetMode::hard, 3);
  CHECK(std::vector<double>(t.row(0).begin(), t.row(0).end()) == std::vector<double>{0.0, 0.0, 1.0});
  const auto u = responses_to_targets(hand_set({full({0.2, 0.5, 0.3})}, Granularity::full()), TargetMode::hard, 3);
  CHECK(u.at(0, 1) == 1.0);
}

TEST_CASE("extractor: soft targets on label responses are a mode error") {
  try {
    responses_to_targets(hand_set({label(1)}, Granularity::label()), TargetMode::soft, 3);
    FAIL("soft on label accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::mode);
  }
}

TEST_CASE("extractor: target rows always sum to one") {
  Rng rng(5);
  std::vector<PredictionResponse> rs;
  for (int i = 0; i < 200; ++i) {
    std::vector<double> z(6);
    for (double& v : z) v = 3.0 * rng.normal();
    rs.push_back(truncate(softmax(z), Granularity::topk(1 + static_cast<std::size_t>(i % 6))));
  }
  const auto t = responses_to_targets(hand_set(rs, Granularity::topk(3)), TargetMode::soft, 6);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double sum = 0.0;
    for (double v : t.row(r)) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
}

TEST_CASE("extractor: class histogram") {
  const auto same = hand_set({label(1), label(1), label(1)}, Granularity::label());
  CHECK(class_histogram(same, 3) == std::vector<std::size_t>{0, 3, 0});
  const auto mixed = hand_set({full({0.1, 0.9}), full({0.6, 0.4}), full({0.5, 0.5}), full({0.2, 0.8}),
                               full({0.3, 0.7})},
                              Granularity::full());
  // The tie goes to class 0.
  CHECK(class_histogram(mixed, 2) == std::vector<std::size_t>{2, 3});
}

TEST_CASE("extractor: oversampling fills every non-empty bin to the maximum") {
  std::vector<PredictionResponse> rs;
  for (int i = 0; i < 10; ++i) rs.push_back(label(0));
  for (int i = 0; i < 5; ++i) rs.push_back(label(1));
  const auto set = hand_set(rs, Granularity::label());
  const auto policy = BalancingPolicy::parse("oversample");
  const auto a = balance(set, policy, 2, 7);
  CHECK(class_histogram(a, 2) == std::vector<std::size_t>{10, 10});
  CHECK(a.accepted() == 20);
  // Originals come first, unchanged.
  for (std::size_t i = 0; i < 15; ++i) CHECK(a.inputs.at(i, 0) == set.inputs.at(i, 0));
  for (std::size_t i = 15; i < 20; ++i) {
    CHECK(a.inputs.at(i, 0) >= 10.0);
    CHECK(a.responses[i].label == 1);
  }
  CHECK(balance(set, policy, 2, 7).inputs == a.inputs);

  const auto balanced = hand_set({label(0), label(1)}, Granularity::label());
  CHECK(balance(balanced, policy, 2, 7).inputs == balanced.inputs);
}

TEST_CASE("extractor: dropping low-confidence rows") {
  const auto set = hand_set({full({0.9, 0.1, 0.0}), full({0.4, 0.3, 0.3})}, Granularity::full());
  const auto kept = balance(set, BalancingPolicy::parse("drop:0.5"), 3, 1);
  REQUIRE(kept.accepted() == 1);
  CHECK(kept.responses[0].probs[0] == 0.9);
  CHECK_THROWS_AS(balance(hand_set({label(0)}, Granularity::label()), BalancingPolicy::parse("drop:0.5"), 2, 1),
                  Error);
  CHECK_THROWS_AS(BalancingPolicy::parse("drop:1.5"), Error);
  CHECK_THROWS_AS(BalancingPolicy::parse("drop:0"), Error);
  CHECK(BalancingPolicy::parse("drop:0.25").to_string() == "drop:0.25");
}

TEST_CASE("extractor: budget zero gives an empty set") {
  const PredictionService svc(victim(), Granularity::full());
  LocalTarget target(svc);
  const auto set = build_transfer_set(target, uniform_pool(20, 1), 0, 3);
  CHECK(set.accepted() == 0);
  CHECK(set.queried() == 0);
}

TEST_CASE("extractor: budget conservation and probability rows") {
  const PredictionService svc(victim(), Granularity::full());
  LocalTarget target(svc);
  const auto pool = uniform_pool(150, 2);
  const auto set = build_transfer_set(target, pool, 100, 3);
  CHECK(set.accepted() == 100);
  CHECK(infer_classes(set) == 4);
  for (const auto& r : set.responses) {
    double sum = 0.0;
    for (double v : r.probs) sum += v;
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }
  // Each accepted input is the pool row it claims to be.
  for (std::size_t i = 0; i < set.accepted(); ++i) {
    for (std::size_t c = 0; c < 6; ++c) CHECK(set.inputs.at(i, c) == pool.inputs.at(set.pool_indices[i], c));
  }
  const auto bigger = build_transfer_set(target, pool, 1000, 3);
  CHECK(bigger.queried() == 150);
}

TEST_CASE("extractor: concurrency does not change the transfer set") {
  const PredictionService svc(victim(), Granularity::topk(2));
  LocalTarget target(svc);
  const auto pool = uniform_pool(300, 4);
  const auto a = build_transfer_set(target, pool, 250, 9, 1);
  const auto b = build_transfer_set(target, pool, 250, 9, 8);
  CHECK(a.inputs == b.inputs);
  CHECK(a.responses == b.responses);
  CHECK(a.pool_indices == b.pool_indices);
  const auto c = build_transfer_set(target, pool, 250, 10, 1);
  CHECK(c.pool_indices != a.pool_indices);
}

TEST_CASE("extractor: blocked queries match offline detector flags") {
  Detector d;
  d.kind = DetectorKind::msp;
  d.model = victim();
  const auto pool = uniform_pool(200, 6);
  auto scores = d.scores(pool.inputs);
  std::sort(scores.begin(), scores.end());
  d.threshold = scores[120];
  std::size_t expected = 0;
  for (double s : d.scores(pool.inputs)) expected += d.flags(s) ? 1 : 0;

  const PredictionService svc(victim(), Granularity::full(), d, DetectorAction::block);
  LocalTarget target(svc);
  const auto set = build_transfer_set(target, pool, 200, 1, 4);
  CHECK(set.rejected_indices.size() == expected);
  CHECK(set.accepted() + set.rejected_indices.size() == 200);
  for (auto idx : set.rejected_indices) {
    std::vector<double> row(pool.inputs.row(idx).begin(), pool.inputs.row(idx).end());
    CHECK(d.flags(d.score(row)));
  }
}

TEST_CASE("extractor: transfer set file round trip") {
  const PredictionService svc(victim(), Granularity::rounded(3));
  LocalTarget target(svc);
  auto set = build_transfer_set(target, uniform_pool(30, 7), 20, 2);
  set.classes = infer_classes(set);
  set.alpha = 0.25;
  set.pool_seed = 11;
  set.query_seed = 2;
  const std::string bytes = serialize_transfer_set(set);
  const TransferSet back = deserialize_transfer_set(bytes);
  CHECK(back.inputs == set.inputs);
  CHECK(back.responses == set.responses);
  CHECK(back.pool_indices == set.pool_indices);
  CHECK(back.granularity == set.granularity);
  CHECK(back.classes == set.classes);
  CHECK(back.alpha == 0.25);
  CHECK(serialize_transfer_set(back) == bytes);
  std::string corrupt = bytes;
  corrupt[corrupt.size() - 3] ^= 0x5a;
  CHECK_THROWS_AS(deserialize_transfer_set(corrupt), Error);
}

TEST_CASE("extractor: surrogate on soft targets beats hard targets on a starved set") {
  const Model v = victim(3);
  const PredictionService svc(v, Granularity::full());
  LocalTarget target(svc);
  const auto pool = uniform_pool(400, 8);
  const auto set = build_transfer_set(target, pool, 400, 1);
  SurrogateConfig cfg;
  cfg.arch = v.arch;
  cfg.train.epochs = 20;
  cfg.train.seed = 4;
  cfg.init_seed = 5;
  const Model soft = train_surrogate(set, cfg, 4);
  CHECK(train_surrogate(set, cfg, 4) == soft);
  cfg.target_mode = TargetMode::hard;
  const Model hard = train_surrogate(set, cfg, 4);

  const auto test = uniform_pool(500, 99);
  std::vector<std::size_t> truth(500);
  for (std::size_t r = 0; r < 500; ++r) truth[r] = predict(v, test.inputs.row(r), Granularity::label()).label;
  auto agreement = [&](const Model& m) {
    std::size_t hits = 0;
    for (std::size_t r = 0; r < 500; ++r) hits += predict(m, test.inputs.row(r), Granularity::label()).label == truth[r];
    return static_cast<double>(hits) / 500.0;
  };
  CHECK(agreement(soft) >= agreement(hard) - 0.02);
  CHECK(agreement(soft) > 0.5);
}
