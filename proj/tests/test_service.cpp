#include <doctest.h>

#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include "support.hpp"
#include "xfb/arch.hpp"
#include "xfb/error.hpp"
#include "xfb/nn.hpp"
#include "xfb/service.hpp"

using namespace xfb;
using xfb::test::TempDir;

namespace {

Model tiny_model(std::uint64_t seed = 1) {
  Model m = xfb::test::random_model(ArchitectureSpec::parse("family=mlp input=1x6x1 hidden=dense:5 classes=4"), seed);
  m.normalization = {{0.5}, {0.25}};
  return m;
}

std::vector<double> random_input(std::size_t n, Rng& rng) {
  std::vector<double> x(n);
  for (double& v : x) v = rng.uniform();
  return x;
}

}  // namespace

TEST_CASE("service: granularity parsing") {
  CHECK(Granularity::parse("full") == Granularity::full());
  CHECK(Granularity::parse("label") == Granularity::label());
  CHECK(Granularity::parse("topk:3") == Granularity::topk(3));
  CHECK(Granularity::parse("rounded:2") == Granularity::rounded(2));
  CHECK(Granularity::parse("topk:3").to_string() == "topk:3");
  CHECK_THROWS_AS(Granularity::parse("topk:0"), Error);
  CHECK_THROWS_AS(Granularity::parse("topk:x"), Error);
  CHECK_THROWS_AS(Granularity::parse("rounded:0"), Error);
  CHECK_THROWS_AS(Granularity::parse("rounded:16"), Error);
  CHECK_THROWS_AS(Granularity::parse("fuzzy"), Error);
}

TEST_CASE("service: truncation examples") {
  const std::vector<double> p = {0.7, 0.2, 0.1};
  CHECK(truncate(p, Granularity::label()).label == 0);
  const auto top = truncate(p, Granularity::topk(2));
  REQUIRE(top.topk.size() == 2);
  CHECK(top.topk[0] == TopEntry{0, 0.7});
  CHECK(top.topk[1] == TopEntry{1, 0.2});
  CHECK(truncate(p, Granularity::full()).probs == p);
  try {
    truncate(p, Granularity::topk(4));
    FAIL("k > m accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::parameter);
  }
}

TEST_CASE("service: rounding is half-even and not renormalized") {
  const auto r = truncate(std::vector<double>{0.333333, 0.333333, 0.333334}, Granularity::rounded(2));
  CHECK(r.probs == std::vector<double>{0.33, 0.33, 0.33});
  CHECK(std::abs(r.probs[0] + r.probs[1] + r.probs[2] - 0.99) < 1e-12);
  // Exactly representable halves go to the even neighbour.
  CHECK(round_half_even(0.125, 2) == 0.12);
  CHECK(round_half_even(0.375, 2) == 0.38);
  CHECK(round_half_even(0.5, 0) == 0.0);
  CHECK(round_half_even(1.5, 0) == 2.0);
}

TEST_CASE("service: ties in top-k keep class order") {
  const auto r = truncate(std::vector<double>{0.25, 0.25, 0.25, 0.25}, Granularity::topk(3));
  CHECK(r.topk[0].cls == 0);
  CHECK(r.topk[1].cls == 1);
  CHECK(r.topk[2].cls == 2);
}

TEST_CASE("service: truncation properties over random vectors") {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> logits(7);
    for (double& v : logits) v = 2.0 * rng.normal();
    const auto p = softmax(logits);
    const std::size_t label = truncate(p, Granularity::label()).label;
    for (std::size_t k = 1; k <= 7; ++k) CHECK(truncate(p, Granularity::topk(k)).predicted_class() == label);
    for (int d = 1; d <= 4; ++d) {
      const auto r = truncate(p, Granularity::rounded(d));
      double sum = 0.0;
      for (double v : r.probs) sum += v;
      CHECK(std::abs(sum - 1.0) <= 7 * std::pow(10.0, -d) / 2 + 1e-12);
    }
  }
}

TEST_CASE("service: response JSON round trip") {
  const std::vector<double> p = {0.1, 0.6, 0.3};
  for (const auto& g : {Granularity::full(), Granularity::topk(2), Granularity::label()}) {
    const auto r = truncate(p, g);
    CHECK(PredictionResponse::from_json(Json::parse(canonical_json(r.to_json()))) == r);
  }
  CHECK_THROWS_AS(PredictionResponse::from_json(Json::parse(R"({"probs":[0.5],"label":1})")), Error);
  CHECK_THROWS_AS(PredictionResponse::from_json(Json::parse(R"({"label":-1})")), Error);
  CHECK_THROWS_AS(truncate(p, Granularity::label()).max_prob(), Error);
}

TEST_CASE("service: untrained zero model answers uniformly") {
  Model m = Model::zeros(ArchitectureSpec::parse("family=mlp input=1x3x1 hidden=dense:2 classes=5"));
  const auto r = predict(m, std::vector<double>{0.1, 0.2, 0.3}, Granularity::full());
  for (double v : r.probs) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("service: label equals argmax of the full vector on 1000 inputs") {
  const Model m = tiny_model();
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const auto x = random_input(6, rng);
    const auto full = predict(m, x, Granularity::full());
    CHECK(predict(m, x, Granularity::label()).label == argmax(full.probs));
    CHECK(canonical_json(predict(m, x, Granularity::full()).to_json()) == canonical_json(full.to_json()));
  }
}

TEST_CASE("service: predict validates inputs") {
  const Model m = tiny_model();
  CHECK_THROWS_AS(predict(m, std::vector<double>(5, 0.0), Granularity::full()), Error);
  std::vector<double> x(6, 0.0);
  x[2] = std::nan("");
  CHECK_THROWS_AS(predict(m, x, Granularity::full()), Error);
}

TEST_CASE("service: answers and logs every request") {
  auto log = std::make_shared<QueryLog>();
  const PredictionService svc(tiny_model(), Granularity::topk(2), std::nullopt, DetectorAction::log, log);
  const Json info = svc.info();
  CHECK(info["input_dim"] == 6);
  CHECK(info["granularity"] == "topk:2");
  CHECK(info["topk_k"] == 2);
  CHECK_FALSE(info.contains("classes"));

  const std::vector<double> x = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const ServiceReply ok = svc.answer(x);
  CHECK(ok.status == 200);
  CHECK(ok.body.contains("topk"));
  const ServiceReply bad = svc.answer(std::vector<double>{1.0});
  CHECK(bad.status == 400);
  CHECK(bad.body["error"] == "bad_input");
  CHECK(svc.answer_body("{not json").status == 400);
  CHECK(svc.answer_body(R"({"input": "abc"})").status == 400);
  CHECK(svc.answer_body(R"({"input": [0.1, "x", 0.3, 0.4, 0.5, 0.6]})").status == 400);
  CHECK(svc.answer_body(canonical_json(Json{{"input", json_array(x)}})).body == ok.body);

  const auto entries = log->entries();
  REQUIRE(entries.size() == 6);
  for (std::size_t i = 0; i < entries.size(); ++i) CHECK(entries[i].id == i);
  CHECK(entries[0].decision == "pass");
  CHECK(entries[0].input_digest == input_digest(x));
  CHECK(entries[0].response_digest == sha256_hex(canonical_json(ok.body)));
  CHECK(entries[1].decision == "bad_input");
  CHECK_FALSE(entries[0].score.has_value());
  // Replaying the logged input gives the identical response.
  CHECK(sha256_hex(canonical_json(svc.answer(x).body)) == entries[0].response_digest);
}

TEST_CASE("service: top-k larger than the class count is refused at startup") {
  CHECK_THROWS_AS(PredictionService(tiny_model(), Granularity::topk(5)), Error);
}

TEST_CASE("service: query log ids stay dense under concurrent appends") {
  TempDir dir("qlog");
  auto log = std::make_shared<QueryLog>(dir.file("log.jsonl"));
  const PredictionService svc(tiny_model(), Granularity::full(), std::nullopt, DetectorAction::log, log);
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&svc, t] {
      Rng rng(static_cast<std::uint64_t>(t));
      for (int i = 0; i < 250; ++i) svc.answer(random_input(6, rng));
    });
  }
  for (auto& th : threads) th.join();
  const auto entries = log->entries();
  REQUIRE(entries.size() == 2000);
  for (std::size_t i = 0; i < entries.size(); ++i) CHECK(entries[i].id == i);

  std::ifstream in(dir.file("log.jsonl"));
  std::string line;
  std::uint64_t expected = 0;
  while (std::getline(in, line)) {
    const Json j = Json::parse(line);
    CHECK(j["id"].get<std::uint64_t>() == expected++);
    CHECK(j.contains("timestamp"));
    CHECK(j.contains("input_sha256"));
    CHECK(j["score"].is_null());
  }
  CHECK(expected == 2000);
}

TEST_CASE("service: detector decisions") {
  Detector d;
  d.kind = DetectorKind::msp;
  d.model = tiny_model();
  d.threshold = 0.0;  // flags everything
  const std::vector<double> x = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};

  auto log = std::make_shared<QueryLog>();
  const PredictionService logging(tiny_model(), Granularity::full(), d, DetectorAction::log, log);
  const ServiceReply a = logging.answer(x);
  CHECK(a.status == 200);
  CHECK(a.body.contains("probs"));
  CHECK(log->entries().back().decision == "log");
  CHECK(log->entries().back().score.has_value());

  auto log2 = std::make_shared<QueryLog>();
  const PredictionService blocking(tiny_model(), Granularity::full(), d, DetectorAction::block, log2);
  const ServiceReply b = blocking.answer(x);
  CHECK(b.status == 403);
  CHECK(b.body["error"] == "rejected");
  CHECK(log2->entries().back().decision == "block");

  d.threshold = 2.0;  // scores are below 1
  const PredictionService passing(tiny_model(), Granularity::full(), d, DetectorAction::block);
  CHECK(passing.answer(x).status == 200);
  CHECK(passing.log().entries().back().decision == "pass");
}
