#include <doctest.h>

#include "support.hpp"
#include "xfb/arch.hpp"
#include "xfb/error.hpp"
#include "xfb/extractor.hpp"

// After the library headers: resolv.h defines _res, which breaks Eigen.
#include <httplib.h>

using namespace xfb;

namespace {

Model victim() {
  Model m = xfb::test::random_model(ArchitectureSpec::parse("family=mlp input=1x6x1 hidden=dense:8 classes=5"), 2);
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

struct Running {
  PredictionService service;
  HttpServer server;
  int port;

  Running(Granularity g, ServiceConfig cfg = {})
      : service(victim(), g), server(service, with_any_port(cfg)), port(server.start()) {}

  static ServiceConfig with_any_port(ServiceConfig c) {
    c.port = 0;
    return c;
  }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port); }
};

}  // namespace

TEST_CASE("http: info and predict") {
  Running r(Granularity::rounded(3));
  httplib::Client cli("127.0.0.1", r.port);
  const auto info = cli.Get("/v1/info");
  REQUIRE(info);
  CHECK(info->status == 200);
  const Json j = Json::parse(info->body);
  CHECK(j["input_dim"] == 6);
  CHECK(j["granularity"] == "rounded:3");
  CHECK(j["rounded_d"] == 3);

  const std::vector<double> x = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const auto res = cli.Post("/v1/predict", canonical_json(Json{{"input", json_array(x)}}), "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(Json::parse(res->body) == r.service.answer(x).body);
}

TEST_CASE("http: bad requests") {
  ServiceConfig cfg;
  cfg.max_body_bytes = 2048;
  Running r(Granularity::full(), cfg);
  httplib::Client cli("127.0.0.1", r.port);
  const auto bad = cli.Post("/v1/predict", "{\"input\": [1, 2]}", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  CHECK(Json::parse(bad->body)["error"] == "bad_input");
  const auto junk = cli.Post("/v1/predict", "not json", "application/json");
  REQUIRE(junk);
  CHECK(junk->status == 400);
  const auto big = cli.Post("/v1/predict", std::string(4096, ' '), "application/json");
  REQUIRE(big);
  CHECK(big->status == 413);
  const auto missing = cli.Get("/v1/nothing");
  REQUIRE(missing);
  CHECK(missing->status == 404);
}

TEST_CASE("http: busy port is a runtime error") {
  Running r(Granularity::full());
  const PredictionService svc(victim(), Granularity::full());
  ServiceConfig cfg;
  cfg.port = r.port;
  HttpServer second(svc, cfg);
  CHECK_THROWS_AS(second.start(), Error);
}

TEST_CASE("http: extraction over the wire equals in-process extraction") {
  for (const auto& g : {Granularity::full(), Granularity::topk(3), Granularity::rounded(2), Granularity::label()}) {
    CAPTURE(g.to_string());
    Running r(g);
    const auto pool = uniform_pool(120, 3);
    LocalTarget local(r.service);
    HttpTarget remote(r.endpoint());
    CHECK(remote.input_dim() == 6);
    CHECK(remote.granularity() == g);
    const TransferSet a = build_transfer_set(local, pool, 100, 5, 1);
    const TransferSet b = build_transfer_set(remote, pool, 100, 5, 4);
    CHECK(a.inputs == b.inputs);
    CHECK(a.responses == b.responses);
    CHECK(a.pool_indices == b.pool_indices);
  }
}

TEST_CASE("http: unreachable endpoint is a network error after retries") {
  RetryPolicy p;
  p.retries = 2;
  p.initial_backoff = std::chrono::milliseconds(1);
  p.timeout = std::chrono::seconds(1);
  HttpTarget t("http://127.0.0.1:1", p);
  try {
    t.input_dim();
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::network);
  }
}

TEST_CASE("http: blocked queries come back as rejections") {
  Detector d;
  d.kind = DetectorKind::msp;
  d.model = victim();
  d.threshold = 0.0;
  const PredictionService svc(victim(), Granularity::full(), d, DetectorAction::block);
  ServiceConfig cfg;
  cfg.port = 0;
  HttpServer server(svc, cfg);
  const int port = server.start();
  HttpTarget remote("http://127.0.0.1:" + std::to_string(port));
  const TransferSet t = build_transfer_set(remote, uniform_pool(10, 1), 10, 1);
  CHECK(t.accepted() == 0);
  CHECK(t.rejected_indices.size() == 10);
}
