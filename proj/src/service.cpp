#include "xfb/service.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <thread>

#include <httplib.h>

#include "xfb/error.hpp"
#include "xfb/io.hpp"
#include "xfb/nn.hpp"

namespace xfb {

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t secs = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[40];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[48];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

std::size_t parse_count(std::string_view text, std::string_view what) {
  try {
    return static_cast<std::size_t>(parse_u64(text, what));
  } catch (const Error&) {
    fail(ErrorKind::validation, "bad " + std::string(what) + " '" + std::string(text) + "'");
  }
}

}  // namespace

// ---- granularity -------------------------------------------------------------

Granularity Granularity::parse(std::string_view text) {
  Granularity g;
  if (text == "full") {
    g = full();
  } else if (text == "label") {
    g = label();
  } else if (text.starts_with("topk:")) {
    g = topk(parse_count(text.substr(5), "top-k count"));
  } else if (text.starts_with("rounded:")) {
    g = rounded(static_cast<int>(parse_count(text.substr(8), "rounding digits")));
  } else {
    fail(ErrorKind::validation,
         "unknown granularity '" + std::string(text) + "' (expected full, topk:K, rounded:D or label)");
  }
  g.validate();
  return g;
}

std::string Granularity::to_string() const {
  switch (mode) {
    case Mode::full: return "full";
    case Mode::topk: return "topk:" + std::to_string(k);
    case Mode::rounded: return "rounded:" + std::to_string(digits);
    case Mode::label: return "label";
  }
  return "?";
}

void Granularity::validate() const {
  if (mode == Mode::topk) require(k >= 1, ErrorKind::parameter, "top-k needs k >= 1");
  if (mode == Mode::rounded) {
    require(digits >= 1 && digits <= 15, ErrorKind::parameter, "rounding needs 1..15 decimal places");
  }
}

// ---- responses -----------------------------------------------------------------

std::size_t PredictionResponse::predicted_class() const {
  switch (mode) {
    case Granularity::Mode::label: return label;
    case Granularity::Mode::topk:
      require(!topk.empty(), ErrorKind::validation, "empty top-k response");
      return topk.front().cls;
    case Granularity::Mode::full:
    case Granularity::Mode::rounded:
      return argmax(probs);
  }
  return 0;
}

double PredictionResponse::max_prob() const {
  switch (mode) {
    case Granularity::Mode::label:
      fail(ErrorKind::mode, "label-only responses carry no probabilities");
    case Granularity::Mode::topk:
      require(!topk.empty(), ErrorKind::validation, "empty top-k response");
      return topk.front().prob;
    case Granularity::Mode::full:
    case Granularity::Mode::rounded:
      return *std::max_element(probs.begin(), probs.end());
  }
  return 0.0;
}

Json PredictionResponse::to_json() const {
  Json body = Json::object();
  switch (mode) {
    case Granularity::Mode::full:
    case Granularity::Mode::rounded:
      body["probs"] = json_array(probs);
      break;
    case Granularity::Mode::topk: {
      Json list = Json::array();
      for (const auto& e : topk) list.push_back(Json{{"class", e.cls}, {"prob", e.prob}});
      body["topk"] = std::move(list);
      break;
    }
    case Granularity::Mode::label:
      body["label"] = label;
      break;
  }
  return body;
}

PredictionResponse PredictionResponse::from_json(const Json& body) {
  require(body.is_object() && body.size() == 1, ErrorKind::format,
          "prediction body must hold exactly one of probs, topk, label");
  PredictionResponse r;
  auto number = [](const Json& v) {
    require(v.is_number(), ErrorKind::format, "expected a number in the prediction body");
    return v.get<double>();
  };
  auto index = [](const Json& v) {
    require(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0), ErrorKind::format,
            "expected a class index in the prediction body");
    return v.get<std::size_t>();
  };
  if (body.contains("probs")) {
    // Full and rounded look the same on the wire; the caller knows which.
    r.mode = Granularity::Mode::full;
    require(body["probs"].is_array() && !body["probs"].empty(), ErrorKind::format, "probs must be a non-empty array");
    for (const auto& v : body["probs"]) r.probs.push_back(number(v));
  } else if (body.contains("topk")) {
    r.mode = Granularity::Mode::topk;
    require(body["topk"].is_array() && !body["topk"].empty(), ErrorKind::format, "topk must be a non-empty array");
    for (const auto& e : body["topk"]) {
      require(e.is_object() && e.contains("class") && e.contains("prob"), ErrorKind::format,
              "topk entries need class and prob");
      r.topk.push_back({index(e["class"]), number(e["prob"])});
    }
  } else if (body.contains("label")) {
    r.mode = Granularity::Mode::label;
    r.label = index(body["label"]);
  } else {
    fail(ErrorKind::format, "prediction body has none of probs, topk, label");
  }
  return r;
}

double round_half_even(double value, int digits) {
  const double scale = std::pow(10.0, digits);
  // nearbyint uses the current rounding mode, which is round-to-nearest-even
  // unless a caller changed it.
  return std::nearbyint(value * scale) / scale;
}

PredictionResponse truncate(std::span<const double> probs, const Granularity& g) {
  g.validate();
  require(!probs.empty(), ErrorKind::validation, "empty probability vector");
  PredictionResponse r;
  r.mode = g.mode;
  switch (g.mode) {
    case Granularity::Mode::full:
      r.probs.assign(probs.begin(), probs.end());
      break;
    case Granularity::Mode::rounded:
      for (double p : probs) r.probs.push_back(round_half_even(p, g.digits));
      break;
    case Granularity::Mode::topk: {
      require(g.k <= probs.size(), ErrorKind::parameter,
              "top-k k=" + std::to_string(g.k) + " exceeds the " + std::to_string(probs.size()) + " classes");
      std::vector<std::size_t> order(probs.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
      for (std::size_t i = 0; i < g.k; ++i) r.topk.push_back({order[i], probs[order[i]]});
      break;
    }
    case Granularity::Mode::label:
      r.label = argmax(probs);
      break;
  }
  return r;
}

PredictionResponse predict(const Model& model, std::span<const double> raw_input, const Granularity& g) {
  require(raw_input.size() == model.input_size(), ErrorKind::validation,
          "input has " + std::to_string(raw_input.size()) + " values, expected " + std::to_string(model.input_size()));
  for (double v : raw_input) require(std::isfinite(v), ErrorKind::validation, "input contains non-finite values");
  std::vector<double> x(raw_input.begin(), raw_input.end());
  if (!model.normalization.empty()) model.normalization.apply_inplace(x);
  const std::size_t n = x.size();
  const Tensor logits = forward(model, Tensor({1, n}, std::move(x)));
  return truncate(softmax(logits.row(0)), g);
}

Model train_victim(const LabeledDataset& train_data, const ArchitectureSpec& arch, const TrainConfig& config,
                   std::uint64_t init_seed) {
  train_data.validate();
  require(arch.input == train_data.dims, ErrorKind::dimension,
          "architecture input " + to_string(arch.input) + " does not match data dims " + to_string(train_data.dims));
  require(arch.classes == train_data.classes, ErrorKind::dimension, "architecture class count does not match data");
  Model model = train(Model::initialize(arch, init_seed), train_data.inputs,
                      one_hot(train_data.labels, train_data.classes), config);
  model.normalization = train_data.normalization;
  return model;
}

// ---- query log -------------------------------------------------------------------

Json QueryLogEntry::to_json() const {
  Json j{{"id", id},
         {"timestamp", timestamp},
         {"input_sha256", input_digest},
         {"decision", decision},
         {"granularity", granularity},
         {"response_sha256", response_digest}};
  j["score"] = score ? Json(*score) : Json(nullptr);
  return j;
}

QueryLog::QueryLog(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  file_ = std::make_unique<std::ofstream>(path, std::ios::app);
  require(file_->good(), ErrorKind::io, "cannot open query log " + path);
}

std::uint64_t QueryLog::append(QueryLogEntry entry) {
  std::lock_guard lock(mutex_);
  entry.id = entries_.size();
  if (file_) {
    *file_ << canonical_json(entry.to_json()) << '\n';
    file_->flush();
    require(file_->good(), ErrorKind::io, "query log write failed");
  }
  entries_.push_back(std::move(entry));
  return entries_.back().id;
}

std::vector<QueryLogEntry> QueryLog::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

std::uint64_t QueryLog::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

std::string input_digest(std::span<const double> input) { return sha256_hex(input); }

// ---- prediction service -------------------------------------------------------------

std::string_view to_string(DetectorAction action) { return action == DetectorAction::log ? "log" : "block"; }

DetectorAction parse_detector_action(std::string_view text) {
  if (text == "log") return DetectorAction::log;
  if (text == "block") return DetectorAction::block;
  fail(ErrorKind::validation, "unknown detector action '" + std::string(text) + "' (expected log or block)");
}

PredictionService::PredictionService(Model model, Granularity granularity, std::optional<Detector> detector,
                                     DetectorAction action, std::shared_ptr<QueryLog> log)
    : model_(std::move(model)),
      granularity_(granularity),
      detector_(std::move(detector)),
      action_(action),
      log_(log ? std::move(log) : std::make_shared<QueryLog>()) {
  model_.validate();
  granularity_.validate();
  if (granularity_.mode == Granularity::Mode::topk) {
    require(granularity_.k <= model_.classes(), ErrorKind::parameter,
            "top-k k=" + std::to_string(granularity_.k) + " exceeds the model's class count");
  }
  if (detector_) {
    require(detector_->model.input_size() == model_.input_size(), ErrorKind::dimension,
            "detector input width does not match the model");
  }
}

Json PredictionService::info() const {
  Json j{{"input_dim", model_.input_size()}, {"granularity", granularity_.to_string()}};
  if (granularity_.mode == Granularity::Mode::topk) j["topk_k"] = granularity_.k;
  if (granularity_.mode == Granularity::Mode::rounded) j["rounded_d"] = granularity_.digits;
  return j;
}

ServiceReply PredictionService::bad_input(const std::string& detail, std::string_view digest) const {
  ServiceReply reply{400, Json{{"error", "bad_input"}, {"detail", detail}}};
  QueryLogEntry e;
  e.timestamp = utc_timestamp();
  e.input_digest = digest;
  e.decision = "bad_input";
  e.granularity = granularity_.to_string();
  e.response_digest = sha256_hex(canonical_json(reply.body));
  log_->append(std::move(e));
  return reply;
}

ServiceReply PredictionService::answer(std::span<const double> raw_input) const {
  const std::string digest = input_digest(raw_input);
  if (raw_input.size() != model_.input_size()) {
    return bad_input("input has " + std::to_string(raw_input.size()) + " values, expected " +
                         std::to_string(model_.input_size()),
                     digest);
  }
  if (!std::all_of(raw_input.begin(), raw_input.end(), [](double v) { return std::isfinite(v); })) {
    return bad_input("input contains non-finite values", digest);
  }

  QueryLogEntry e;
  e.timestamp = utc_timestamp();
  e.input_digest = digest;
  e.granularity = granularity_.to_string();
  e.decision = "pass";
  ServiceReply reply;
  if (detector_) {
    const double score = detector_->score(raw_input);
    e.score = score;
    if (detector_->flags(score)) {
      e.decision = action_ == DetectorAction::block ? "block" : "log";
    }
    if (e.decision == "block") reply = {403, Json{{"error", "rejected"}, {"score", score}}};
  }
  if (reply.status == 200) reply.body = predict(model_, raw_input, granularity_).to_json();
  e.response_digest = sha256_hex(canonical_json(reply.body));
  log_->append(std::move(e));
  return reply;
}

ServiceReply PredictionService::answer_body(std::string_view body) const {
  Json parsed;
  try {
    parsed = Json::parse(body);
  } catch (const Json::parse_error& ex) {
    return bad_input(std::string("malformed JSON: ") + ex.what(), "");
  }
  if (!parsed.is_object() || !parsed.contains("input") || !parsed["input"].is_array()) {
    return bad_input("body must be {\"input\": [numbers]}", "");
  }
  std::vector<double> input;
  input.reserve(parsed["input"].size());
  for (const auto& v : parsed["input"]) {
    if (!v.is_number()) return bad_input("input must contain only numbers", "");
    input.push_back(v.get<double>());
  }
  return answer(input);
}

// ---- HTTP ---------------------------------------------------------------------------

struct HttpServer::Impl {
  const PredictionService& service;
  ServiceConfig config;
  httplib::Server server;
  std::thread thread;

  Impl(const PredictionService& s, ServiceConfig c) : service(s), config(std::move(c)) {}
};

HttpServer::HttpServer(const PredictionService& service, ServiceConfig config)
    : impl_(std::make_unique<Impl>(service, std::move(config))) {
  auto& svr = impl_->server;
  const auto threads = std::max<std::size_t>(1, impl_->config.threads);
  svr.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  svr.set_payload_max_length(impl_->config.max_body_bytes);
  // httplib closes keep-alive connections after 5 requests by default; churn under load loses requests.
  svr.set_keep_alive_max_count(1000);
  const PredictionService& svc = service;
  svr.Get("/v1/info", [&svc](const httplib::Request&, httplib::Response& res) {
    res.set_content(canonical_json(svc.info()), "application/json");
  });
  svr.Post("/v1/predict", [&svc](const httplib::Request& req, httplib::Response& res) {
    const ServiceReply reply = svc.answer_body(req.body);
    res.status = reply.status;
    res.set_content(canonical_json(reply.body), "application/json");
  });
  // SO_REUSEADDR only: httplib's default SO_REUSEPORT would let a second server share the port.
  svr.set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
    Json body{{"error", res.status == 413 ? "payload_too_large" : (res.status == 404 ? "not_found" : "http_error")}};
    res.set_content(canonical_json(body), "application/json");
    return httplib::Server::HandlerResponse::Handled;
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start() {
  auto& svr = impl_->server;
  if (impl_->config.port == 0) {
    port_ = svr.bind_to_any_port(impl_->config.host);
    require(port_ > 0, ErrorKind::runtime, "could not bind any port on " + impl_->config.host);
  } else {
    require(svr.bind_to_port(impl_->config.host, impl_->config.port), ErrorKind::runtime,
            "could not bind " + impl_->config.host + ":" + std::to_string(impl_->config.port) +
                " (port busy or not permitted)");
    port_ = impl_->config.port;
  }
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port_;
}

void HttpServer::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace xfb
