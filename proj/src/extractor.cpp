#include "xfb/extractor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include <httplib.h>

#include "xfb/container.hpp"
#include "xfb/error.hpp"
#include "xfb/io.hpp"
#include "xfb/rng.hpp"

namespace xfb {

namespace {

constexpr std::uint64_t kQueryOrderStream = 0x51525931ULL;  // "QRY1"
constexpr std::uint64_t kBalanceStream = 0x42414c31ULL;     // "BAL1"

class LocalChannel : public QueryChannel {
 public:
  explicit LocalChannel(const PredictionService& service) : service_(service) {}

  QueryOutcome query(std::span<const double> raw_input) override {
    const ServiceReply reply = service_.answer(raw_input);
    QueryOutcome out;
    if (reply.status == 403) {
      out.rejected = true;
      out.rejection_score = reply.body.at("score").get<double>();
      return out;
    }
    if (reply.status != 200) {
      fail(ErrorKind::validation, "service refused the query: " + reply.body.value("detail", std::string("?")));
    }
    out.response = PredictionResponse::from_json(reply.body);
    out.response.mode = service_.granularity().mode;
    return out;
  }

 private:
  const PredictionService& service_;
};

// Splits "http://host:port/..." into the scheme-host-port part httplib wants.
std::string base_url(const std::string& endpoint) {
  std::string url = endpoint;
  while (!url.empty() && url.back() == '/') url.pop_back();
  return url;
}

template <typename Call>
httplib::Result with_retries(const RetryPolicy& policy, const std::string& what, Call&& call) {
  auto backoff = policy.initial_backoff;
  std::string last_error;
  for (int attempt = 0; attempt <= policy.retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    httplib::Result res = call();
    if (res && res->status < 500) return res;
    last_error = res ? "HTTP " + std::to_string(res->status) : httplib::to_string(res.error());
  }
  fail(ErrorKind::network, what + " failed after " + std::to_string(policy.retries) + " retries: " + last_error);
}

std::unique_ptr<httplib::Client> make_client(const std::string& endpoint, const RetryPolicy& policy) {
  auto client = std::make_unique<httplib::Client>(base_url(endpoint));
  require(client->is_valid(), ErrorKind::validation, "invalid endpoint '" + endpoint + "'");
  client->set_connection_timeout(policy.timeout);
  client->set_read_timeout(policy.timeout);
  client->set_write_timeout(policy.timeout);
  client->set_keep_alive(true);
  return client;
}

class HttpChannel : public QueryChannel {
 public:
  HttpChannel(const std::string& endpoint, RetryPolicy policy, Granularity granularity)
      : policy_(policy), granularity_(granularity), client_(make_client(endpoint, policy)) {}

  QueryOutcome query(std::span<const double> raw_input) override {
    const std::string body = canonical_json(Json{{"input", json_array(raw_input)}});
    const httplib::Result res = with_retries(policy_, "POST /v1/predict", [&] {
      return client_->Post("/v1/predict", body, "application/json");
    });
    Json parsed;
    try {
      parsed = Json::parse(res->body);
    } catch (const Json::parse_error&) {
      fail(ErrorKind::format, "server sent malformed JSON (HTTP " + std::to_string(res->status) + ")");
    }
    QueryOutcome out;
    if (res->status == 403) {
      out.rejected = true;
      out.rejection_score = parsed.value("score", 0.0);
      return out;
    }
    if (res->status != 200) {
      fail(ErrorKind::validation,
           "server answered HTTP " + std::to_string(res->status) + ": " + parsed.value("detail", res->body));
    }
    out.response = PredictionResponse::from_json(parsed);
    out.response.mode = granularity_.mode;
    return out;
  }

 private:
  RetryPolicy policy_;
  Granularity granularity_;
  std::unique_ptr<httplib::Client> client_;
};

void check_response_shape(const PredictionResponse& r, const Granularity& g) {
  require(r.mode == g.mode, ErrorKind::format, "response does not match the set's granularity");
  if (g.mode == Granularity::Mode::topk) {
    require(r.topk.size() == g.k, ErrorKind::format, "top-k response has the wrong length");
  }
}

}  // namespace

std::unique_ptr<QueryChannel> LocalTarget::connect() { return std::make_unique<LocalChannel>(service_); }

HttpTarget::HttpTarget(std::string endpoint, RetryPolicy policy)
    : endpoint_(std::move(endpoint)), policy_(policy) {}

void HttpTarget::fetch_info() {
  if (input_dim_) return;
  auto client = make_client(endpoint_, policy_);
  const httplib::Result res = with_retries(policy_, "GET /v1/info", [&] { return client->Get("/v1/info"); });
  require(res->status == 200, ErrorKind::network, "GET /v1/info answered HTTP " + std::to_string(res->status));
  Json info;
  try {
    info = Json::parse(res->body);
  } catch (const Json::parse_error&) {
    fail(ErrorKind::format, "malformed /v1/info body");
  }
  require(info.contains("input_dim") && info.contains("granularity"), ErrorKind::format,
          "/v1/info lacks input_dim or granularity");
  input_dim_ = info["input_dim"].get<std::size_t>();
  granularity_ = Granularity::parse(info["granularity"].get<std::string>());
}

std::size_t HttpTarget::input_dim() {
  fetch_info();
  return *input_dim_;
}

Granularity HttpTarget::granularity() {
  fetch_info();
  return granularity_;
}

std::unique_ptr<QueryChannel> HttpTarget::connect() {
  fetch_info();
  return std::make_unique<HttpChannel>(endpoint_, policy_, granularity_);
}

TransferSet build_transfer_set(QueryTarget& target, const AttackerPool& pool, std::size_t budget,
                               std::uint64_t seed, std::size_t concurrency) {
  require(concurrency >= 1, ErrorKind::parameter, "concurrency must be at least 1");
  TransferSet set;
  set.dims = pool.dims;
  set.alpha = pool.alpha;
  set.pool_seed = pool.source.pool_seed;
  set.query_seed = seed;
  set.inputs = Tensor({0, pool.dims.size()});

  const std::size_t count = std::min(budget, pool.size());
  set.granularity = target.granularity();
  if (count == 0) return set;
  require(target.input_dim() == pool.dims.size(), ErrorKind::dimension,
          "pool rows have " + std::to_string(pool.dims.size()) + " values but the API expects " +
              std::to_string(target.input_dim()));

  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::derive(seed, kQueryOrderStream));
  rng.shuffle(std::span<std::size_t>(order));
  order.resize(count);

  std::vector<QueryOutcome> outcomes(count);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    try {
      auto channel = target.connect();
      for (;;) {
        if (abort.load()) return;
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        outcomes[i] = channel->query(pool.inputs.row(order[i]));
      }
    } catch (...) {
      std::lock_guard lock(error_mutex);
      if (!error) error = std::current_exception();
      abort.store(true);
    }
  };
  const std::size_t threads = std::min(concurrency, count);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool_threads;
    for (std::size_t t = 0; t < threads; ++t) pool_threads.emplace_back(worker);
    for (auto& t : pool_threads) t.join();
  }
  if (error) std::rethrow_exception(error);

  std::vector<std::size_t> accepted_rows;
  for (std::size_t i = 0; i < count; ++i) {
    if (outcomes[i].rejected) {
      set.rejected_indices.push_back(order[i]);
      continue;
    }
    check_response_shape(outcomes[i].response, set.granularity);
    accepted_rows.push_back(order[i]);
    set.responses.push_back(std::move(outcomes[i].response));
  }
  set.pool_indices = accepted_rows;
  set.inputs = pool.inputs.gather_rows(accepted_rows);
  set.classes = infer_classes(set);
  return set;
}

std::size_t infer_classes(const TransferSet& set) {
  std::size_t m = 0;
  for (const auto& r : set.responses) {
    switch (r.mode) {
      case Granularity::Mode::full:
      case Granularity::Mode::rounded:
        m = std::max(m, r.probs.size());
        break;
      case Granularity::Mode::topk:
        for (const auto& e : r.topk) m = std::max(m, e.cls + 1);
        break;
      case Granularity::Mode::label:
        return 0;
    }
  }
  return m;
}

std::string_view to_string(TargetMode mode) { return mode == TargetMode::soft ? "soft" : "hard"; }

TargetMode parse_target_mode(std::string_view text) {
  if (text == "soft") return TargetMode::soft;
  if (text == "hard") return TargetMode::hard;
  fail(ErrorKind::validation, "unknown target mode '" + std::string(text) + "' (expected soft or hard)");
}

Tensor responses_to_targets(const TransferSet& set, TargetMode mode, std::size_t m) {
  require(m >= 2, ErrorKind::validation, "class count must be at least 2");
  if (mode == TargetMode::soft) {
    require(set.granularity.mode != Granularity::Mode::label, ErrorKind::mode,
            "soft targets need probabilities; label-only responses support hard targets only");
  }
  Tensor out({set.responses.size(), m});
  for (std::size_t r = 0; r < set.responses.size(); ++r) {
    const PredictionResponse& resp = set.responses[r];
    auto row = out.row(r);
    if (mode == TargetMode::hard) {
      const std::size_t cls = resp.predicted_class();
      require(cls < m, ErrorKind::validation, "response class " + std::to_string(cls) + " out of range");
      row[cls] = 1.0;
      continue;
    }
    switch (resp.mode) {
      case Granularity::Mode::full:
      case Granularity::Mode::rounded: {
        require(resp.probs.size() == m, ErrorKind::validation, "probability vector length does not match m");
        double sum = 0.0;
        for (double p : resp.probs) {
          require(std::isfinite(p) && p >= 0.0, ErrorKind::validation, "invalid probability in response");
          sum += p;
        }
        if (resp.mode == Granularity::Mode::rounded) {
          if (sum > 0.0) {
            for (std::size_t c = 0; c < m; ++c) row[c] = resp.probs[c] / sum;
          } else {
            // Everything rounded to zero: fall back to uniform.
            for (std::size_t c = 0; c < m; ++c) row[c] = 1.0 / static_cast<double>(m);
          }
        } else {
          std::copy(resp.probs.begin(), resp.probs.end(), row.begin());
        }
        break;
      }
      case Granularity::Mode::topk: {
        double listed = 0.0;
        std::vector<bool> seen(m, false);
        for (const auto& e : resp.topk) {
          require(e.cls < m, ErrorKind::validation, "top-k class out of range");
          row[e.cls] = e.prob;
          seen[e.cls] = true;
          listed += e.prob;
        }
        const std::size_t unlisted = m - resp.topk.size();
        const double residual = std::max(0.0, 1.0 - listed);
        for (std::size_t c = 0; c < m; ++c) {
          if (!seen[c]) row[c] = residual / static_cast<double>(unlisted);
        }
        if (unlisted == 0 && listed > 0.0) {
          for (double& v : row) v /= listed;
        }
        break;
      }
      case Granularity::Mode::label:
        break;
    }
  }
  return out;
}

std::vector<std::size_t> class_histogram(const TransferSet& set, std::size_t m) {
  require(!set.responses.empty(), ErrorKind::validation, "histogram of an empty transfer set");
  std::vector<std::size_t> bins(m, 0);
  for (const auto& r : set.responses) {
    const std::size_t cls = r.predicted_class();
    require(cls < m, ErrorKind::validation, "response class " + std::to_string(cls) + " out of range");
    ++bins[cls];
  }
  return bins;
}

BalancingPolicy BalancingPolicy::parse(std::string_view text) {
  BalancingPolicy p;
  if (text == "none") {
    p.mode = Mode::none;
  } else if (text == "oversample") {
    p.mode = Mode::oversample_to_max;
  } else if (text.starts_with("drop:")) {
    p.mode = Mode::drop_low_confidence;
    p.threshold = parse_double(text.substr(5), "drop threshold");
  } else {
    fail(ErrorKind::validation, "unknown balancing policy '" + std::string(text) +
                                    "' (expected none, oversample or drop:<t>)");
  }
  p.validate();
  return p;
}

std::string BalancingPolicy::to_string() const {
  switch (mode) {
    case Mode::none: return "none";
    case Mode::oversample_to_max: return "oversample";
    case Mode::drop_low_confidence: return "drop:" + format_double(threshold);
  }
  return "?";
}

void BalancingPolicy::validate() const {
  if (mode == Mode::drop_low_confidence) {
    require(threshold > 0.0 && threshold < 1.0, ErrorKind::parameter, "drop threshold must be in (0, 1)");
  }
}

TransferSet balance(const TransferSet& set, const BalancingPolicy& policy, std::size_t m, std::uint64_t seed) {
  policy.validate();
  switch (policy.mode) {
    case BalancingPolicy::Mode::none:
      return set;
    case BalancingPolicy::Mode::drop_low_confidence: {
      require(set.granularity.mode != Granularity::Mode::label, ErrorKind::mode,
              "drop_low_confidence needs probabilities; label-only sets have none");
      TransferSet out = set;
      out.responses.clear();
      out.pool_indices.clear();
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < set.responses.size(); ++i) {
        if (set.responses[i].max_prob() >= policy.threshold) keep.push_back(i);
      }
      for (std::size_t i : keep) {
        out.responses.push_back(set.responses[i]);
        out.pool_indices.push_back(set.pool_indices[i]);
      }
      out.inputs = set.inputs.gather_rows(keep);
      return out;
    }
    case BalancingPolicy::Mode::oversample_to_max: {
      const auto bins = class_histogram(set, m);
      const std::size_t top = *std::max_element(bins.begin(), bins.end());
      std::vector<std::vector<std::size_t>> members(m);
      for (std::size_t i = 0; i < set.responses.size(); ++i) members[set.responses[i].predicted_class()].push_back(i);
      std::vector<std::size_t> rows(set.responses.size());
      std::iota(rows.begin(), rows.end(), std::size_t{0});
      Rng rng(Rng::derive(seed, kBalanceStream));
      for (std::size_t c = 0; c < m; ++c) {
        if (members[c].empty()) continue;
        for (std::size_t extra = bins[c]; extra < top; ++extra) {
          rows.push_back(members[c][static_cast<std::size_t>(rng.below(members[c].size()))]);
        }
      }
      TransferSet out = set;
      out.responses.clear();
      out.pool_indices.clear();
      for (std::size_t i : rows) {
        out.responses.push_back(set.responses[i]);
        out.pool_indices.push_back(set.pool_indices[i]);
      }
      out.inputs = set.inputs.gather_rows(rows);
      return out;
    }
  }
  return set;
}

Model train_surrogate(const TransferSet& set, const SurrogateConfig& config, std::size_t m,
                      const std::optional<Normalization>& normalization) {
  require(config.arch.classes == m, ErrorKind::dimension, "surrogate architecture class count does not match m");
  require(config.arch.input == set.dims, ErrorKind::dimension, "surrogate input dims do not match the transfer set");
  const TransferSet balanced = balance(set, config.balance, m, config.train.seed);
  require(balanced.accepted() > 0, ErrorKind::validation, "transfer set is empty after balancing");
  const Normalization norm = normalization ? *normalization : channel_statistics(balanced.inputs, set.dims.channels);
  const Tensor targets = responses_to_targets(balanced, config.target_mode, m);
  Model model = train(Model::initialize(config.arch, config.init_seed), norm.apply(balanced.inputs), targets,
                      config.train);
  model.normalization = norm;
  return model;
}

// ---- transfer-set file ---------------------------------------------------------

std::string serialize_transfer_set(const TransferSet& set) {
  const Granularity& g = set.granularity;
  std::size_t width = 0;
  std::vector<double> payload;
  for (const auto& r : set.responses) {
    check_response_shape(r, g);
    switch (g.mode) {
      case Granularity::Mode::full:
      case Granularity::Mode::rounded:
        if (width == 0) width = r.probs.size();
        require(r.probs.size() == width, ErrorKind::validation, "responses differ in length");
        payload.insert(payload.end(), r.probs.begin(), r.probs.end());
        break;
      case Granularity::Mode::topk:
        width = 2 * g.k;
        for (const auto& e : r.topk) {
          payload.push_back(static_cast<double>(e.cls));
          payload.push_back(e.prob);
        }
        break;
      case Granularity::Mode::label:
        width = 1;
        payload.push_back(static_cast<double>(r.label));
        break;
    }
  }
  auto as_doubles = [](const std::vector<std::size_t>& v) { return std::vector<double>(v.begin(), v.end()); };
  Container c;
  c.kind = "transfer";
  c.field("dims", to_string(set.dims))
      .field("granularity", g.to_string())
      .field("count", std::to_string(set.accepted()))
      .field("rejected", std::to_string(set.rejected_indices.size()))
      .field("classes", std::to_string(set.classes))
      .field("response_width", std::to_string(width))
      .field("alpha", format_double(set.alpha))
      .field("pool_seed", std::to_string(set.pool_seed))
      .field("query_seed", std::to_string(set.query_seed))
      .section("inputs", {set.inputs.values().begin(), set.inputs.values().end()})
      .section("responses", std::move(payload))
      .section("pool_index", as_doubles(set.pool_indices))
      .section("rejected_index", as_doubles(set.rejected_indices));
  return encode_container(c);
}

TransferSet deserialize_transfer_set(std::string_view bytes) {
  const Container c = decode_container(bytes, "transfer");
  TransferSet set;
  set.dims = parse_dims(c.get("dims"));
  set.granularity = Granularity::parse(c.get("granularity"));
  const auto count = parse_u64(c.get("count"), "count");
  const auto width = parse_u64(c.get("response_width"), "response_width");
  set.classes = parse_u64(c.get("classes"), "classes");
  set.alpha = parse_double(c.get("alpha"), "alpha");
  set.pool_seed = parse_u64(c.get("pool_seed"), "pool_seed");
  set.query_seed = parse_u64(c.get("query_seed"), "query_seed");
  set.inputs = Tensor({count, set.dims.size()}, c.data("inputs"));
  const auto& payload = c.data("responses");
  require(payload.size() == count * width, ErrorKind::format, "response section size does not match count");
  auto index = [](double v) {
    require(v >= 0.0 && v == std::floor(v) && v < 9.0e15, ErrorKind::format, "bad index value in transfer set");
    return static_cast<std::size_t>(v);
  };
  for (std::size_t r = 0; r < count; ++r) {
    PredictionResponse resp;
    resp.mode = set.granularity.mode;
    const double* row = payload.data() + r * width;
    switch (resp.mode) {
      case Granularity::Mode::full:
      case Granularity::Mode::rounded:
        resp.probs.assign(row, row + width);
        break;
      case Granularity::Mode::topk:
        require(width == 2 * set.granularity.k, ErrorKind::format, "top-k width mismatch");
        for (std::size_t k = 0; k < set.granularity.k; ++k) resp.topk.push_back({index(row[2 * k]), row[2 * k + 1]});
        break;
      case Granularity::Mode::label:
        require(width == 1, ErrorKind::format, "label width mismatch");
        resp.label = index(row[0]);
        break;
    }
    set.responses.push_back(std::move(resp));
  }
  for (double v : c.data("pool_index")) set.pool_indices.push_back(index(v));
  for (double v : c.data("rejected_index")) set.rejected_indices.push_back(index(v));
  require(set.pool_indices.size() == count, ErrorKind::format, "pool index section size does not match count");
  require(set.rejected_indices.size() == parse_u64(c.get("rejected"), "rejected"), ErrorKind::format,
          "rejected index section size does not match");
  return set;
}

void save_transfer_set(const std::string& path, const TransferSet& set) {
  write_file(path, serialize_transfer_set(set));
}

TransferSet load_transfer_set(const std::string& path) { return deserialize_transfer_set(read_file(path)); }

}  // namespace xfb
