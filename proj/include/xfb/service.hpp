#pragma once

#include <atomic>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xfb/datagen.hpp"
#include "xfb/detectors.hpp"
#include "xfb/json.hpp"
#include "xfb/model.hpp"
#include "xfb/train.hpp"

namespace xfb {

// How much of the probability vector the API reveals.
struct Granularity {
  enum class Mode { full, topk, rounded, label };
  Mode mode = Mode::full;
  std::size_t k = 0;  // topk
  int digits = 0;     // rounded

  static Granularity full() { return {Mode::full, 0, 0}; }
  static Granularity topk(std::size_t k) { return {Mode::topk, k, 0}; }
  static Granularity rounded(int digits) { return {Mode::rounded, 0, digits}; }
  static Granularity label() { return {Mode::label, 0, 0}; }

  // "full", "topk:K", "rounded:D", "label".
  static Granularity parse(std::string_view text);
  std::string to_string() const;
  void validate() const;

  friend bool operator==(const Granularity&, const Granularity&) = default;
};

struct TopEntry {
  std::size_t cls = 0;
  double prob = 0.0;
  friend bool operator==(const TopEntry&, const TopEntry&) = default;
};

struct PredictionResponse {
  Granularity::Mode mode = Granularity::Mode::full;
  std::vector<double> probs;  // full, rounded
  std::vector<TopEntry> topk;  // topk
  std::size_t label = 0;       // label

  // Class the response points at: the label, the first top-k entry, or the
  // argmax of the vector (lowest index on ties).
  std::size_t predicted_class() const;
  // Largest probability revealed; mode error for label responses.
  double max_prob() const;

  Json to_json() const;
  static PredictionResponse from_json(const Json& body);

  friend bool operator==(const PredictionResponse&, const PredictionResponse&) = default;
};

// Round half to even at `digits` decimal places, applied to value * 10^digits.
double round_half_even(double value, int digits);

// Parameter error when k exceeds the class count.
PredictionResponse truncate(std::span<const double> probs, const Granularity& granularity);

// Applies the model's stored normalization to a raw input, then forward,
// softmax, truncate. Validation error for a wrong length or non-finite values.
PredictionResponse predict(const Model& model, std::span<const double> raw_input, const Granularity& granularity);

// Victim training: fresh He-initialized model on the dataset, normalization
// attached from the dataset.
Model train_victim(const LabeledDataset& train, const ArchitectureSpec& arch, const TrainConfig& config,
                   std::uint64_t init_seed);

// ---- query log ---------------------------------------------------------------

struct QueryLogEntry {
  std::uint64_t id = 0;
  std::string timestamp;
  std::string input_digest;
  std::optional<double> score;
  std::string decision;  // pass | log | block | bad_input
  std::string granularity;
  std::string response_digest;

  Json to_json() const;
};

// Append-only JSON-lines log with dense ids starting at 0. All methods are
// safe to call concurrently. Without a path the entries are kept in memory
// only (entries() still works).
class QueryLog {
 public:
  QueryLog() = default;
  explicit QueryLog(const std::string& path);

  // Assigns the next id and writes the entry; returns the id.
  std::uint64_t append(QueryLogEntry entry);
  std::vector<QueryLogEntry> entries() const;
  std::uint64_t size() const;

 private:
  mutable std::mutex mutex_;
  std::vector<QueryLogEntry> entries_;
  std::unique_ptr<std::ofstream> file_;
};

// sha256 of the input's little-endian float64 bytes.
std::string input_digest(std::span<const double> input);

// ---- prediction service --------------------------------------------------------

enum class DetectorAction { log, block };
std::string_view to_string(DetectorAction action);
DetectorAction parse_detector_action(std::string_view text);

struct ServiceReply {
  int status = 200;
  Json body;
};

// The API core shared by the HTTP server and in-process clients. Model and
// detector are immutable; the log is the only shared mutable state.
class PredictionService {
 public:
  PredictionService(Model model, Granularity granularity, std::optional<Detector> detector = std::nullopt,
                    DetectorAction action = DetectorAction::log, std::shared_ptr<QueryLog> log = nullptr);

  Json info() const;
  ServiceReply answer(std::span<const double> raw_input) const;
  // Parses {"input": [...]} first; malformed bodies give 400.
  ServiceReply answer_body(std::string_view body) const;

  const Model& model() const { return model_; }
  const Granularity& granularity() const { return granularity_; }
  const std::optional<Detector>& detector() const { return detector_; }
  QueryLog& log() const { return *log_; }

 private:
  ServiceReply bad_input(const std::string& detail, std::string_view digest) const;

  Model model_;
  Granularity granularity_;
  std::optional<Detector> detector_;
  DetectorAction action_;
  std::shared_ptr<QueryLog> log_;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 = any free port
  std::size_t max_body_bytes = 1 << 20;
  std::size_t threads = 8;
};

// HTTP front end. start() binds (runtime error if the port is busy) and
// serves on a background thread until stop() or destruction.
class HttpServer {
 public:
  HttpServer(const PredictionService& service, ServiceConfig config);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  int start();  // returns the bound port
  void wait();  // blocks until stopped
  void stop();
  int port() const { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

}  // namespace xfb
