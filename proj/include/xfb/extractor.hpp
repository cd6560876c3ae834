#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "xfb/datagen.hpp"
#include "xfb/service.hpp"
#include "xfb/train.hpp"

namespace xfb {

struct QueryOutcome {
  bool rejected = false;
  double rejection_score = 0.0;
  PredictionResponse response;
};

// One connection to the prediction API; used by a single thread at a time.
class QueryChannel {
 public:
  virtual ~QueryChannel() = default;
  virtual QueryOutcome query(std::span<const double> raw_input) = 0;
};

// The prediction API as seen by the adversary.
class QueryTarget {
 public:
  virtual ~QueryTarget() = default;
  virtual std::size_t input_dim() = 0;
  virtual Granularity granularity() = 0;
  virtual std::unique_ptr<QueryChannel> connect() = 0;
};

// Calls a PredictionService directly (same path as the HTTP handler, minus
// serialization).
class LocalTarget : public QueryTarget {
 public:
  explicit LocalTarget(const PredictionService& service) : service_(service) {}
  std::size_t input_dim() override { return service_.model().input_size(); }
  Granularity granularity() override { return service_.granularity(); }
  std::unique_ptr<QueryChannel> connect() override;

 private:
  const PredictionService& service_;
};

struct RetryPolicy {
  int retries = 3;
  std::chrono::milliseconds initial_backoff{100};  // doubles after each failure
  std::chrono::seconds timeout{30};
};

// Talks to `serve` over HTTP. Transport failures and 5xx answers are retried
// with exponential backoff, then raise a network error; 400 answers raise a
// validation error.
class HttpTarget : public QueryTarget {
 public:
  explicit HttpTarget(std::string endpoint, RetryPolicy policy = {});
  std::size_t input_dim() override;
  Granularity granularity() override;
  std::unique_ptr<QueryChannel> connect() override;

 private:
  void fetch_info();

  std::string endpoint_;
  RetryPolicy policy_;
  std::optional<std::size_t> input_dim_;
  Granularity granularity_;
};

struct TransferSet {
  Dims dims;
  Granularity granularity;
  Tensor inputs;                             // accepted queries, raw, in query order
  std::vector<PredictionResponse> responses;  // one per accepted input
  std::vector<std::size_t> pool_indices;     // pool row of each accepted input
  std::vector<std::size_t> rejected_indices;  // pool rows answered with 403
  std::size_t classes = 0;  // inferred or supplied; 0 = unknown (label mode)
  double alpha = 0.0;
  std::uint64_t pool_seed = 0;
  std::uint64_t query_seed = 0;

  std::size_t accepted() const { return responses.size(); }
  std::size_t queried() const { return responses.size() + rejected_indices.size(); }
};

// Shuffles the pool order with `seed` and queries the first min(budget, P)
// rows with up to `concurrency` requests in flight. Results are stored by
// position, so the set does not depend on arrival order.
TransferSet build_transfer_set(QueryTarget& target, const AttackerPool& pool, std::size_t budget,
                               std::uint64_t seed, std::size_t concurrency = 1);

// Class count visible in the responses (vector length, or 1 + the largest
// listed class for top-k); 0 for label-only sets.
std::size_t infer_classes(const TransferSet& set);

enum class TargetMode { soft, hard };
std::string_view to_string(TargetMode mode);
TargetMode parse_target_mode(std::string_view text);

// Probability rows for training; each sums to 1 within 1e-9.
Tensor responses_to_targets(const TransferSet& set, TargetMode mode, std::size_t classes);

std::vector<std::size_t> class_histogram(const TransferSet& set, std::size_t classes);

struct BalancingPolicy {
  enum class Mode { none, oversample_to_max, drop_low_confidence };
  Mode mode = Mode::none;
  double threshold = 0.0;

  // "none", "oversample", "drop:<t>".
  static BalancingPolicy parse(std::string_view text);
  std::string to_string() const;
  void validate() const;
};

// oversample: duplicates of randomly chosen (seeded) members of each
// non-empty minority bin are appended until every non-empty bin reaches the
// largest bin. drop: rows whose largest revealed probability is below the
// threshold are removed.
TransferSet balance(const TransferSet& set, const BalancingPolicy& policy, std::size_t classes,
                    std::uint64_t seed);

struct SurrogateConfig {
  ArchitectureSpec arch;
  TrainConfig train;
  TargetMode target_mode = TargetMode::soft;
  BalancingPolicy balance;
  std::uint64_t init_seed = 0;
};

// Balances, converts responses to targets and trains a fresh model. Inputs
// are normalized with the given statistics, by default the per-channel
// statistics of the transfer set itself (the attacker never sees the
// victim's); the model keeps them for later use on raw inputs.
Model train_surrogate(const TransferSet& set, const SurrogateConfig& config, std::size_t classes,
                      const std::optional<Normalization>& normalization = std::nullopt);

// Transfer-set file (XFB1 container, kind "transfer"); see docs/formats.md.
std::string serialize_transfer_set(const TransferSet& set);
TransferSet deserialize_transfer_set(std::string_view bytes);
void save_transfer_set(const std::string& path, const TransferSet& set);
TransferSet load_transfer_set(const std::string& path);

}  // namespace xfb
