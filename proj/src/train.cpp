#include "xfb/train.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "xfb/error.hpp"
#include "xfb/nn.hpp"
#include "xfb/rng.hpp"

namespace xfb {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
constexpr std::size_t kEvalChunk = 256;

}  // namespace

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd_momentum";
}

OptimizerKind parse_optimizer(std::string_view text) {
  if (text == "adam") return OptimizerKind::adam;
  if (text == "sgd_momentum" || text == "sgd") return OptimizerKind::sgd_momentum;
  fail(ErrorKind::validation, "unknown optimizer '" + std::string(text) + "'");
}

void TrainConfig::validate() const {
  require(std::isfinite(initial_lr) && initial_lr > 0.0, ErrorKind::validation,
          "initial_lr must be positive");
  require(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0, ErrorKind::validation,
          "lr_decay_factor must be in (0, 1]");
  require(batch_size >= 1, ErrorKind::validation, "batch_size must be at least 1");
  require(momentum >= 0.0 && momentum < 1.0, ErrorKind::validation, "momentum must be in [0, 1)");
  require(weight_decay >= 0.0, ErrorKind::validation, "weight_decay must be nonnegative");
}

double TrainConfig::learning_rate(std::size_t epoch) const {
  if (lr_decay_every == 0) return initial_lr;
  return initial_lr * std::pow(lr_decay_factor, static_cast<double>(epoch / lr_decay_every));
}

TrainResult train_with_history(const Model& initial, const Tensor& inputs, const Tensor& targets,
                               const TrainConfig& config) {
  config.validate();
  initial.validate();
  require(inputs.rows() > 0, ErrorKind::validation, "training set is empty");
  require(targets.rows() == inputs.rows(), ErrorKind::dimension,
          "inputs and targets have different row counts");
  require(inputs.cols() == initial.input_size(), ErrorKind::dimension,
          "training inputs do not match the model input size");
  require(targets.cols() == initial.classes(), ErrorKind::dimension,
          "training targets do not match the model class count");

  TrainResult result{initial, {}};
  Model& model = result.model;
  const std::size_t n = inputs.rows();
  const std::size_t count = model.params.size();
  std::vector<double> velocity(count, 0.0);
  std::vector<double> second(count, 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffler(Rng::derive(config.seed, kShuffleStream));
  std::size_t adam_step = 0;
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double adam_eps = 1e-8;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffler.shuffle(std::span<std::size_t>(order));
    const double lr = config.learning_rate(epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Tensor xb = inputs.gather_rows(idx);
      const Tensor yb = targets.gather_rows(idx);
      LossGradient lg;
      try {
        lg = grad_params(model, xb, yb);
      } catch (const Error& e) {
        // Overflowing activations surface as a numeric error inside softmax.
        if (e.kind() != ErrorKind::numeric) throw;
        lg.loss = std::numeric_limits<double>::infinity();
      }
      if (!std::isfinite(lg.loss)) {
        fail(ErrorKind::divergence, "training diverged (non-finite loss) in epoch " +
                                        std::to_string(epoch + 1) + " of " +
                                        std::to_string(config.epochs));
      }
      loss_sum += lg.loss;
      ++batches;
      auto& g = lg.grad;
      if (config.weight_decay > 0.0) {
        for (std::size_t i = 0; i < count; ++i) g[i] += config.weight_decay * model.params[i];
      }
      if (config.optimizer == OptimizerKind::sgd_momentum) {
        for (std::size_t i = 0; i < count; ++i) {
          velocity[i] = config.momentum * velocity[i] + g[i];
          model.params[i] -= lr * velocity[i];
        }
      } else {
        ++adam_step;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(adam_step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(adam_step));
        for (std::size_t i = 0; i < count; ++i) {
          velocity[i] = beta1 * velocity[i] + (1.0 - beta1) * g[i];
          second[i] = beta2 * second[i] + (1.0 - beta2) * g[i] * g[i];
          model.params[i] -= lr * (velocity[i] / c1) / (std::sqrt(second[i] / c2) + adam_eps);
        }
      }
    }
    const double epoch_loss = loss_sum / static_cast<double>(batches);
    result.epoch_loss.push_back(epoch_loss);
    for (double p : model.params) {
      if (!std::isfinite(p)) {
        fail(ErrorKind::divergence, "training diverged (non-finite parameters) in epoch " +
                                        std::to_string(epoch + 1));
      }
    }
    ++model.trained_epochs;
  }
  return result;
}

Model train(const Model& initial, const Tensor& inputs, const Tensor& targets,
            const TrainConfig& config) {
  return train_with_history(initial, inputs, targets, config).model;
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  Tensor out({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < classes, ErrorKind::validation,
            "label " + std::to_string(labels[i]) + " out of range");
    out.at(i, labels[i]) = 1.0;
  }
  return out;
}

std::vector<std::size_t> predict_labels(const Model& model, const Tensor& inputs) {
  std::vector<std::size_t> labels;
  labels.reserve(inputs.rows());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < inputs.rows(); start += kEvalChunk) {
    const std::size_t stop = std::min(inputs.rows(), start + kEvalChunk);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = forward(model, inputs.gather_rows(idx));
    for (std::size_t r = 0; r < logits.rows(); ++r) labels.push_back(argmax(logits.row(r)));
  }
  return labels;
}

double accuracy(const Model& model, const Tensor& inputs, std::span<const std::size_t> labels) {
  require(inputs.rows() > 0, ErrorKind::validation, "accuracy over an empty dataset");
  require(labels.size() == inputs.rows(), ErrorKind::dimension, "label count mismatch");
  for (std::size_t label : labels) {
    require(label < model.classes(), ErrorKind::validation, "label out of range");
  }
  const auto predicted = predict_labels(model, inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace xfb
