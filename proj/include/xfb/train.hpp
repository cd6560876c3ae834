#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "xfb/model.hpp"
#include "xfb/tensor.hpp"

namespace xfb {

enum class OptimizerKind { sgd_momentum, adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view text);

// Learning rate at epoch e is initial_lr * lr_decay_factor^floor(e / lr_decay_every);
// lr_decay_every == 0 disables decay. Weight decay is an L2 term added to the
// gradient of every parameter.
struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double initial_lr = 0.01;
  double lr_decay_factor = 0.1;
  std::size_t lr_decay_every = 0;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  double learning_rate(std::size_t epoch) const;
};

struct TrainResult {
  Model model;
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

// Minibatch training on probability-row targets. Epoch order comes from a
// Rng stream derived from config.seed, so the result is a pure function of
// (model, data, config).
TrainResult train_with_history(const Model& initial, const Tensor& inputs, const Tensor& targets,
                               const TrainConfig& config);
Model train(const Model& initial, const Tensor& inputs, const Tensor& targets,
            const TrainConfig& config);

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes);

std::vector<std::size_t> predict_labels(const Model& model, const Tensor& inputs);

// Fraction of rows whose argmax matches the label.
double accuracy(const Model& model, const Tensor& inputs, std::span<const std::size_t> labels);

}  // namespace xfb
