#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "xfb/model.hpp"
#include "xfb/tensor.hpp"

namespace xfb {

// Logits for a batch of normalized inputs (B x n) -> (B x m).
Tensor forward(const Model& model, const Tensor& batch);

// Activations feeding the output layer (post-ReLU of the last hidden layer).
Tensor penultimate(const Model& model, const Tensor& batch);

// Softmax of logits / temperature, max-subtracted.
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);
Tensor softmax_rows(const Tensor& logits, double temperature = 1.0);

// Lowest index wins on ties.
std::size_t argmax(std::span<const double> values);

// Mean over the batch of -sum_j t_j log softmax(z)_j. Target rows must be
// nonnegative and sum to 1 within 1e-6; zero-target terms are skipped, so a
// one-hot row yields exactly -log p_true.
double loss_soft_ce(const Tensor& logits, const Tensor& targets);

struct LossGradient {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d params, same layout as Model::params
};

LossGradient grad_params(const Model& model, const Tensor& batch, const Tensor& targets);

// Which softmax output grad_input differentiates.
class OutputSelector {
 public:
  static OutputSelector predicted() { return OutputSelector(kPredicted); }
  static OutputSelector index(std::size_t cls) { return OutputSelector(cls); }

  bool is_predicted() const { return cls_ == kPredicted; }
  std::size_t class_index() const { return cls_; }

 private:
  static constexpr std::size_t kPredicted = std::numeric_limits<std::size_t>::max();
  explicit OutputSelector(std::size_t cls) : cls_(cls) {}
  std::size_t cls_;
};

// Gradient of log softmax(F(x) / T)_c with respect to the (normalized) input x.
std::vector<double> grad_input(const Model& model, std::span<const double> x,
                               OutputSelector selector, double temperature = 1.0);

}  // namespace xfb
