#include "xfb/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "xfb/error.hpp"

namespace xfb {

namespace {

// C[M x N] += A[M x K] * B[K x N]
void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c,
             std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M x N] += A[K x M]^T * B[K x N]
void gemm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c,
             std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* __restrict brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* __restrict crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transpose(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

// Patch matrix [H*W x K*K*C] for "same" zero padding, patch order (ky, kx, c).
void im2col(const double* in, const Dims& dims, std::size_t kernel, double* col) {
  const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto h = static_cast<std::ptrdiff_t>(dims.height);
  const auto w = static_cast<std::ptrdiff_t>(dims.width);
  const std::size_t c = dims.channels;
  const std::size_t patch = kernel * kernel * c;
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double* dst = col + static_cast<std::size_t>(y * w + x) * patch;
      for (std::size_t ky = 0; ky < kernel; ++ky) {
        const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(ky) - pad;
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const std::ptrdiff_t sx = x + static_cast<std::ptrdiff_t>(kx) - pad;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
            std::fill_n(dst, c, 0.0);
          } else {
            std::copy_n(in + static_cast<std::size_t>(sy * w + sx) * c, c, dst);
          }
          dst += c;
        }
      }
    }
  }
}

void col2im_add(const double* col, const Dims& dims, std::size_t kernel, double* in_grad) {
  const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto h = static_cast<std::ptrdiff_t>(dims.height);
  const auto w = static_cast<std::ptrdiff_t>(dims.width);
  const std::size_t c = dims.channels;
  const std::size_t patch = kernel * kernel * c;
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      const double* src = col + static_cast<std::size_t>(y * w + x) * patch;
      for (std::size_t ky = 0; ky < kernel; ++ky) {
        const std::ptrdiff_t sy = y + static_cast<std::ptrdiff_t>(ky) - pad;
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const std::ptrdiff_t sx = x + static_cast<std::ptrdiff_t>(kx) - pad;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
            double* dst = in_grad + static_cast<std::size_t>(sy * w + sx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
          }
          src += c;
        }
      }
    }
  }
}

// Forward pass that keeps every layer's output. acts[0] is the input batch,
// acts[i + 1] the (post-ReLU) output of layer i; the last entry is the logits.
class Pass {
 public:
  Pass(const Model& model, const Tensor& batch) : model_(model), layers_(layout(model.arch)) {
    require(batch.cols() == model.input_size(), ErrorKind::dimension,
            "batch row size " + std::to_string(batch.cols()) + " does not match model input " +
                std::to_string(model.input_size()));
    require(model.params.size() == param_count(model.arch), ErrorKind::dimension,
            "model parameter vector does not match its architecture");
    batch_ = batch.rows();
    acts_.reserve(layers_.size() + 1);
    acts_.push_back(batch.storage());
  }

  void run(std::size_t stop_after = static_cast<std::size_t>(-1)) {
    for (std::size_t li = 0; li < layers_.size() && li < stop_after; ++li) {
      const auto& l = layers_[li];
      const double* weights = model_.params.data() + l.weight_offset;
      const double* bias = model_.params.data() + l.bias_offset;
      const std::vector<double>& in = acts_.back();
      std::vector<double> out(batch_ * l.out_size());
      if (l.conv) {
        const std::size_t pixels = l.in.height * l.in.width;
        const std::size_t patch = l.kernel * l.kernel * l.in.channels;
        const std::size_t filters = l.out.channels;
        std::vector<double> col(pixels * patch);
        for (std::size_t b = 0; b < batch_; ++b) {
          double* dst = out.data() + b * l.out_size();
          for (std::size_t p = 0; p < pixels; ++p) std::copy_n(bias, filters, dst + p * filters);
          im2col(in.data() + b * l.in_size(), l.in, l.kernel, col.data());
          gemm_nn(col.data(), weights, dst, pixels, filters, patch);
        }
      } else {
        const std::size_t width = l.out_size();
        for (std::size_t b = 0; b < batch_; ++b) std::copy_n(bias, width, out.data() + b * width);
        gemm_nn(in.data(), weights, out.data(), batch_, width, l.in_size());
      }
      if (l.relu) {
        for (double& v : out) v = v > 0.0 ? v : 0.0;
      }
      acts_.push_back(std::move(out));
    }
  }

  // Backpropagate d(loss)/d(logits). Accumulates into param_grad when given
  // and returns d(loss)/d(input) when want_input is set.
  std::vector<double> backward(std::vector<double> grad_out, std::vector<double>* param_grad,
                               bool want_input) {
    for (std::size_t li = layers_.size(); li-- > 0;) {
      const auto& l = layers_[li];
      const std::vector<double>& in = acts_[li];
      const std::vector<double>& out = acts_[li + 1];
      if (l.relu) {
        for (std::size_t i = 0; i < grad_out.size(); ++i) {
          if (out[i] <= 0.0) grad_out[i] = 0.0;
        }
      }
      const double* weights = model_.params.data() + l.weight_offset;
      const bool need_in = want_input || li > 0;
      std::vector<double> grad_in;
      if (need_in) grad_in.assign(batch_ * l.in_size(), 0.0);
      if (l.conv) {
        const std::size_t pixels = l.in.height * l.in.width;
        const std::size_t patch = l.kernel * l.kernel * l.in.channels;
        const std::size_t filters = l.out.channels;
        std::vector<double> col(pixels * patch);
        std::vector<double> col_grad;
        std::vector<double> weights_t;
        if (need_in) {
          weights_t = transpose(weights, patch, filters);
          col_grad.resize(pixels * patch);
        }
        for (std::size_t b = 0; b < batch_; ++b) {
          const double* g = grad_out.data() + b * l.out_size();
          if (param_grad) {
            im2col(in.data() + b * l.in_size(), l.in, l.kernel, col.data());
            gemm_tn(col.data(), g, param_grad->data() + l.weight_offset, patch, filters, pixels);
            double* gb = param_grad->data() + l.bias_offset;
            for (std::size_t p = 0; p < pixels; ++p) {
              for (std::size_t f = 0; f < filters; ++f) gb[f] += g[p * filters + f];
            }
          }
          if (need_in) {
            std::fill(col_grad.begin(), col_grad.end(), 0.0);
            gemm_nn(g, weights_t.data(), col_grad.data(), pixels, patch, filters);
            col2im_add(col_grad.data(), l.in, l.kernel, grad_in.data() + b * l.in_size());
          }
        }
      } else {
        const std::size_t in_size = l.in_size();
        const std::size_t width = l.out_size();
        if (param_grad) {
          gemm_tn(in.data(), grad_out.data(), param_grad->data() + l.weight_offset, in_size, width,
                  batch_);
          double* gb = param_grad->data() + l.bias_offset;
          for (std::size_t b = 0; b < batch_; ++b) {
            for (std::size_t j = 0; j < width; ++j) gb[j] += grad_out[b * width + j];
          }
        }
        if (need_in) {
          const auto weights_t = transpose(weights, in_size, width);
          gemm_nn(grad_out.data(), weights_t.data(), grad_in.data(), batch_, in_size, width);
        }
      }
      grad_out = std::move(grad_in);
    }
    return grad_out;
  }

  const std::vector<double>& logits() const { return acts_.back(); }
  const std::vector<double>& activation(std::size_t i) const { return acts_[i]; }
  std::size_t batch() const { return batch_; }
  std::size_t layer_count() const { return layers_.size(); }
  const LayerLayout& layer(std::size_t i) const { return layers_[i]; }

 private:
  const Model& model_;
  std::vector<LayerLayout> layers_;
  std::size_t batch_ = 0;
  std::vector<std::vector<double>> acts_;
};

void check_temperature(double temperature) {
  require(std::isfinite(temperature) && temperature > 0.0, ErrorKind::parameter,
          "softmax temperature must be positive");
}

// log softmax(z / T) into out.
void log_softmax(std::span<const double> logits, double temperature, std::span<double> out) {
  double top = logits[0] / temperature;
  for (double z : logits) top = std::max(top, z / temperature);
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z / temperature - top);
  const double log_sum = std::log(sum);
  for (std::size_t j = 0; j < logits.size(); ++j) out[j] = logits[j] / temperature - top - log_sum;
}

void check_targets(const Tensor& logits, const Tensor& targets) {
  require(targets.rows() == logits.rows() && targets.cols() == logits.cols(),
          ErrorKind::dimension, "target shape does not match logits");
  for (std::size_t r = 0; r < targets.rows(); ++r) {
    double sum = 0.0;
    for (double t : targets.row(r)) {
      require(std::isfinite(t) && t >= 0.0, ErrorKind::validation,
              "target row " + std::to_string(r) + " has a negative or non-finite entry");
      sum += t;
    }
    require(std::abs(sum - 1.0) <= 1e-6, ErrorKind::validation,
            "target row " + std::to_string(r) + " sums to " + std::to_string(sum) + ", not 1");
  }
}

}  // namespace

Tensor forward(const Model& model, const Tensor& batch) {
  Pass pass(model, batch);
  pass.run();
  return Tensor({batch.rows(), model.classes()}, pass.logits());
}

Tensor penultimate(const Model& model, const Tensor& batch) {
  Pass pass(model, batch);
  pass.run(pass.layer_count() - 1);
  const auto& last = pass.layer(pass.layer_count() - 1);
  return Tensor({batch.rows(), last.in_size()}, pass.activation(pass.layer_count() - 1));
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  check_temperature(temperature);
  require(!logits.empty(), ErrorKind::dimension, "softmax of an empty vector");
  std::vector<double> out(logits.size());
  double top = logits[0] / temperature;
  for (double z : logits) {
    require(std::isfinite(z), ErrorKind::numeric, "softmax input is not finite");
    top = std::max(top, z / temperature);
  }
  double sum = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out[j] = std::exp(logits[j] / temperature - top);
    sum += out[j];
  }
  for (double& p : out) p /= sum;
  return out;
}

Tensor softmax_rows(const Tensor& logits, double temperature) {
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto probs = softmax(logits.row(r), temperature);
    std::copy(probs.begin(), probs.end(), out.row(r).begin());
  }
  return out;
}

std::size_t argmax(std::span<const double> values) {
  require(!values.empty(), ErrorKind::dimension, "argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t j = 1; j < values.size(); ++j) {
    if (values[j] > values[best]) best = j;
  }
  return best;
}

double loss_soft_ce(const Tensor& logits, const Tensor& targets) {
  check_targets(logits, targets);
  require(logits.rows() > 0, ErrorKind::validation, "loss over an empty batch");
  std::vector<double> logp(logits.cols());
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    log_softmax(logits.row(r), 1.0, logp);
    const auto t = targets.row(r);
    double row_loss = 0.0;
    for (std::size_t j = 0; j < logp.size(); ++j) {
      if (t[j] != 0.0) row_loss -= t[j] * logp[j];
    }
    total += row_loss;
  }
  return total / static_cast<double>(logits.rows());
}

LossGradient grad_params(const Model& model, const Tensor& batch, const Tensor& targets) {
  Pass pass(model, batch);
  pass.run();
  const std::size_t m = model.classes();
  const Tensor logits({batch.rows(), m}, pass.logits());
  LossGradient result;
  result.loss = loss_soft_ce(logits, targets);

  const double inv_batch = 1.0 / static_cast<double>(batch.rows());
  std::vector<double> grad_logits(batch.rows() * m);
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const auto probs = softmax(logits.row(r));
    const auto t = targets.row(r);
    for (std::size_t j = 0; j < m; ++j) grad_logits[r * m + j] = (probs[j] - t[j]) * inv_batch;
  }
  result.grad.assign(model.params.size(), 0.0);
  pass.backward(std::move(grad_logits), &result.grad, false);
  return result;
}

std::vector<double> grad_input(const Model& model, std::span<const double> x,
                               OutputSelector selector, double temperature) {
  check_temperature(temperature);
  const Tensor batch({1, x.size()}, std::vector<double>(x.begin(), x.end()));
  Pass pass(model, batch);
  pass.run();
  const auto& logits = pass.logits();
  const std::size_t cls = selector.is_predicted() ? argmax(logits) : selector.class_index();
  require(cls < model.classes(), ErrorKind::parameter,
          "output selector " + std::to_string(cls) + " out of range for " +
              std::to_string(model.classes()) + " classes");
  const auto probs = softmax(logits, temperature);
  std::vector<double> grad_logits(model.classes());
  for (std::size_t j = 0; j < grad_logits.size(); ++j) {
    grad_logits[j] = ((j == cls ? 1.0 : 0.0) - probs[j]) / temperature;
  }
  return pass.backward(std::move(grad_logits), nullptr, true);
}

}  // namespace xfb
