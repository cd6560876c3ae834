#include "xfb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "xfb/error.hpp"

namespace xfb {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

void check_shape(const std::vector<std::size_t>& shape) {
  require(!shape.empty(), ErrorKind::dimension, "tensor shape must have at least one axis");
  // A zero leading axis is an empty batch; inner axes must be positive.
  for (std::size_t i = 1; i < shape.size(); ++i) {
    require(shape[i] > 0, ErrorKind::dimension, "tensor inner dimensions must be positive");
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  values_.assign(product(shape_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  check_shape(shape_);
  if (product(shape_) != values_.size()) {
    fail(ErrorKind::dimension, "tensor shape product " + std::to_string(product(shape_)) +
                                   " does not match value count " +
                                   std::to_string(values_.size()));
  }
}

std::size_t Tensor::cols() const {
  if (shape_.size() <= 1) return shape_.empty() ? 0 : 1;
  std::size_t c = 1;
  for (std::size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
  return c;
}

std::span<double> Tensor::row(std::size_t i) {
  const std::size_t c = cols();
  return std::span<double>(values_).subspan(i * c, c);
}

std::span<const double> Tensor::row(std::size_t i) const {
  const std::size_t c = cols();
  return std::span<const double>(values_).subspan(i * c, c);
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> shape = shape_;
  shape[0] = indices.size();
  Tensor out(shape);
  const std::size_t c = cols();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < rows(), ErrorKind::dimension, "gather_rows index out of range");
    std::copy_n(values_.begin() + static_cast<std::ptrdiff_t>(indices[i] * c), c,
                out.values_.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return out;
}

void Tensor::append_row(std::span<const double> row) {
  require(row.size() == cols(), ErrorKind::dimension, "append_row width mismatch");
  values_.insert(values_.end(), row.begin(), row.end());
  shape_[0] += 1;
}

}  // namespace xfb
