#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace xfb {

// Dense row-major float64 array. The first dimension is the batch/row axis;
// everything after it is flattened into a row.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_.front(); }
  std::size_t cols() const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }
  const std::vector<double>& storage() const { return values_; }

  std::span<double> row(std::size_t i);
  std::span<const double> row(std::size_t i) const;

  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  bool all_finite() const;

  // Rows [indices...] gathered into a new tensor with the same row shape.
  Tensor gather_rows(std::span<const std::size_t> indices) const;
  void append_row(std::span<const double> row);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

}  // namespace xfb
