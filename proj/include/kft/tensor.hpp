#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace kft {

using Shape = std::vector<std::size_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dimension selector. Negative values count from the end, so `Axis::last()`
/// addresses the final dimension whatever the tensor order.
struct Axis {
  std::ptrdiff_t index = 0;

  constexpr Axis() = default;
  constexpr Axis(std::ptrdiff_t i) : index(i) {}  // NOLINT: implicit by design of call sites
  static constexpr Axis last() { return Axis{-1}; }

  /// Zero-based position for a tensor of the given order; throws ShapeError
  /// when out of range.
  std::size_t resolve(std::size_t order) const;
};

/// Row-major dense float64 array. Every extent is at least one; an order-0
/// tensor is not representable, scalars are shape {1}.
class DenseTensor {
 public:
  DenseTensor() : shape_{1}, data_(1, 0.0) {}
  explicit DenseTensor(Shape shape, double fill = 0.0);
  DenseTensor(Shape shape, std::vector<double> data);

  static DenseTensor scalar(double value) { return DenseTensor(Shape{1}, value); }
  static DenseTensor vector(std::vector<double> values);
  static DenseTensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static DenseTensor identity(std::size_t n);
  static DenseTensor from_eigen(const RowMatrix& m);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t order() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rows() const;  // order-2 only
  std::size_t cols() const;  // order-2 only

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  double& at(std::initializer_list<std::size_t> index);
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::span<const std::size_t> index);
  double at(std::span<const std::size_t> index) const;

  /// Matrix element access for order-2 tensors without bounds checks.
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  std::vector<std::size_t> strides() const;
  std::size_t flat_index(std::span<const std::size_t> index) const;

  DenseTensor reshaped(Shape shape) const;
  DenseTensor transposed() const;  // order-2 only

  Eigen::Map<const RowMatrix> as_matrix() const;
  Eigen::Map<RowMatrix> as_matrix();

  bool operator==(const DenseTensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Elementwise helpers (shapes must match exactly).
DenseTensor add(const DenseTensor& a, const DenseTensor& b);
DenseTensor subtract(const DenseTensor& a, const DenseTensor& b);
DenseTensor scaled(const DenseTensor& a, double factor);
DenseTensor squared(const DenseTensor& a);
double sum(const DenseTensor& a);
double frobenius_sq(const DenseTensor& a);
double max_abs_diff(const DenseTensor& a, const DenseTensor& b);
bool all_finite(const DenseTensor& a);

/// Matrix product of two order-2 tensors.
DenseTensor matmul(const DenseTensor& a, const DenseTensor& b);

}  // namespace kft
