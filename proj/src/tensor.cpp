#include "kft/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "kft/errors.hpp"

namespace kft {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t Axis::resolve(std::size_t order) const {
  const auto n = static_cast<std::ptrdiff_t>(order);
  const std::ptrdiff_t pos = index < 0 ? n + index : index;
  if (pos < 0 || pos >= n) {
    throw ShapeError("axis " + std::to_string(index) + " out of range for order " +
                     std::to_string(order));
  }
  return static_cast<std::size_t>(pos);
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_string(shape));
  }
}

void require_same_shape(const DenseTensor& a, const DenseTensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
}

}  // namespace

DenseTensor::DenseTensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), fill);
}

DenseTensor::DenseTensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
  }
}

DenseTensor DenseTensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return DenseTensor(Shape{n}, std::move(values));
}

DenseTensor DenseTensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return DenseTensor(Shape{r, c}, std::move(data));
}

DenseTensor DenseTensor::identity(std::size_t n) {
  DenseTensor out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

DenseTensor DenseTensor::from_eigen(const RowMatrix& m) {
  DenseTensor out(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  out.as_matrix() = m;
  return out;
}

std::size_t DenseTensor::rows() const {
  if (order() != 2) throw ShapeError("rows() requires an order-2 tensor");
  return shape_[0];
}

std::size_t DenseTensor::cols() const {
  if (order() != 2) throw ShapeError("cols() requires an order-2 tensor");
  return shape_[1];
}

std::vector<std::size_t> DenseTensor::strides() const {
  std::vector<std::size_t> s(shape_.size(), 1);
  for (std::size_t i = shape_.size(); i-- > 1;) s[i - 1] = s[i] * shape_[i];
  return s;
}

std::size_t DenseTensor::flat_index(std::span<const std::size_t> index) const {
  if (index.size() != shape_.size()) throw ShapeError("index arity does not match tensor order");
  std::size_t flat = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= shape_[i]) throw ShapeError("index out of range");
    flat = flat * shape_[i] + index[i];
  }
  return flat;
}

double& DenseTensor::at(std::initializer_list<std::size_t> index) {
  return data_[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
}
double DenseTensor::at(std::initializer_list<std::size_t> index) const {
  return data_[flat_index(std::span<const std::size_t>(index.begin(), index.size()))];
}
double& DenseTensor::at(std::span<const std::size_t> index) { return data_[flat_index(index)]; }
double DenseTensor::at(std::span<const std::size_t> index) const { return data_[flat_index(index)]; }

DenseTensor DenseTensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return DenseTensor(std::move(shape), data_);
}

DenseTensor DenseTensor::transposed() const {
  const std::size_t r = rows(), c = cols();
  DenseTensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = (*this)(i, j);
  return out;
}

Eigen::Map<const RowMatrix> DenseTensor::as_matrix() const {
  return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

Eigen::Map<RowMatrix> DenseTensor::as_matrix() {
  return {data_.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

DenseTensor add(const DenseTensor& a, const DenseTensor& b) {
  require_same_shape(a, b, "add");
  DenseTensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

DenseTensor subtract(const DenseTensor& a, const DenseTensor& b) {
  require_same_shape(a, b, "subtract");
  DenseTensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

DenseTensor scaled(const DenseTensor& a, double factor) {
  DenseTensor out = a;
  for (auto& v : out.data()) v *= factor;
  return out;
}

DenseTensor squared(const DenseTensor& a) {
  DenseTensor out = a;
  for (auto& v : out.data()) v *= v;
  return out;
}

double sum(const DenseTensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double frobenius_sq(const DenseTensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

double max_abs_diff(const DenseTensor& a, const DenseTensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const DenseTensor& a) {
  for (double v : a.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

DenseTensor matmul(const DenseTensor& a, const DenseTensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner extents differ " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  DenseTensor out(Shape{a.rows(), b.cols()});
  out.as_matrix().noalias() = a.as_matrix() * b.as_matrix();
  return out;
}

}  // namespace kft
