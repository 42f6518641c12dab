#include "aegpo/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace aegpo {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_numel(shape)) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_to_string(shape));
  }
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) {
  return Tensor(Shape{rows, cols}, fill);
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1, 1}, std::vector<double>{v}); }

Tensor Tensor::identity(std::size_t n) {
  Tensor t = matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (shape.size() != 2) throw DimensionError("expected a matrix, got shape " + shape_to_string(shape));
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (shape.size() != 2) throw DimensionError("expected a matrix, got shape " + shape_to_string(shape));
  return shape[1];
}

double Tensor::item() const {
  if (data.size() != 1) throw DimensionError("item() on non-scalar shape " + shape_to_string(shape));
  return data[0];
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape) + " vs " +
                         shape_to_string(b.shape));
  }
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.shape.size() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_to_string(a.shape));
  }
}

}  // namespace aegpo
