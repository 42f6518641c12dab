#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aegpo {

/// Raised when operand shapes are incompatible. The message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles. Rank 2 is the working case; scalars are 1x1.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values);
  explicit Tensor(Shape s, double fill = 0.0);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor scalar(double v);
  static Tensor identity(std::size_t n);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols(), cols()};
  }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }

  double item() const;
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

/// Throws DimensionError unless both tensors have identical shapes.
void require_same_shape(const Tensor& a, const Tensor& b, const char* op);
void require_matrix(const Tensor& a, const char* op);

}  // namespace aegpo
