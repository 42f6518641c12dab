#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "aegpo/tensor.hpp"

namespace aegpo {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  const Tensor& value() const;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Raised for misuse of the tape: foreign nodes, non-scalar losses, repeated backward.
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Reverse-mode recording of primitive operations.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order. Constants never receive gradients; parameters are the
/// trainable leaves. A tape is single-threaded: use one per worker.
class Tape {
 public:
  enum class Op : std::uint8_t {
    kLeaf,
    kMatMul,
    kMatMulBT,
    kAdd,
    kSub,
    kMul,
    kAddRow,
    kScale,
    kAddScalar,
    kTanh,
    kExp,
    kLog,
    kSquare,
    kSoftmaxRows,
    kSum,
    kMean,
    kClamp,
    kMinimum,
    kRow,
    kPick,
    kConcat,
    kGaussianLogProb,
  };

  struct Node {
    Op op = Op::kLeaf;
    Tensor value;
    std::int32_t in0 = -1;
    std::int32_t in1 = -1;
    std::vector<std::int32_t> extra;
    double a = 0.0;
    double b = 0.0;
    std::size_t index0 = 0;
    std::size_t index1 = 0;
    bool requires_grad = false;
    bool trainable = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t);
  Var parameter(Tensor t);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  /// Gradient of the last backward() loss with respect to v (zeros if v did not contribute).
  Tensor grad(Var v) const;

  /// Reverse pass from a scalar loss. Calling twice without zero_grad() throws.
  void backward(Var loss);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  const Node& node(Var v) const;

  // Used by the free-function ops below.
  Var push(Node node);
  void check(Var v, const char* op) const;

 private:
  void accumulate(std::int32_t id, std::span<const double> g, double scale = 1.0);
  std::vector<double>& grad_buffer(std::int32_t id);
  void backprop_node(std::int32_t id);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Primitive operations. Each validates shapes and records itself on the operands' tape.
Var matmul(Var a, Var b);
/// a * b^T without materializing the transpose.
Var matmul_bt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// Adds a 1xn row to every row of an mxn matrix.
Var add_row(Var a, Var row);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
/// Row-wise softmax of scale * x, stabilized by subtracting each row maximum.
Var softmax_rows(Var x, double scale);
Var sum(Var a);
Var mean(Var a);
Var clamp(Var a, double lo, double hi);
/// Elementwise minimum; ties route the gradient to the first operand.
Var minimum(Var a, Var b);
Var row(Var a, std::size_t r);
Var pick(Var a, std::size_t r, std::size_t c);
/// Stacks scalar nodes into an nx1 column.
Var concat_scalars(std::span<const Var> scalars);
/// Diagonal-Gaussian log density of the constant point x under N(mean, std^2 I).
Var gaussian_log_prob(Var mean, Var x, double std);

// Value-level helpers shared with the differentiable path so both agree bit-for-bit.
Tensor softmax_rows_value(const Tensor& x, double scale);
double gaussian_log_density(std::span<const double> mean, std::span<const double> x, double std);

}  // namespace aegpo
