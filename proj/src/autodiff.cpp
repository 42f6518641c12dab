#include "aegpo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace aegpo {

namespace {

Tape& same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw TapeError(std::string(op) + ": operands belong to different tapes");
  }
  a.tape->check(a, op);
  a.tape->check(b, op);
  return *a.tape;
}

Tape& tape_of(Var a, const char* op) {
  if (a.tape == nullptr) throw TapeError(std::string(op) + ": detached node");
  a.tape->check(a, op);
  return *a.tape;
}

Tape::Node unary(Tape& t, Tape::Op op, Var a, Tensor value) {
  Tape::Node n;
  n.op = op;
  n.value = std::move(value);
  n.in0 = a.id;
  n.requires_grad = t.requires_grad(a);
  return n;
}

Tape::Node binary(Tape& t, Tape::Op op, Var a, Var b, Tensor value) {
  Tape::Node n;
  n.op = op;
  n.value = std::move(value);
  n.in0 = a.id;
  n.in1 = b.id;
  n.requires_grad = t.requires_grad(a) || t.requires_grad(b);
  return n;
}

template <typename F>
Tensor map_values(const Tensor& x, F f) {
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = f(x.data[i]);
  return out;
}

}  // namespace

const Tensor& Var::value() const {
  if (tape == nullptr) throw TapeError("value(): detached node");
  return tape->value(*this);
}

Var Tape::constant(Tensor t) {
  Node n;
  n.value = std::move(t);
  return push(std::move(n));
}

Var Tape::parameter(Tensor t) {
  Node n;
  n.value = std::move(t);
  n.requires_grad = true;
  n.trainable = true;
  return push(std::move(n));
}

Var Tape::push(Node node) {
  node.value.grad.reset();
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

void Tape::check(Var v, const char* op) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw TapeError(std::string(op) + ": node is not on this tape");
  }
}

const Tape::Node& Tape::node(Var v) const {
  check(v, "node");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  Tensor g(n.value.shape);
  if (n.value.grad) g.data = *n.value.grad;
  return g;
}

std::vector<double>& Tape::grad_buffer(std::int32_t id) {
  auto& g = nodes_[id].value.grad;
  if (!g) g.emplace(nodes_[id].value.data.size(), 0.0);
  return *g;
}

void Tape::accumulate(std::int32_t id, std::span<const double> g, double s) {
  if (id < 0 || !nodes_[id].requires_grad) return;
  auto& buf = grad_buffer(id);
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += s * g[i];
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.value.grad.reset();
  backward_done_ = false;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw TapeError("backward: loss is a detached node or belongs to another tape");
  check(loss, "backward");
  if (nodes_[loss.id].value.numel() != 1) {
    throw TapeError("backward: loss must be scalar, got shape " +
                    shape_to_string(nodes_[loss.id].value.shape));
  }
  if (backward_done_) throw TapeError("backward: called twice without zero_grad()");
  backward_done_ = true;

  for (auto& n : nodes_) {
    if (n.trainable) grad_buffer(static_cast<std::int32_t>(&n - nodes_.data()));
  }
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id)[0] = 1.0;
  for (std::int32_t id = loss.id; id >= 0; --id) {
    if (nodes_[id].requires_grad && nodes_[id].value.grad && nodes_[id].op != Op::kLeaf) {
      backprop_node(id);
    }
  }
}

void Tape::backprop_node(std::int32_t id) {
  // Copy the upstream gradient: accumulate() may grow buffers of other nodes, never this one,
  // but keeping a local copy makes the aliasing rules obvious.
  const std::vector<double> dy = *nodes_[id].value.grad;
  const Node& n = nodes_[id];
  const Tensor& y = n.value;

  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kMatMul: {
      const Tensor& a = nodes_[n.in0].value;
      const Tensor& b = nodes_[n.in1].value;
      const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
      if (nodes_[n.in0].requires_grad) {
        std::vector<double> da(m * k, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j) {
            const double g = dy[i * p + j];
            for (std::size_t l = 0; l < k; ++l) da[i * k + l] += g * b.data[l * p + j];
          }
        accumulate(n.in0, da);
      }
      if (nodes_[n.in1].requires_grad) {
        std::vector<double> db(k * p, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t l = 0; l < k; ++l) {
            const double av = a.data[i * k + l];
            for (std::size_t j = 0; j < p; ++j) db[l * p + j] += av * dy[i * p + j];
          }
        accumulate(n.in1, db);
      }
      break;
    }
    case Op::kMatMulBT: {
      const Tensor& a = nodes_[n.in0].value;
      const Tensor& b = nodes_[n.in1].value;
      const std::size_t m = a.rows(), k = a.cols(), p = b.rows();
      if (nodes_[n.in0].requires_grad) {
        std::vector<double> da(m * k, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j) {
            const double g = dy[i * p + j];
            for (std::size_t l = 0; l < k; ++l) da[i * k + l] += g * b.data[j * k + l];
          }
        accumulate(n.in0, da);
      }
      if (nodes_[n.in1].requires_grad) {
        std::vector<double> db(p * k, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j) {
            const double g = dy[i * p + j];
            for (std::size_t l = 0; l < k; ++l) db[j * k + l] += g * a.data[i * k + l];
          }
        accumulate(n.in1, db);
      }
      break;
    }
    case Op::kAdd:
      accumulate(n.in0, dy);
      accumulate(n.in1, dy);
      break;
    case Op::kSub:
      accumulate(n.in0, dy);
      accumulate(n.in1, dy, -1.0);
      break;
    case Op::kMul: {
      const Tensor& a = nodes_[n.in0].value;
      const Tensor& b = nodes_[n.in1].value;
      std::vector<double> g(dy.size());
      if (nodes_[n.in0].requires_grad) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = dy[i] * b.data[i];
        accumulate(n.in0, g);
      }
      if (nodes_[n.in1].requires_grad) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = dy[i] * a.data[i];
        accumulate(n.in1, g);
      }
      break;
    }
    case Op::kAddRow: {
      accumulate(n.in0, dy);
      if (nodes_[n.in1].requires_grad) {
        const std::size_t m = y.rows(), c = y.cols();
        std::vector<double> dr(c, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j) dr[j] += dy[i * c + j];
        accumulate(n.in1, dr);
      }
      break;
    }
    case Op::kScale:
      accumulate(n.in0, dy, n.a);
      break;
    case Op::kAddScalar:
      accumulate(n.in0, dy);
      break;
    case Op::kTanh: {
      std::vector<double> g(dy.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = dy[i] * (1.0 - y.data[i] * y.data[i]);
      accumulate(n.in0, g);
      break;
    }
    case Op::kExp: {
      std::vector<double> g(dy.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = dy[i] * y.data[i];
      accumulate(n.in0, g);
      break;
    }
    case Op::kLog: {
      const Tensor& a = nodes_[n.in0].value;
      std::vector<double> g(dy.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = dy[i] / a.data[i];
      accumulate(n.in0, g);
      break;
    }
    case Op::kSquare: {
      const Tensor& a = nodes_[n.in0].value;
      std::vector<double> g(dy.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * a.data[i] * dy[i];
      accumulate(n.in0, g);
      break;
    }
    case Op::kSoftmaxRows: {
      const std::size_t m = y.rows(), c = y.cols();
      std::vector<double> g(dy.size());
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += dy[i * c + j] * y.data[i * c + j];
        for (std::size_t j = 0; j < c; ++j)
          g[i * c + j] = n.a * y.data[i * c + j] * (dy[i * c + j] - dot);
      }
      accumulate(n.in0, g);
      break;
    }
    case Op::kSum: {
      std::vector<double> g(nodes_[n.in0].value.numel(), dy[0]);
      accumulate(n.in0, g);
      break;
    }
    case Op::kMean: {
      const std::size_t count = nodes_[n.in0].value.numel();
      std::vector<double> g(count, dy[0] / static_cast<double>(count));
      accumulate(n.in0, g);
      break;
    }
    case Op::kClamp: {
      const Tensor& a = nodes_[n.in0].value;
      std::vector<double> g(dy.size());
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = (a.data[i] >= n.a && a.data[i] <= n.b) ? dy[i] : 0.0;
      accumulate(n.in0, g);
      break;
    }
    case Op::kMinimum: {
      const Tensor& a = nodes_[n.in0].value;
      const Tensor& b = nodes_[n.in1].value;
      std::vector<double> ga(dy.size(), 0.0), gb(dy.size(), 0.0);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        if (a.data[i] <= b.data[i]) ga[i] = dy[i];
        else gb[i] = dy[i];
      }
      accumulate(n.in0, ga);
      accumulate(n.in1, gb);
      break;
    }
    case Op::kRow: {
      const Tensor& a = nodes_[n.in0].value;
      std::vector<double> g(a.numel(), 0.0);
      const std::size_t c = a.cols();
      for (std::size_t j = 0; j < c; ++j) g[n.index0 * c + j] = dy[j];
      accumulate(n.in0, g);
      break;
    }
    case Op::kPick: {
      const Tensor& a = nodes_[n.in0].value;
      std::vector<double> g(a.numel(), 0.0);
      g[n.index0 * a.cols() + n.index1] = dy[0];
      accumulate(n.in0, g);
      break;
    }
    case Op::kConcat: {
      for (std::size_t i = 0; i < n.extra.size(); ++i) {
        const double gi = dy[i];
        accumulate(n.extra[i], std::span<const double>(&gi, 1));
      }
      break;
    }
    case Op::kGaussianLogProb: {
      const Tensor& mu = nodes_[n.in0].value;
      const Tensor& x = nodes_[n.in1].value;
      const double inv_var = 1.0 / (n.a * n.a);
      std::vector<double> g(mu.numel());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = dy[0] * (x.data[i] - mu.data[i]) * inv_var;
      accumulate(n.in0, g);
      break;
    }
  }
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  require_matrix(x, "matmul");
  require_matrix(y, "matmul");
  if (x.cols() != y.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_to_string(x.shape) + " x " +
                         shape_to_string(y.shape));
  }
  const std::size_t m = x.rows(), k = x.cols(), p = y.cols();
  Tensor out = Tensor::matrix(m, p);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double xv = x.data[i * k + l];
      for (std::size_t j = 0; j < p; ++j) out.data[i * p + j] += xv * y.data[l * p + j];
    }
  return t.push(binary(t, Tape::Op::kMatMul, a, b, std::move(out)));
}

Var matmul_bt(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul_bt");
  const Tensor& x = t.value(a);
  const Tensor& y = t.value(b);
  require_matrix(x, "matmul_bt");
  require_matrix(y, "matmul_bt");
  if (x.cols() != y.cols()) {
    throw DimensionError("matmul_bt: inner dimensions differ, " + shape_to_string(x.shape) + " x " +
                         shape_to_string(y.shape) + "^T");
  }
  const std::size_t m = x.rows(), k = x.cols(), p = y.rows();
  Tensor out = Tensor::matrix(m, p);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += x.data[i * k + l] * y.data[j * k + l];
      out.data[i * p + j] = acc;
    }
  return t.push(binary(t, Tape::Op::kMatMulBT, a, b, std::move(out)));
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  require_same_shape(t.value(a), t.value(b), "add");
  Tensor out = t.value(a);
  const Tensor& y = t.value(b);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += y.data[i];
  return t.push(binary(t, Tape::Op::kAdd, a, b, std::move(out)));
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape(t.value(a), t.value(b), "sub");
  Tensor out = t.value(a);
  const Tensor& y = t.value(b);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= y.data[i];
  return t.push(binary(t, Tape::Op::kSub, a, b, std::move(out)));
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  require_same_shape(t.value(a), t.value(b), "mul");
  Tensor out = t.value(a);
  const Tensor& y = t.value(b);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= y.data[i];
  return t.push(binary(t, Tape::Op::kMul, a, b, std::move(out)));
}

Var add_row(Var a, Var r) {
  Tape& t = same_tape(a, r, "add_row");
  const Tensor& x = t.value(a);
  const Tensor& v = t.value(r);
  require_matrix(x, "add_row");
  require_matrix(v, "add_row");
  if (v.rows() != 1 || v.cols() != x.cols()) {
    throw DimensionError("add_row: row shape " + shape_to_string(v.shape) + " does not broadcast over " +
                         shape_to_string(x.shape));
  }
  Tensor out = x;
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] += v.data[j];
  return t.push(binary(t, Tape::Op::kAddRow, a, r, std::move(out)));
}

Var scale(Var a, double c) {
  Tape& t = tape_of(a, "scale");
  auto n = unary(t, Tape::Op::kScale, a, map_values(t.value(a), [c](double v) { return c * v; }));
  n.a = c;
  return t.push(std::move(n));
}

Var add_scalar(Var a, double c) {
  Tape& t = tape_of(a, "add_scalar");
  return t.push(unary(t, Tape::Op::kAddScalar, a, map_values(t.value(a), [c](double v) { return v + c; })));
}

Var tanh(Var a) {
  Tape& t = tape_of(a, "tanh");
  return t.push(unary(t, Tape::Op::kTanh, a, map_values(t.value(a), [](double v) { return std::tanh(v); })));
}

Var exp(Var a) {
  Tape& t = tape_of(a, "exp");
  return t.push(unary(t, Tape::Op::kExp, a, map_values(t.value(a), [](double v) { return std::exp(v); })));
}

Var log(Var a) {
  Tape& t = tape_of(a, "log");
  return t.push(unary(t, Tape::Op::kLog, a, map_values(t.value(a), [](double v) { return std::log(v); })));
}

Var square(Var a) {
  Tape& t = tape_of(a, "square");
  return t.push(unary(t, Tape::Op::kSquare, a, map_values(t.value(a), [](double v) { return v * v; })));
}

Tensor softmax_rows_value(const Tensor& x, double scale) {
  require_matrix(x, "softmax_rows");
  if (x.cols() == 0) throw DimensionError("softmax_rows: need at least one column");
  if (!(scale > 0.0)) throw std::invalid_argument("softmax_rows: scale must be positive");
  Tensor out(x.shape);
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* in = x.data.data() + i * c;
    double* o = out.data.data() + i * c;
    double mx = in[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(scale * (in[j] - mx));
      total += o[j];
    }
    for (std::size_t j = 0; j < c; ++j) o[j] /= total;
  }
  return out;
}

Var softmax_rows(Var x, double s) {
  Tape& t = tape_of(x, "softmax_rows");
  auto n = unary(t, Tape::Op::kSoftmaxRows, x, softmax_rows_value(t.value(x), s));
  n.a = s;
  return t.push(std::move(n));
}

Var sum(Var a) {
  Tape& t = tape_of(a, "sum");
  double acc = 0.0;
  for (double v : t.value(a).data) acc += v;
  return t.push(unary(t, Tape::Op::kSum, a, Tensor::scalar(acc)));
}

Var mean(Var a) {
  Tape& t = tape_of(a, "mean");
  const Tensor& x = t.value(a);
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  double acc = 0.0;
  for (double v : x.data) acc += v;
  return t.push(unary(t, Tape::Op::kMean, a, Tensor::scalar(acc / static_cast<double>(x.numel()))));
}

Var clamp(Var a, double lo, double hi) {
  Tape& t = tape_of(a, "clamp");
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  auto n = unary(t, Tape::Op::kClamp, a, map_values(t.value(a), [lo, hi](double v) { return std::clamp(v, lo, hi); }));
  n.a = lo;
  n.b = hi;
  return t.push(std::move(n));
}

Var minimum(Var a, Var b) {
  Tape& t = same_tape(a, b, "minimum");
  require_same_shape(t.value(a), t.value(b), "minimum");
  Tensor out = t.value(a);
  const Tensor& y = t.value(b);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::min(out.data[i], y.data[i]);
  return t.push(binary(t, Tape::Op::kMinimum, a, b, std::move(out)));
}

Var row(Var a, std::size_t r) {
  Tape& t = tape_of(a, "row");
  const Tensor& x = t.value(a);
  require_matrix(x, "row");
  if (r >= x.rows()) throw DimensionError("row: index " + std::to_string(r) + " out of range for " + shape_to_string(x.shape));
  auto view = x.row(r);
  auto n = unary(t, Tape::Op::kRow, a, Tensor(Shape{1, x.cols()}, std::vector<double>(view.begin(), view.end())));
  n.index0 = r;
  return t.push(std::move(n));
}

Var pick(Var a, std::size_t r, std::size_t c) {
  Tape& t = tape_of(a, "pick");
  const Tensor& x = t.value(a);
  require_matrix(x, "pick");
  if (r >= x.rows() || c >= x.cols()) throw DimensionError("pick: index out of range for " + shape_to_string(x.shape));
  auto n = unary(t, Tape::Op::kPick, a, Tensor::scalar(x.at(r, c)));
  n.index0 = r;
  n.index1 = c;
  return t.push(std::move(n));
}

Var concat_scalars(std::span<const Var> scalars) {
  if (scalars.empty()) throw DimensionError("concat_scalars: no inputs");
  Tape& t = tape_of(scalars[0], "concat_scalars");
  Tape::Node n;
  n.op = Tape::Op::kConcat;
  n.value = Tensor::matrix(scalars.size(), 1);
  n.extra.reserve(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].tape != &t) throw TapeError("concat_scalars: operands belong to different tapes");
    const Tensor& v = t.value(scalars[i]);
    if (v.numel() != 1) throw DimensionError("concat_scalars: input " + std::to_string(i) + " has shape " + shape_to_string(v.shape));
    n.value.data[i] = v.data[0];
    n.extra.push_back(scalars[i].id);
    n.requires_grad = n.requires_grad || t.requires_grad(scalars[i]);
  }
  return t.push(std::move(n));
}

double gaussian_log_density(std::span<const double> mean, std::span<const double> x, double std) {
  if (mean.size() != x.size()) throw DimensionError("gaussian_log_density: size mismatch");
  if (!(std > 0.0)) throw std::invalid_argument("gaussian_log_density: std must be positive");
  const double inv_two_var = 1.0 / (2.0 * std * std);
  double quad = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mean[i];
    quad += d * d;
  }
  const double per_dim = std::log(std) + 0.5 * std::log(2.0 * std::numbers::pi);
  return -quad * inv_two_var - static_cast<double>(x.size()) * per_dim;
}

Var gaussian_log_prob(Var mean_var, Var x, double std) {
  Tape& t = same_tape(mean_var, x, "gaussian_log_prob");
  require_same_shape(t.value(mean_var), t.value(x), "gaussian_log_prob");
  if (t.requires_grad(x)) throw TapeError("gaussian_log_prob: the evaluated point must be a constant");
  const double lp = gaussian_log_density(t.value(mean_var).data, t.value(x).data, std);
  auto n = binary(t, Tape::Op::kGaussianLogProb, mean_var, x, Tensor::scalar(lp));
  n.a = std;
  return t.push(std::move(n));
}

}  // namespace aegpo
