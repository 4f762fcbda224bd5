#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// Every value is a rank-2 array of doubles; vectors are 1 x n rows. A Tensor is a
// cheap handle onto a shared graph node. Operations record their parents and a
// backward closure only when at least one input requires a gradient, so the
// same code runs allocation-light in inference.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "p2s/errors.hpp"

namespace p2s::ag {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  constexpr std::size_t size() const noexcept { return rows * cols; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents that require one.
  std::function<void(Node&)> backward;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return make(shape, std::vector<double>(shape.size(), 0.0), false); }

  static Tensor constant(Shape shape, std::vector<double> values) {
    check_size(shape, values);
    return make(shape, std::move(values), false);
  }

  // A trainable leaf. Its gradient buffer exists from construction and
  // accumulates across backward calls until zero_grad().
  static Tensor parameter(Shape shape, std::vector<double> values) {
    check_size(shape, values);
    Tensor t = make(shape, std::move(values), true);
    t.node_->grad.assign(shape.size(), 0.0);
    return t;
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows, bool trainable = false) {
    Shape shape{rows.size(), rows.size() ? rows.begin()->size() : 0};
    std::vector<double> values;
    values.reserve(shape.size());
    for (const auto& r : rows) {
      if (r.size() != shape.cols) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), r.begin(), r.end());
    }
    return trainable ? parameter(shape, std::move(values)) : constant(shape, std::move(values));
  }

  static Tensor row(std::initializer_list<double> values, bool trainable = false) {
    Shape shape{1, values.size()};
    std::vector<double> v(values);
    return trainable ? parameter(shape, std::move(v)) : constant(shape, std::move(v));
  }

  // Internal constructor used by operations.
  static Tensor from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rows() const { return node_->shape.rows; }
  std::size_t cols() const { return node_->shape.cols; }
  std::size_t size() const { return node_->shape.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }

  std::span<const double> values() const { return node_->value; }
  // Direct write access, meant for optimizers and parameter initialization.
  std::span<double> mutable_values() { return node_->value; }

  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape().str());
    return node_->value[0];
  }

  bool has_grad() const { return node_->grad.size() == size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.assign(size(), 0.0);
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  static void check_size(Shape shape, const std::vector<double>& values) {
    if (values.size() != shape.size())
      throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                           shape.str());
  }

  static Tensor make(Shape shape, std::vector<double> values, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return from_node(std::move(n));
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

// Builds the output node. Parents and the backward closure are attached only
// when some input needs a gradient.
inline Tensor make_result(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value = std::move(values);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(n));
}

inline bool wants(const Node& parent) { return parent.requires_grad && parent.grad.size() == parent.shape.size(); }

enum class Broadcast { none, row, col, scalar };

// How operand b (possibly a bias row, per-row column or scalar) maps onto a.
inline Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::none;
  if (b.rows == 1 && b.cols == 1) return Broadcast::scalar;
  if (b.rows == 1 && b.cols == a.cols) return Broadcast::row;
  if (b.cols == 1 && b.rows == a.rows) return Broadcast::col;
  throw DimensionError(std::string(op) + ": cannot broadcast " + b.str() + " onto " + a.str());
}

inline std::size_t broadcast_index(Broadcast kind, std::size_t i, std::size_t j, std::size_t cols) {
  switch (kind) {
    case Broadcast::none: return i * cols + j;
    case Broadcast::row: return j;
    case Broadcast::col: return i;
    case Broadcast::scalar: return 0;
  }
  return 0;
}

}  // namespace detail

/// Matrix product [m x k] * [k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw DimensionError("matmul: inner dimensions differ, " + a.shape().str() + " x " + b.shape().str());
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double* g = self.grad.data();
    if (detail::wants(pa)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* grow = g + i * n;
          const double* brow = pb.value.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          pa.grad[i * k + p] += acc;
        }
    }
    if (detail::wants(pb)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = pa.value[i * k + p];
          if (aip == 0.0) continue;
          double* dbrow = pb.grad.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

namespace detail {

template <class Forward, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Forward f, DA da, DB db) {
  const Broadcast kind = broadcast_kind(a.shape(), b.shape(), name);
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      out[i * cols + j] = f(av[i * cols + j], bv[broadcast_index(kind, i, j, cols)]);
  return make_result(a.shape(), std::move(out), {a, b}, [kind, rows, cols, da, db](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const bool want_a = wants(pa), want_b = wants(pb);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t ia = i * cols + j;
        const std::size_t ib = broadcast_index(kind, i, j, cols);
        const double g = self.grad[ia];
        if (want_a) pa.grad[ia] += g * da(pa.value[ia], pb.value[ib]);
        if (want_b) pb.grad[ib] += g * db(pa.value[ia], pb.value[ib]);
      }
  });
}

template <class Forward, class Derivative>
Tensor unary(const Tensor& x, Forward f, Derivative d) {
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result(x.shape(), std::move(out), {x}, [d](Node& self) {
    Node& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * d(px.value[i], self.value[i]);
  });
}

}  // namespace detail

// Binary ops accept b with the shape of a, a 1 x n row, an m x 1 column or a scalar.
inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double out) { return 1.0 - out * out; });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, sigmoid_value, [](double, double s) { return s * (1.0 - s); });
}

enum class Elementwise { add, mul, sub, relu, tanh, sigmoid };

// Name-dispatched form of the elementwise family.
inline Tensor elementwise(Elementwise op, std::span<const Tensor> inputs) {
  const std::size_t arity = (op == Elementwise::add || op == Elementwise::mul || op == Elementwise::sub) ? 2 : 1;
  if (inputs.size() != arity)
    throw ContractError("elementwise: expected " + std::to_string(arity) + " operands, got " +
                        std::to_string(inputs.size()));
  switch (op) {
    case Elementwise::add: return add(inputs[0], inputs[1]);
    case Elementwise::mul: return mul(inputs[0], inputs[1]);
    case Elementwise::sub: return sub(inputs[0], inputs[1]);
    case Elementwise::relu: return relu(inputs[0]);
    case Elementwise::tanh: return tanh(inputs[0]);
    case Elementwise::sigmoid: return sigmoid(inputs[0]);
  }
  throw ContractError("elementwise: unknown op");
}

/// Row-wise softmax; a 1 x n tensor is a single distribution.
inline Tensor softmax(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("softmax: empty input");
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < rows; ++i) {
    const double* in = xv.data() + i * cols;
    double* o = out.data() + i * cols;
    const double mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) o[j] /= total;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [rows, cols](Node& self) {
    Node& px = *self.parents[0];
    for (std::size_t i = 0; i < rows; ++i) {
      const double* p = self.value.data() + i * cols;
      const double* g = self.grad.data() + i * cols;
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[j] * p[j];
      for (std::size_t j = 0; j < cols; ++j) px.grad[i * cols + j] += p[j] * (g[j] - dot);
    }
  });
}

struct RowRange {
  std::size_t start = 0;
  std::size_t count = 0;
};

/// Columnwise maximum over each row range; output row r pools ranges[r].
/// Ranges may overlap. Ties resolve to the lowest row, and backward routes the
/// gradient to that single row per column.
inline Tensor segment_max(const Tensor& x, std::span<const RowRange> ranges) {
  const std::size_t cols = x.cols();
  std::vector<double> out(ranges.size() * cols);
  auto argmax = std::make_shared<std::vector<std::size_t>>(ranges.size() * cols);
  const auto xv = x.values();
  for (std::size_t r = 0; r < ranges.size(); ++r) {
    const RowRange rg = ranges[r];
    if (rg.count == 0) throw EmptyReductionError("max reduction over zero rows");
    if (rg.start + rg.count > x.rows()) throw DimensionError("segment_max: range exceeds " + x.shape().str());
    for (std::size_t j = 0; j < cols; ++j) {
      std::size_t best = rg.start;
      double bv = xv[best * cols + j];
      for (std::size_t i = rg.start + 1; i < rg.start + rg.count; ++i)
        if (xv[i * cols + j] > bv) {
          bv = xv[i * cols + j];
          best = i;
        }
      out[r * cols + j] = bv;
      (*argmax)[r * cols + j] = best;
    }
  }
  return detail::make_result({ranges.size(), cols}, std::move(out), {x}, [argmax, cols](Node& self) {
    Node& px = *self.parents[0];
    for (std::size_t idx = 0; idx < self.grad.size(); ++idx)
      px.grad[(*argmax)[idx] * cols + idx % cols] += self.grad[idx];
  });
}

struct MaxReduction {
  Tensor values;
  std::vector<std::size_t> argmax;
};

/// Columnwise maximum over all rows of a [k x d] tensor.
inline MaxReduction max_reduce(const Tensor& x) {
  if (x.rows() == 0) throw EmptyReductionError("max_reduce over zero rows");
  const RowRange all{0, x.rows()};
  MaxReduction r{segment_max(x, std::span<const RowRange>(&all, 1)), std::vector<std::size_t>(x.cols())};
  const auto xv = x.values();
  for (std::size_t j = 0; j < x.cols(); ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < x.rows(); ++i)
      if (xv[i * x.cols() + j] > xv[best * x.cols() + j]) best = i;
    r.argmax[j] = best;
  }
  return r;
}

/// Joins along axis 0 (stack rows) or axis 1 (juxtapose columns). An empty
/// operand is the identity.
inline Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  if (axis != 0 && axis != 1) throw ArgumentError("concat: axis must be 0 or 1");
  if (b.size() == 0) return a;
  if (a.size() == 0) return b;
  if (axis == 0) {
    if (a.cols() != b.cols())
      throw DimensionError("concat(axis 0): column counts differ, " + a.shape().str() + " vs " + b.shape().str());
    std::vector<double> out(a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    const std::size_t split = a.size();
    return detail::make_result({a.rows() + b.rows(), a.cols()}, std::move(out), {a, b}, [split](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      if (detail::wants(pa))
        for (std::size_t i = 0; i < split; ++i) pa.grad[i] += self.grad[i];
      if (detail::wants(pb))
        for (std::size_t i = split; i < self.grad.size(); ++i) pb.grad[i - split] += self.grad[i];
    });
  }
  if (a.rows() != b.rows())
    throw DimensionError("concat(axis 1): row counts differ, " + a.shape().str() + " vs " + b.shape().str());
  const std::size_t rows = a.rows(), ca = a.cols(), cb = b.cols(), cols = ca + cb;
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(a.values().data() + i * ca, ca, out.data() + i * cols);
    std::copy_n(b.values().data() + i * cb, cb, out.data() + i * cols + ca);
  }
  return detail::make_result({rows, cols}, std::move(out), {a, b}, [rows, ca, cb, cols](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const bool want_a = detail::wants(pa), want_b = detail::wants(pb);
    for (std::size_t i = 0; i < rows; ++i) {
      const double* g = self.grad.data() + i * cols;
      if (want_a)
        for (std::size_t j = 0; j < ca; ++j) pa.grad[i * ca + j] += g[j];
      if (want_b)
        for (std::size_t j = 0; j < cb; ++j) pb.grad[i * cb + j] += g[ca + j];
    }
  });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: nothing to join");
  Tensor out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out = concat(out, parts[i], 1);
  return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  if (start + count > x.cols()) throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" +
                                                     std::to_string(count) + ") outside " + x.shape().str());
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(rows * count);
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(x.values().data() + i * cols + start, count, out.data() + i * count);
  return detail::make_result({rows, count}, std::move(out), {x}, [rows, cols, start, count](Node& self) {
    Node& px = *self.parents[0];
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < count; ++j) px.grad[i * cols + start + j] += self.grad[i * count + j];
  });
}

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  if (start + count > x.rows()) throw DimensionError("slice_rows: range outside " + x.shape().str());
  const std::size_t cols = x.cols();
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(start * cols),
                          x.values().begin() + static_cast<std::ptrdiff_t>((start + count) * cols));
  return detail::make_result({count, cols}, std::move(out), {x}, [start, cols](Node& self) {
    Node& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[start * cols + i] += self.grad[i];
  });
}

// Same row-major data viewed with a different shape.
inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape.size() != x.size()) throw DimensionError("reshape: " + x.shape().str() + " to " + shape.str());
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::make_result(shape, std::move(out), {x}, [](Node& self) {
    Node& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
  });
}

/// Output row r is sum_k weights[r*k + k'] * x[indices[r*k + k']], with k = neighbors.
/// With neighbors == 1 and unit weights this is a row gather.
inline Tensor weighted_rows(const Tensor& x, std::vector<std::size_t> indices, std::vector<double> weights,
                            std::size_t neighbors) {
  if (neighbors == 0 || indices.size() % neighbors != 0 || weights.size() != indices.size())
    throw DimensionError("weighted_rows: inconsistent index/weight tables");
  const std::size_t rows = indices.size() / neighbors, cols = x.cols();
  std::vector<double> out(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < neighbors; ++k) {
      const std::size_t src = indices[r * neighbors + k];
      if (src >= x.rows()) throw DimensionError("weighted_rows: row index out of range");
      const double w = weights[r * neighbors + k];
      if (w == 0.0) continue;
      for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] += w * x.values()[src * cols + j];
    }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  auto wts = std::make_shared<std::vector<double>>(std::move(weights));
  return detail::make_result({rows, cols}, std::move(out), {x}, [idx, wts, rows, cols, neighbors](Node& self) {
    Node& px = *self.parents[0];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < neighbors; ++k) {
        const double w = (*wts)[r * neighbors + k];
        if (w == 0.0) continue;
        double* dst = px.grad.data() + (*idx)[r * neighbors + k] * cols;
        for (std::size_t j = 0; j < cols; ++j) dst[j] += w * self.grad[r * cols + j];
      }
  });
}

inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> indices) {
  std::vector<double> ones(indices.size(), 1.0);
  return weighted_rows(x, std::move(indices), std::move(ones), 1);
}

/// [m x n] -> [m x 1] row sums.
inline Tensor row_sum(const Tensor& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i] += x.values()[i * cols + j];
  return detail::make_result({rows, 1}, std::move(out), {x}, [cols](Node& self) {
    Node& px = *self.parents[0];
    for (std::size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += self.grad[i / cols];
  });
}

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return detail::make_result({1, 1}, {total}, {x}, [](Node& self) {
    Node& px = *self.parents[0];
    for (double& g : px.grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw EmptyReductionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Mean over rows of -log softmax(logits_row)[target_row].
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (targets.size() != rows)
    throw DimensionError("cross entropy: " + std::to_string(targets.size()) + " targets for " + logits.shape().str());
  if (rows == 0) throw EmptyReductionError("cross entropy over zero rows");
  auto probs = std::make_shared<std::vector<double>>(logits.size());
  auto tgt = std::make_shared<std::vector<std::size_t>>(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (targets[i] >= cols) throw DataError("target " + std::to_string(targets[i]) + " outside [0, " + std::to_string(cols) + ")");
    const double* in = logits.values().data() + i * cols;
    double* p = probs->data() + i * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += (p[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < cols; ++j) p[j] /= z;
    total += -(in[targets[i]] - mx - std::log(z));
  }
  return detail::make_result({1, 1}, {total / static_cast<double>(rows)}, {logits},
                             [probs, tgt, rows, cols](Node& self) {
                               Node& px = *self.parents[0];
                               const double g = self.grad[0] / static_cast<double>(rows);
                               for (std::size_t i = 0; i < rows; ++i)
                                 for (std::size_t j = 0; j < cols; ++j)
                                   px.grad[i * cols + j] +=
                                       g * ((*probs)[i * cols + j] - ((*tgt)[i] == j ? 1.0 : 0.0));
                             });
}

/// Inverted dropout: in training each element is zeroed with probability
/// `ratio` and survivors are scaled by 1/(1-ratio); evaluation is the identity.
template <class Rng>
Tensor dropout(const Tensor& x, double ratio, bool training, Rng& rng) {
  if (!(ratio >= 0.0) || ratio >= 1.0) throw ConfigError("dropout ratio must lie in [0, 1), got " + std::to_string(ratio));
  if (!training || ratio == 0.0) return x;
  auto mask = std::make_shared<std::vector<double>>(x.size());
  const double keep_scale = 1.0 / (1.0 - ratio);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    // 53 random bits -> uniform [0, 1), independent of the standard library's distributions.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    (*mask)[i] = u < ratio ? 0.0 : keep_scale;
    out[i] = x.values()[i] * (*mask)[i];
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [mask](Node& self) {
    Node& px = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * (*mask)[i];
  });
}

inline constexpr double kBatchNormEpsilon = 1e-5;

/// Per-column batch normalization of [batch x d] with learnable scale/shift.
/// Training normalizes with the (biased) batch statistics and blends them into
/// the running statistics: running = (1 - momentum) * running + momentum * batch.
/// Evaluation normalizes with the running statistics.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::span<double> running_mean,
                         std::span<double> running_var, double momentum, bool training) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.size() != d || beta.size() != d || running_mean.size() != d || running_var.size() != d)
    throw DimensionError("batch_norm: feature width " + std::to_string(d) + " does not match state width " +
                         std::to_string(running_mean.size()));
  if (!training) {
    std::vector<double> out(n * d);
    auto inv = std::make_shared<std::vector<double>>(d);
    for (std::size_t j = 0; j < d; ++j) (*inv)[j] = 1.0 / std::sqrt(running_var[j] + kBatchNormEpsilon);
    std::vector<double> rm(running_mean.begin(), running_mean.end());
    auto xhat = std::make_shared<std::vector<double>>(n * d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double h = (x.values()[i * d + j] - rm[j]) * (*inv)[j];
        (*xhat)[i * d + j] = h;
        out[i * d + j] = gamma.values()[j] * h + beta.values()[j];
      }
    return detail::make_result({n, d}, std::move(out), {x, gamma, beta}, [inv, xhat, n, d](Node& self) {
      Node& px = *self.parents[0];
      Node& pg = *self.parents[1];
      Node& pb = *self.parents[2];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          const double g = self.grad[i * d + j];
          if (detail::wants(px)) px.grad[i * d + j] += g * pg.value[j] * (*inv)[j];
          if (detail::wants(pg)) pg.grad[j] += g * (*xhat)[i * d + j];
          if (detail::wants(pb)) pb.grad[j] += g;
        }
    });
  }
  if (n == 0) throw EmptyReductionError("batch_norm over an empty batch");
  std::vector<double> mu(d, 0.0), var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += x.values()[i * d + j];
  for (double& m : mu) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x.values()[i * d + j] - mu[j];
      var[j] += c * c;
    }
  for (double& v : var) v /= static_cast<double>(n);
  auto inv = std::make_shared<std::vector<double>>(d);
  for (std::size_t j = 0; j < d; ++j) {
    (*inv)[j] = 1.0 / std::sqrt(var[j] + kBatchNormEpsilon);
    running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mu[j];
    running_var[j] = (1.0 - momentum) * running_var[j] + momentum * var[j];
  }
  auto xhat = std::make_shared<std::vector<double>>(n * d);
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (x.values()[i * d + j] - mu[j]) * (*inv)[j];
      (*xhat)[i * d + j] = h;
      out[i * d + j] = gamma.values()[j] * h + beta.values()[j];
    }
  return detail::make_result({n, d}, std::move(out), {x, gamma, beta}, [inv, xhat, n, d](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    std::vector<double> sum_g(d, 0.0), sum_gx(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        sum_g[j] += self.grad[i * d + j];
        sum_gx[j] += self.grad[i * d + j] * (*xhat)[i * d + j];
      }
    if (detail::wants(pg))
      for (std::size_t j = 0; j < d; ++j) pg.grad[j] += sum_gx[j];
    if (detail::wants(pb))
      for (std::size_t j = 0; j < d; ++j) pb.grad[j] += sum_g[j];
    if (detail::wants(px)) {
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          const double dxhat = self.grad[i * d + j] * pg.value[j];
          const double sdx = sum_g[j] * pg.value[j];
          const double sdxx = sum_gx[j] * pg.value[j];
          px.grad[i * d + j] += (*inv)[j] * (dxhat - inv_n * sdx - (*xhat)[i * d + j] * inv_n * sdxx);
        }
    }
  });
}

/// Reverse sweep from a scalar. Intermediate gradients are recomputed from
/// zero on every call; leaf gradients accumulate until zeroed.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward requires a scalar loss, got " + (loss.defined() ? loss.shape().str() : "undefined"));
  Node* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS; the result lists every node after its parents.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order)
    if (n->backward) n->grad.assign(n->shape.size(), 0.0);
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

}  // namespace p2s::ag
