#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Nodes produced by
// differentiable operations remember their inputs and a backward closure;
// backward() replays them in reverse topological order and accumulates
// gradients into every leaf that requires them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mtn {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateRowError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

inline std::string to_string(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// View handed to a backward closure for each input of an operation.
/// `grad` is empty when the input does not require a gradient.
struct InputGrad {
  std::span<const double> value;
  std::span<double> grad;
  bool needed() const { return !grad.empty(); }
};

using BackwardFn = std::function<void(std::span<const double> out_value,
                                      std::span<const double> out_grad,
                                      std::span<InputGrad> inputs)>;

namespace detail {

struct Node {
  Shape shape;
  std::shared_ptr<std::vector<double>> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
  const char *op = "leaf";

  bool is_leaf() const { return inputs.empty(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value->size(), 0.0);
  }
};

inline thread_local bool grad_mode = true;

} // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode; }

class Graph;

class Tensor {
public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    if (element_count(shape) != values.size())
      throw ShapeError("shape " + to_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->value = std::make_shared<std::vector<double>>(std::move(values));
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = element_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double v, bool requires_grad = false) {
    auto n = element_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    std::vector<double> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (auto &r : rows) {
      if (r.size() != cols) throw ShapeError("ragged matrix literal");
      values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(values), requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    auto n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }

  /// Builds the result node of a differentiable operation. The node joins the
  /// tape only when gradients are enabled and some input requires one.
  static Tensor make_op(const char *op, Shape shape, std::vector<double> values,
                        std::vector<Tensor> inputs, BackwardFn backward) {
    Tensor out(std::move(shape), std::move(values));
    out.node_->op = op;
    if (!detail::grad_mode) return out;
    bool any = false;
    for (auto &t : inputs) any = any || t.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->backward = std::move(backward);
    out.node_->inputs.reserve(inputs.size());
    for (auto &t : inputs) out.node_->inputs.push_back(t.node_);
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape &shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value->size(); }

  // Matrix view: rank-1 tensors are a single row.
  std::size_t rows() const { return dim() == 1 ? 1 : node_->shape[0]; }
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const double> values() const { return *node_->value; }
  std::span<double> mutable_values() { return *node_->value; }

  double at(std::size_t i) const { return (*node_->value)[i]; }
  double operator()(std::size_t r, std::size_t c) const { return (*node_->value)[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return (*node_->value)[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf(); }
  const char *op() const { return node_->op; }

  /// Gradient accumulated by backward(); zeros when nothing reached this node.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad_span() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// A new leaf sharing this tensor's value storage but owning its own
  /// gradient accumulator.
  Tensor alias() const {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  /// Deep copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad) const {
    return Tensor(shape(), *node_->value, requires_grad);
  }
  Tensor clone() const { return clone(requires_grad()); }

  Tensor detach() const { return Tensor(shape(), *node_->value, false); }

  bool same_node(const Tensor &other) const { return node_ == other.node_; }

private:
  friend class Graph;
  std::shared_ptr<detail::Node> node_;
};

/// Reverse topological record of the operations that produced a root tensor.
/// Each differentiable node appears exactly once.
class Graph {
public:
  explicit Graph(const Tensor &root) {
    if (!root.defined()) throw std::invalid_argument("graph root is undefined");
    root_ = root.node_;
    if (!root_->requires_grad) return;
    std::unordered_set<detail::Node *> seen;
    std::vector<std::pair<detail::Node *, std::size_t>> stack;
    stack.emplace_back(root_.get(), 0);
    seen.insert(root_.get());
    while (!stack.empty()) {
      auto &[node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node *child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  /// Inputs before outputs; the root is last.
  const std::vector<detail::Node *> &topological_order() const { return order_; }
  std::size_t size() const { return order_.size(); }

  void backward() {
    if (root_->value->size() != 1)
      throw ShapeError("backward() requires a scalar root, got " + to_string(root_->shape));
    if (!root_->requires_grad) return;
    root_->ensure_grad();
    root_->grad[0] += 1.0;
    std::vector<InputGrad> slots;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node *node = *it;
      if (node->is_leaf() || !node->backward || node->grad.empty()) continue;
      slots.clear();
      for (auto &in : node->inputs) {
        InputGrad slot{*in->value, {}};
        if (in->requires_grad) {
          in->ensure_grad();
          slot.grad = in->grad;
        }
        slots.push_back(slot);
      }
      node->backward(*node->value, node->grad, slots);
      // Interior gradients are no longer needed once propagated.
      if (!node->is_leaf()) std::vector<double>().swap(node->grad);
    }
  }

private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node *> order_;
};

inline void backward(const Tensor &loss) { Graph(loss).backward(); }

// ---------------------------------------------------------------------------
// Matrix kernels (row-major, accumulate into `c`).

namespace kernel {

// c[m×n] += a[m×k] · b[k×n]
inline void gemm_nn(const double *a, const double *b, double *c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double *ci = c + i * n;
    const double *ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double *bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
inline void gemm_nt(const double *a, const double *b, double *c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double *ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double *bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
inline void gemm_tn(const double *a, const double *b, double *c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double *ai = a + i * k;
    const double *bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double *cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

} // namespace kernel

// ---------------------------------------------------------------------------
// Differentiable operations.

namespace detail {
inline void require_matrix(const Tensor &t, const char *what) {
  if (t.dim() != 2) throw ShapeError(std::string(what) + " expects a matrix, got " + to_string(t.shape()));
}
} // namespace detail

inline Tensor matmul(const Tensor &a, const Tensor &b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul shape mismatch: " + to_string(a.shape()) + " · " + to_string(b.shape()));
  std::vector<double> out(m * n, 0.0);
  kernel::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return Tensor::make_op("matmul", {m, n}, std::move(out), {a, b},
                         [m, k, n](auto, auto dout, std::span<InputGrad> in) {
                           if (in[0].needed())
                             kernel::gemm_nt(dout.data(), in[1].value.data(), in[0].grad.data(), m, n, k);
                           if (in[1].needed())
                             kernel::gemm_tn(in[0].value.data(), dout.data(), in[1].grad.data(), m, k, n);
                         });
}

/// a · bᵀ
inline Tensor matmul_nt(const Tensor &a, const Tensor &b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k)
    throw ShapeError("matmul_nt shape mismatch: " + to_string(a.shape()) + " · " +
                     to_string(b.shape()) + "ᵀ");
  std::vector<double> out(m * n, 0.0);
  kernel::gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
  return Tensor::make_op("matmul_nt", {m, n}, std::move(out), {a, b},
                         [m, k, n](auto, auto dout, std::span<InputGrad> in) {
                           if (in[0].needed())
                             kernel::gemm_nn(dout.data(), in[1].value.data(), in[0].grad.data(), m, n, k);
                           if (in[1].needed())
                             kernel::gemm_tn(dout.data(), in[0].value.data(), in[1].grad.data(), m, n, k);
                         });
}

/// x · w + bias (bias broadcast over rows).
inline Tensor linear(const Tensor &x, const Tensor &w, const Tensor &bias) {
  detail::require_matrix(x, "linear");
  detail::require_matrix(w, "linear");
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (w.rows() != k)
    throw ShapeError("linear shape mismatch: " + to_string(x.shape()) + " · " + to_string(w.shape()));
  if (bias.size() != n)
    throw ShapeError("linear bias " + to_string(bias.shape()) + " does not match width " + std::to_string(n));
  std::vector<double> out(m * n);
  auto bv = bias.values();
  for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * n);
  kernel::gemm_nn(x.values().data(), w.values().data(), out.data(), m, k, n);
  return Tensor::make_op("linear", {m, n}, std::move(out), {x, w, bias},
                         [m, k, n](auto, auto dout, std::span<InputGrad> in) {
                           if (in[0].needed())
                             kernel::gemm_nt(dout.data(), in[1].value.data(), in[0].grad.data(), m, n, k);
                           if (in[1].needed())
                             kernel::gemm_tn(in[0].value.data(), dout.data(), in[1].grad.data(), m, k, n);
                           if (in[2].needed())
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) in[2].grad[j] += dout[i * n + j];
                         });
}

inline Tensor transpose(const Tensor &a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  auto v = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  return Tensor::make_op("transpose", {n, m}, std::move(out), {a},
                         [m, n](auto, auto dout, std::span<InputGrad> in) {
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j) in[0].grad[i * n + j] += dout[j * m + i];
                         });
}

inline Tensor add(const Tensor &a, const Tensor &b) {
  if (a.shape() != b.shape())
    throw ShapeError("add shape mismatch: " + to_string(a.shape()) + " + " + to_string(b.shape()));
  std::vector<double> out(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor::make_op("add", a.shape(), std::move(out), {a, b},
                         [](auto, auto dout, std::span<InputGrad> in) {
                           for (auto &slot : in)
                             if (slot.needed())
                               for (std::size_t i = 0; i < dout.size(); ++i) slot.grad[i] += dout[i];
                         });
}

inline Tensor scale(const Tensor &a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto &v : out) v *= factor;
  return Tensor::make_op("scale", a.shape(), std::move(out), {a},
                         [factor](auto, auto dout, std::span<InputGrad> in) {
                           for (std::size_t i = 0; i < dout.size(); ++i) in[0].grad[i] += factor * dout[i];
                         });
}

inline Tensor relu(const Tensor &a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto &v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::make_op("relu", a.shape(), std::move(out), {a},
                         [](auto, auto dout, std::span<InputGrad> in) {
                           for (std::size_t i = 0; i < dout.size(); ++i)
                             if (in[0].value[i] > 0.0) in[0].grad[i] += dout[i];
                         });
}

/// Sum of all elements, as a scalar.
inline Tensor sum(const Tensor &a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return Tensor::make_op("sum", {1}, {s}, {a}, [](auto, auto dout, std::span<InputGrad> in) {
    for (auto &g : in[0].grad) g += dout[0];
  });
}

/// Boolean matrix of allowed positions. An empty mask allows everything.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  bool empty() const { return allowed.empty(); }
  bool at(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }

  static Mask all(std::size_t rows, std::size_t cols) {
    return {rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
  }
  /// Same key pattern for every row.
  static Mask keys(std::size_t rows, std::span<const std::uint8_t> key_allowed) {
    Mask m{rows, key_allowed.size(), {}};
    m.allowed.reserve(rows * key_allowed.size());
    for (std::size_t r = 0; r < rows; ++r) m.allowed.insert(m.allowed.end(), key_allowed.begin(), key_allowed.end());
    return m;
  }
  /// Position i may see positions j <= i.
  static Mask causal(std::size_t n) {
    Mask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
    return m;
  }
  Mask operator&(const Mask &o) const {
    if (empty()) return o;
    if (o.empty()) return *this;
    if (rows != o.rows || cols != o.cols) throw ShapeError("mask shape mismatch");
    Mask m{rows, cols, allowed};
    for (std::size_t i = 0; i < m.allowed.size(); ++i) m.allowed[i] &= o.allowed[i];
    return m;
  }
};

namespace detail {

// In-place stabilised softmax of one row; masked entries become exactly 0.
inline void softmax_row(double *row, std::size_t n, const std::uint8_t *allowed, std::size_t row_index) {
  double mx = -INFINITY;
  for (std::size_t j = 0; j < n; ++j)
    if (!allowed || allowed[j]) mx = std::max(mx, row[j]);
  if (mx == -INFINITY)
    throw DegenerateRowError("softmax row " + std::to_string(row_index) + " is fully masked");
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (allowed && !allowed[j]) {
      row[j] = 0.0;
    } else {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
  }
  for (std::size_t j = 0; j < n; ++j) row[j] /= total;
}

// dx = y ⊙ (dy − ⟨dy, y⟩) per row, accumulated.
inline void softmax_row_backward(const double *y, const double *dy, double *dx, std::size_t n) {
  double dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
}

} // namespace detail

inline Tensor softmax_rows(const Tensor &x, const Mask &mask = {}) {
  detail::require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (!mask.empty() && (mask.rows != m || mask.cols != n))
    throw ShapeError("softmax mask [" + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                     "] does not match " + to_string(x.shape()));
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < m; ++i)
    detail::softmax_row(out.data() + i * n, n, mask.empty() ? nullptr : mask.allowed.data() + i * n, i);
  return Tensor::make_op("softmax_rows", {m, n}, std::move(out), {x},
                         [m, n](auto y, auto dout, std::span<InputGrad> in) {
                           for (std::size_t i = 0; i < m; ++i)
                             detail::softmax_row_backward(y.data() + i * n, dout.data() + i * n,
                                                          in[0].grad.data() + i * n, n);
                         });
}

inline constexpr double kLayerNormEpsilon = 1e-6;

inline Tensor layer_norm(const Tensor &x, const Tensor &gain, const Tensor &bias,
                         double epsilon = kLayerNormEpsilon) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), d = x.cols();
  if (gain.size() != d || bias.size() != d)
    throw ShapeError("layer_norm affine parameters must have width " + std::to_string(d));
  auto xv = x.values(), gv = gain.values(), bv = bias.values();
  std::vector<double> out(m * d);
  auto xhat = std::make_shared<std::vector<double>>(m * d);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double *row = xv.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + epsilon);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  return Tensor::make_op(
      "layer_norm", {m, d}, std::move(out), {x, gain, bias},
      [m, d, xhat, inv_std](auto, auto dout, std::span<InputGrad> in) {
        const auto &h = *xhat;
        for (std::size_t i = 0; i < m; ++i) {
          const double *dy = dout.data() + i * d;
          if (in[2].needed())
            for (std::size_t j = 0; j < d; ++j) in[2].grad[j] += dy[j];
          if (in[1].needed())
            for (std::size_t j = 0; j < d; ++j) in[1].grad[j] += dy[j] * h[i * d + j];
          if (in[0].needed()) {
            double sum_g = 0.0, sum_gh = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double g = dy[j] * in[1].value[j];
              sum_g += g;
              sum_gh += g * h[i * d + j];
            }
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double g = dy[j] * in[1].value[j];
              in[0].grad[i * d + j] += (*inv_std)[i] * (g - inv_d * sum_g - h[i * d + j] * inv_d * sum_gh);
            }
          }
        }
      });
}

/// Position-wise two-layer network with a rectifier in between.
struct FeedForwardParams {
  Tensor w1, b1, w2, b2;
};

inline Tensor feed_forward(const Tensor &x, const FeedForwardParams &p) {
  if (p.w1.rows() != x.cols() || p.w2.cols() != x.cols())
    throw ShapeError("feed_forward weights " + to_string(p.w1.shape()) + "/" + to_string(p.w2.shape()) +
                     " do not fit input " + to_string(x.shape()));
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

inline Tensor embedding_lookup(const Tensor &table, std::span<const std::int32_t> ids) {
  detail::require_matrix(table, "embedding_lookup");
  const std::size_t vocab = table.rows(), d = table.cols(), len = ids.size();
  if (len == 0) throw ShapeError("embedding_lookup on empty id sequence");
  std::vector<double> out(len * d);
  auto tv = table.values();
  for (std::size_t i = 0; i < len; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw std::out_of_range("token id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(vocab) + " rows");
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<std::int32_t> kept(ids.begin(), ids.end());
  return Tensor::make_op("embedding_lookup", {len, d}, std::move(out), {table},
                         [kept = std::move(kept), d](auto, auto dout, std::span<InputGrad> in) {
                           for (std::size_t i = 0; i < kept.size(); ++i)
                             for (std::size_t j = 0; j < d; ++j)
                               in[0].grad[static_cast<std::size_t>(kept[i]) * d + j] += dout[i * d + j];
                         });
}

/// Uniform double in [0, 1) from 53 random bits; independent of the
/// standard library's distribution implementations.
inline double unit_uniform(std::mt19937_64 &rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Inverted dropout: kept units are scaled by 1/(1-rate).
inline Tensor dropout(const Tensor &x, double rate, bool training, std::mt19937_64 &rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> factor(x.size());
  for (auto &f : factor) f = unit_uniform(rng) < rate ? 0.0 : keep_scale;
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor[i];
  return Tensor::make_op("dropout", x.shape(), std::move(out), {x},
                         [factor = std::move(factor)](auto, auto dout, std::span<InputGrad> in) {
                           for (std::size_t i = 0; i < dout.size(); ++i) in[0].grad[i] += dout[i] * factor[i];
                         });
}

inline Tensor concat_last_dim(const std::vector<Tensor> &xs) {
  if (xs.empty()) throw ShapeError("concat_last_dim of no tensors");
  const std::size_t m = xs.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (auto &x : xs) {
    detail::require_matrix(x, "concat_last_dim");
    if (x.rows() != m)
      throw ShapeError("concat_last_dim row mismatch: " + to_string(xs.front().shape()) + " vs " +
                       to_string(x.shape()));
    widths.push_back(x.cols());
    total += x.cols();
  }
  std::vector<double> out(m * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    auto v = xs[k].values();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(i * total + offset));
    offset += widths[k];
  }
  return Tensor::make_op("concat_last_dim", {m, total}, std::move(out), xs,
                         [m, total, widths](auto, auto dout, std::span<InputGrad> in) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < in.size(); ++k) {
                             if (in[k].needed())
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < widths[k]; ++j)
                                   in[k].grad[i * widths[k] + j] += dout[i * total + off + j];
                             off += widths[k];
                           }
                         });
}

/// Mean over the allowed rows, as a 1×d matrix. An empty row mask allows all rows.
inline Tensor mean_rows(const Tensor &x, std::span<const std::uint8_t> row_allowed = {}) {
  detail::require_matrix(x, "mean_rows");
  const std::size_t m = x.rows(), d = x.cols();
  if (!row_allowed.empty() && row_allowed.size() != m) throw ShapeError("mean_rows mask length mismatch");
  std::vector<double> weight(m, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i)
    if (row_allowed.empty() || row_allowed[i]) ++count;
  if (count == 0) throw DegenerateRowError("mean_rows over zero allowed rows");
  for (std::size_t i = 0; i < m; ++i)
    if (row_allowed.empty() || row_allowed[i]) weight[i] = 1.0 / static_cast<double>(count);
  std::vector<double> out(d, 0.0);
  auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i)
    if (weight[i] != 0.0)
      for (std::size_t j = 0; j < d; ++j) out[j] += weight[i] * xv[i * d + j];
  return Tensor::make_op("mean_rows", {1, d}, std::move(out), {x},
                         [weight = std::move(weight), d](auto, auto dout, std::span<InputGrad> in) {
                           for (std::size_t i = 0; i < weight.size(); ++i)
                             if (weight[i] != 0.0)
                               for (std::size_t j = 0; j < d; ++j) in[0].grad[i * d + j] += weight[i] * dout[j];
                         });
}

/// Repeats a 1×d row `n` times.
inline Tensor broadcast_rows(const Tensor &row, std::size_t n) {
  if (row.rows() != 1) throw ShapeError("broadcast_rows expects one row, got " + to_string(row.shape()));
  const std::size_t d = row.cols();
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) std::copy(row.values().begin(), row.values().end(), out.begin() + static_cast<std::ptrdiff_t>(i * d));
  return Tensor::make_op("broadcast_rows", {n, d}, std::move(out), {row},
                         [n, d](auto, auto dout, std::span<InputGrad> in) {
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < d; ++j) in[0].grad[j] += dout[i * d + j];
                         });
}

/// Columns [start, start+count) of a matrix.
inline Tensor slice_cols(const Tensor &x, std::size_t start, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (count == 0 || start + count > n)
    throw ShapeError("slice_cols [" + std::to_string(start) + "," + std::to_string(start + count) +
                     ") out of " + to_string(x.shape()));
  std::vector<double> out(m * count);
  auto xv = x.values();
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(i * n + start), count, out.begin() + static_cast<std::ptrdiff_t>(i * count));
  return Tensor::make_op("slice_cols", {m, count}, std::move(out), {x},
                         [m, n, start, count](auto, auto dout, std::span<InputGrad> in) {
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < count; ++j) in[0].grad[i * n + start + j] += dout[i * count + j];
                         });
}

} // namespace mtn
