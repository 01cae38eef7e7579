#pragma once

// Dense row-major float64 tensors with a small reverse-mode autodiff layer.
//
// A Var is a handle to a graph node holding a value and (lazily) a gradient.
// Operations on Vars record their parents and a backward closure while grad
// mode is on; backward() orders the reachable graph topologically (the
// GradTape) and replays it in reverse, accumulating gradients additively.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace vmtt {

/// Stand-in for -inf inside masked score matrices. Keeps the arithmetic
/// finite; softmax treats anything at or below kMaskedThreshold as weight 0.
inline constexpr double kMaskedScore = -1e30;
inline constexpr double kMaskedThreshold = -1e29;

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match " +
                                  std::to_string(data_.size()) + " values");
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw std::invalid_argument("Tensor::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor row_vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Matrix view: rank-2 tensors are (rows x cols); higher ranks fold all
  /// leading dimensions into rows.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  /// Contiguous block of rows [begin, end).
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    if (begin > end || end > rows()) throw std::out_of_range("Tensor::slice_rows");
    const std::size_t c = cols();
    return Tensor({end - begin, c},
                  std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                                      data_.begin() + static_cast<std::ptrdiff_t>(end * c)));
  }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Vertical concatenation of matrices with equal column count.
inline Tensor vconcat(const Tensor& a, const Tensor& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.cols() != b.cols()) throw std::invalid_argument("vconcat: column mismatch");
  std::vector<double> d(a.storage());
  d.insert(d.end(), b.storage().begin(), b.storage().end());
  return Tensor({a.rows() + b.rows(), a.cols()}, std::move(d));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw std::invalid_argument("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Dense kernels (no autodiff)

/// c += op(a) * op(b), with optional transposition of either operand.
inline void gemm_accumulate(const Tensor& a, bool trans_a, const Tensor& b, bool trans_b, Tensor& c) {
  const std::size_t m = trans_a ? a.cols() : a.rows();
  const std::size_t k = trans_a ? a.rows() : a.cols();
  const std::size_t kb = trans_b ? b.cols() : b.rows();
  const std::size_t n = trans_b ? b.rows() : b.cols();
  if (k != kb || c.rows() != m || c.cols() != n)
    throw std::invalid_argument("gemm: incompatible shapes " + shape_str(a.shape()) + " " +
                                shape_str(b.shape()) + " -> " + shape_str(c.shape()));
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  const std::size_t lda = a.cols(), ldb = b.cols();
  if (!trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? A[p * lda + i] : A[i * lda + p];
        if (av == 0.0) continue;
        const double* brow = B + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = B + j * ldb;
        double s = 0.0;
        if (!trans_a) {
          const double* arow = A + i * lda;
          for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        } else {
          for (std::size_t p = 0; p < k; ++p) s += A[p * lda + i] * brow[p];
        }
        C[i * n + j] += s;
      }
    }
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  Tensor c = Tensor::matrix(a.rows(), b.cols());
  gemm_accumulate(a, false, b, false, c);
  return c;
}

inline double log_sum_exp(std::span<const double> xs) {
  double m = -INFINITY;
  for (double v : xs) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : xs) s += std::exp(v - m);
  return m + std::log(s);
}

inline double log_add_exp(double a, double b) {
  if (a == -INFINITY) return b;
  if (b == -INFINITY) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

// ---------------------------------------------------------------------------
// Autodiff graph

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor(value.shape(), 0.0);
    return grad;
  }
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var parameter(Tensor value) { return Var(std::move(value), true); }
  static Var constant(Tensor value) { return Var(std::move(value), false); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  void zero_grad() {
    if (has_grad()) node_->grad.fill(0.0);
  }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rank() const { return node_->value.rank(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const {
    if (size() != 1) throw std::logic_error("Var::item on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse-topological replay of the graph reachable from a scalar root.
class GradTape {
 public:
  explicit GradTape(const Var& root) {
    if (!root.defined()) throw std::invalid_argument("GradTape: undefined root");
    // Iterative DFS post-order.
    std::unordered_set<const Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }

  /// Seeds d(root)/d(root) = 1 and runs every recorded backward closure.
  void replay() {
    if (order_.empty()) return;
    Node* root = order_.back();
    if (root->value.size() != 1) throw std::logic_error("backward: root must be a scalar");
    root->ensure_grad()[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node* n = *it;
      if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
    }
  }

 private:
  std::vector<Node*> order_;
};

inline void backward(const Var& root) {
  if (!root.requires_grad()) return;
  GradTape tape(root);
  tape.replay();
}

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw std::domain_error(std::string(op) + ": non-finite value produced");
}

/// Wraps a freshly computed value into a graph node. `bw` receives the
/// result node (whose grad is populated) and accumulates into parents.
template <class Backward>
Var make_result(Tensor value, std::vector<Var> parents, const char* op, Backward&& bw) {
  check_finite(value, op);
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  Var out(std::move(value), needs);
  if (needs) {
    auto& node = *out.node();
    node.parents.reserve(parents.size());
    for (auto& p : parents) node.parents.push_back(p.node());
    node.backward = std::forward<Backward>(bw);
  }
  return out;
}

inline Tensor* grad_of(const std::shared_ptr<Node>& n) {
  return n->requires_grad ? &n->ensure_grad() : nullptr;
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable operations

inline Var matmul(const Var& a, const Var& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  Tensor out = matmul(a.value(), b.value());
  auto an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, "matmul", [an, bn](Node& self) {
    if (auto* ga = detail::grad_of(an)) gemm_accumulate(self.grad, false, bn->value, true, *ga);
    if (auto* gb = detail::grad_of(bn)) gemm_accumulate(an->value, true, self.grad, false, *gb);
  });
}

inline Var transpose(const Var& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a.value()(i, j);
  auto an = a.node();
  return detail::make_result(std::move(out), {a}, "transpose", [an, r, c](Node& self) {
    if (auto* g = detail::grad_of(an))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*g)(i, j) += self.grad(j, i);
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, "add", [an, bn](Node& self) {
    for (auto* g : {detail::grad_of(an), detail::grad_of(bn)})
      if (g)
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, "sub", [an, bn](Node& self) {
    if (auto* g = detail::grad_of(an))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_of(bn))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, "mul", [an, bn](Node& self) {
    if (auto* g = detail::grad_of(an))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bn->value[i];
    if (auto* g = detail::grad_of(bn))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * an->value[i];
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= s;
  auto an = a.node();
  return detail::make_result(std::move(out), {a}, "scale", [an, s](Node& self) {
    if (auto* g = detail::grad_of(an))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
  });
}

/// x (n x m) + b (1 x m) broadcast over rows.
inline Var add_bias(const Var& x, const Var& b) {
  if (b.size() != x.cols())
    throw std::invalid_argument("add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  Tensor out = x.value();
  const std::size_t n = x.rows(), m = x.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += b.value()[j];
  auto xn = x.node(), bn = b.node();
  return detail::make_result(std::move(out), {x, b}, "add_bias", [xn, bn, n, m](Node& self) {
    if (auto* g = detail::grad_of(xn))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_of(bn))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*g)[j] += self.grad[i * m + j];
  });
}

namespace detail {
template <class F, class DF>
Var unary(const Var& a, const char* op, F f, DF df_from_xy) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = f(v);
  auto an = a.node();
  return make_result(std::move(out), {a}, op, [an, df_from_xy](Node& self) {
    if (auto* g = grad_of(an))
      for (std::size_t i = 0; i < g->size(); ++i)
        (*g)[i] += self.grad[i] * df_from_xy(an->value[i], self.value[i]);
  });
}
}  // namespace detail

inline Var tanh(const Var& a) {
  return detail::unary(
      a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var relu(const Var& a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// x * sigmoid(x); the smooth member of the ReLU family used by Conformer.
inline Var swish(const Var& a) {
  return detail::unary(
      a, "swish", [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

namespace detail {
/// Row-wise softmax; entries at or below kMaskedThreshold get exactly 0.
inline void softmax_rows(const Tensor& x, Tensor& out) {
  const std::size_t r = x.rows(), c = x.cols();
  if (c == 0) throw std::invalid_argument("softmax: empty last dimension");
  for (std::size_t i = 0; i < r; ++i) {
    double m = -INFINITY;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = x(i, j);
      if (v > kMaskedThreshold) m = std::max(m, v);
    }
    if (m == -INFINITY) throw std::domain_error("softmax: row " + std::to_string(i) + " has no allowed entry");
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = x(i, j);
      const double e = v > kMaskedThreshold ? std::exp(v - m) : 0.0;
      out(i, j) = e;
      s += e;
    }
    for (std::size_t j = 0; j < c; ++j) out(i, j) /= s;
  }
}
}  // namespace detail

inline Tensor softmax(const Tensor& x) {
  Tensor out(x.shape());
  detail::softmax_rows(x, out);
  return out;
}

inline Tensor log_softmax(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  if (c == 0) throw std::invalid_argument("log_softmax: empty last dimension");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const double lse = log_sum_exp(x.row(i));
    for (std::size_t j = 0; j < c; ++j) out(i, j) = x(i, j) - lse;
  }
  return out;
}

/// Softmax over the last dimension (rows of the matrix view).
inline Var softmax(const Var& x) {
  Tensor out = softmax(x.value());
  auto xn = x.node();
  return detail::make_result(std::move(out), {x}, "softmax", [xn](Node& self) {
    auto* g = detail::grad_of(xn);
    if (!g) return;
    const std::size_t r = self.value.rows(), c = self.value.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad(i, j) * self.value(i, j);
      for (std::size_t j = 0; j < c; ++j) (*g)(i, j) += self.value(i, j) * (self.grad(i, j) - dot);
    }
  });
}

inline Var log_softmax(const Var& x) {
  Tensor out = log_softmax(x.value());
  auto xn = x.node();
  return detail::make_result(std::move(out), {x}, "log_softmax", [xn](Node& self) {
    auto* g = detail::grad_of(xn);
    if (!g) return;
    const std::size_t r = self.value.rows(), c = self.value.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < c; ++j) gs += self.grad(i, j);
      for (std::size_t j = 0; j < c; ++j) (*g)(i, j) += self.grad(i, j) - std::exp(self.value(i, j)) * gs;
    }
  });
}

/// Per-row normalization to zero mean / unit variance, then gain and bias
/// (both 1 x m).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const std::size_t n = x.rows(), m = x.cols();
  if (m < 2) throw std::invalid_argument("layer_norm: normalized axis must have size >= 2");
  if (gain.size() != m || bias.size() != m) throw std::invalid_argument("layer_norm: gain/bias size mismatch");
  Tensor xhat(x.shape());
  std::vector<double> inv_std(n);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) mean += x.value()(i, j);
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = x.value()(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat(i, j) = (x.value()(i, j) - mean) * inv_std[i];
      out(i, j) = xhat(i, j) * gain.value()[j] + bias.value()[j];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return detail::make_result(
      std::move(out), {x, gain, bias}, "layer_norm",
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), n, m](Node& self) {
        if (auto* gg = detail::grad_of(gn))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*gg)[j] += self.grad(i, j) * xhat(i, j);
        if (auto* gb = detail::grad_of(bn))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*gb)[j] += self.grad(i, j);
        if (auto* gx = detail::grad_of(xn)) {
          const double md = static_cast<double>(m);
          for (std::size_t i = 0; i < n; ++i) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double d = self.grad(i, j) * gn->value[j];
              sum_d += d;
              sum_dx += d * xhat(i, j);
            }
            for (std::size_t j = 0; j < m; ++j) {
              const double d = self.grad(i, j) * gn->value[j];
              (*gx)(i, j) += inv_std[i] * (d - sum_d / md - xhat(i, j) * sum_dx / md);
            }
          }
        }
      });
}

/// Row lookup: out[i] = table[ids[i]].
inline Var embedding(const Var& table, std::span<const int> ids) {
  const std::size_t v = table.rows(), d = table.cols();
  Tensor out = Tensor::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v));
    std::copy_n(table.value().row(static_cast<std::size_t>(ids[i])).begin(), d, out.row(i).begin());
  }
  auto tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return detail::make_result(std::move(out), {table}, "embedding", [tn, idv = std::move(idv), d](Node& self) {
    if (auto* g = detail::grad_of(tn))
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) (*g)(static_cast<std::size_t>(idv[i]), j) += self.grad(i, j);
  });
}

/// Causal depthwise 1-D convolution over time (rows). `x` carries
/// `history_rows` leading rows of left context that produce no output;
/// context beyond that is zero padding. kernel is (K x C), row K-1 aligned
/// with the current frame. A non-empty `max_lag` (one entry per output row)
/// drops taps reaching further back than max_lag[t] rows.
inline Var depthwise_conv1d_causal(const Var& x, const Var& kernel, const Var& bias, std::size_t history_rows = 0,
                                   std::span<const std::size_t> max_lag = {}) {
  const std::size_t K = kernel.rows(), C = kernel.cols();
  if (x.cols() != C || bias.size() != C) throw std::invalid_argument("depthwise_conv1d_causal: channel mismatch");
  if (history_rows > x.rows()) throw std::invalid_argument("depthwise_conv1d_causal: history exceeds input");
  const std::size_t T = x.rows() - history_rows;
  if (!max_lag.empty() && max_lag.size() != T) throw std::invalid_argument("depthwise_conv1d_causal: max_lag length");
  std::vector<std::size_t> first_tap(T, 0);
  for (std::size_t t = 0; t < T && !max_lag.empty(); ++t) first_tap[t] = K - 1 - std::min(max_lag[t], K - 1);
  Tensor out = Tensor::matrix(T, C);
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < C; ++c) out(t, c) = bias.value()[c];
    for (std::size_t k = first_tap[t]; k < K; ++k) {
      // input row aligned with kernel tap k
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + history_rows + k) - static_cast<std::ptrdiff_t>(K - 1);
      if (src < 0) continue;
      for (std::size_t c = 0; c < C; ++c) out(t, c) += kv(k, c) * xv(static_cast<std::size_t>(src), c);
    }
  }
  auto xn = x.node(), kn = kernel.node(), bn = bias.node();
  return detail::make_result(std::move(out), {x, kernel, bias}, "depthwise_conv1d",
                             [xn, kn, bn, K, C, T, history_rows, first_tap = std::move(first_tap)](Node& self) {
                               auto* gx = detail::grad_of(xn);
                               auto* gk = detail::grad_of(kn);
                               if (auto* gb = detail::grad_of(bn))
                                 for (std::size_t t = 0; t < T; ++t)
                                   for (std::size_t c = 0; c < C; ++c) (*gb)[c] += self.grad(t, c);
                               for (std::size_t t = 0; t < T; ++t)
                                 for (std::size_t k = first_tap[t]; k < K; ++k) {
                                   const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + history_rows + k) -
                                                              static_cast<std::ptrdiff_t>(K - 1);
                                   if (src < 0) continue;
                                   const auto s = static_cast<std::size_t>(src);
                                   for (std::size_t c = 0; c < C; ++c) {
                                     if (gx) (*gx)(s, c) += self.grad(t, c) * kn->value(k, c);
                                     if (gk) (*gk)(k, c) += self.grad(t, c) * xn->value(s, c);
                                   }
                                 }
                             });
}

/// Gathers `window` consecutive rows per output, starting at
/// offset + j*stride; rows outside [0, rows) read as zero. Output row j is
/// the concatenation of those rows (count x window*cols).
inline Var frame_stack(const Var& x, std::size_t window, std::size_t stride, std::ptrdiff_t offset, std::size_t count) {
  const std::size_t n = x.rows(), d = x.cols();
  Tensor out = Tensor::matrix(count, window * d);
  for (std::size_t j = 0; j < count; ++j)
    for (std::size_t w = 0; w < window; ++w) {
      const std::ptrdiff_t src = offset + static_cast<std::ptrdiff_t>(j * stride + w);
      if (src < 0 || static_cast<std::size_t>(src) >= n) continue;
      std::copy_n(x.value().row(static_cast<std::size_t>(src)).begin(), d, out.row(j).begin() + static_cast<std::ptrdiff_t>(w * d));
    }
  auto xn = x.node();
  return detail::make_result(std::move(out), {x}, "frame_stack", [xn, window, stride, offset, count, n, d](Node& self) {
    auto* g = detail::grad_of(xn);
    if (!g) return;
    for (std::size_t j = 0; j < count; ++j)
      for (std::size_t w = 0; w < window; ++w) {
        const std::ptrdiff_t src = offset + static_cast<std::ptrdiff_t>(j * stride + w);
        if (src < 0 || static_cast<std::size_t>(src) >= n) continue;
        for (std::size_t c = 0; c < d; ++c) (*g)(static_cast<std::size_t>(src), c) += self.grad(j, w * d + c);
      }
  });
}

/// Concatenation along time (rows).
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) throw std::invalid_argument("concat_rows: column mismatch");
    total += p.rows();
  }
  std::vector<double> data;
  data.reserve(total * d);
  for (const auto& p : parts) data.insert(data.end(), p.value().storage().begin(), p.value().storage().end());
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result(Tensor({total, d}, std::move(data)), parts, "concat_rows", [nodes](Node& self) {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      const std::size_t len = n->value.size();
      if (auto* g = detail::grad_of(n))
        for (std::size_t i = 0; i < len; ++i) (*g)[i] += self.grad[off + i];
      off += len;
    }
  });
}

/// Concatenation along features (columns).
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
  }
  Tensor out = Tensor::matrix(r, total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
    off += p.cols();
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result(std::move(out), parts, "concat_cols", [nodes, r](Node& self) {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      const std::size_t c = n->value.cols();
      if (auto* g = detail::grad_of(n))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*g)(i, j) += self.grad(i, off + j);
      off += c;
    }
  });
}

inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  Tensor out = x.value().slice_rows(begin, end);
  auto xn = x.node();
  const std::size_t d = x.cols();
  return detail::make_result(std::move(out), {x}, "slice_rows", [xn, begin, d](Node& self) {
    if (auto* g = detail::grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[begin * d + i] += self.grad[i];
  });
}

inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  if (begin > end || end > x.cols()) throw std::out_of_range("slice_cols");
  const std::size_t r = x.rows(), w = end - begin;
  Tensor out = Tensor::matrix(r, w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out(i, j) = x.value()(i, begin + j);
  auto xn = x.node();
  return detail::make_result(std::move(out), {x}, "slice_cols", [xn, begin, r, w](Node& self) {
    if (auto* g = detail::grad_of(xn))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) (*g)(i, begin + j) += self.grad(i, j);
  });
}

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  auto xn = x.node();
  return detail::make_result(Tensor({1, 1}, std::vector<double>{s}), {x}, "sum", [xn](Node& self) {
    if (auto* g = detail::grad_of(xn))
      for (auto& v : g->storage()) v += self.grad[0];
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Row-pair broadcast sum: out[i*B + j] = a[i] + b[j] for a (A x d), b (B x d).
inline Var pairwise_add(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("pairwise_add: width mismatch");
  const std::size_t A = a.rows(), B = b.rows(), d = a.cols();
  Tensor out = Tensor::matrix(A * B, d);
  for (std::size_t i = 0; i < A; ++i)
    for (std::size_t j = 0; j < B; ++j)
      for (std::size_t c = 0; c < d; ++c) out(i * B + j, c) = a.value()(i, c) + b.value()(j, c);
  auto an = a.node(), bn = b.node();
  return detail::make_result(std::move(out), {a, b}, "pairwise_add", [an, bn, A, B, d](Node& self) {
    auto* ga = detail::grad_of(an);
    auto* gb = detail::grad_of(bn);
    for (std::size_t i = 0; i < A; ++i)
      for (std::size_t j = 0; j < B; ++j)
        for (std::size_t c = 0; c < d; ++c) {
          const double g = self.grad(i * B + j, c);
          if (ga) (*ga)(i, c) += g;
          if (gb) (*gb)(j, c) += g;
        }
  });
}

}  // namespace vmtt
