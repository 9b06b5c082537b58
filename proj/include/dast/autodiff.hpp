// Reverse-mode automatic differentiation over dense row-major matrices.
//
// Every value is a 2-D tensor (vectors are 1 x n rows). Operations execute
// eagerly and record their inputs while gradient mode is on. Backward rules
// are themselves written in terms of recorded operations, so running
// `backward` with `create_graph = true` yields gradients that can be
// differentiated again (needed for second-order MAML).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dast::ad {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  NumericError(std::string kind, std::uint64_t node_id, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)), node_id_(node_id) {}
  const std::string& kind() const noexcept { return kind_; }
  std::uint64_t node_id() const noexcept { return node_id_; }

 private:
  std::string kind_;
  std::uint64_t node_id_;
};

// ---------------------------------------------------------------------------
// Tensor

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    check_extents();
  }
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    check_extents();
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string());
    }
  }

  static Tensor scalar(double v) { return Tensor(1, 1, std::vector<double>{v}); }
  static Tensor row(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(1, n, std::move(v));
  }
  static Tensor column(std::vector<double> v) {
    const auto n = v.size();
    return Tensor(n, 1, std::move(v));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Views of a temporary would dangle.
  std::span<double> data() & noexcept { return data_; }
  std::span<const double> data() const& noexcept { return data_; }
  std::span<const double> data() && = delete;
  const std::vector<double>& vec() const& noexcept { return data_; }
  const std::vector<double>& vec() && = delete;

  bool same_shape(const Tensor& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }
  std::string shape_string() const {
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }
  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    if (rows_ == 0 || cols_ == 0) {
      throw ShapeError("tensor extents must be positive, got " + shape_string());
    }
  }

  std::size_t rows_{0};
  std::size_t cols_{0};
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Gradient mode

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline std::uint64_t next_node_id() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(detail::grad_enabled_flag()) {
    detail::grad_enabled_flag() = enabled;
  }
  ~GradModeGuard() { detail::grad_enabled_flag() = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

// ---------------------------------------------------------------------------
// Graph nodes

class Var;
struct Node;
using NodePtr = std::shared_ptr<Node>;

// Computes input gradients given the node's output and the incoming gradient.
// Entries for inputs that do not require gradients may be left empty.
using BackwardFn = std::function<std::vector<Var>(const Var& out, const Var& grad)>;

struct Node {
  Tensor value;
  std::vector<NodePtr> inputs;
  BackwardFn backward;
  std::string_view kind;
  std::string name;
  std::uint64_t id{0};
  bool requires_grad{false};
};

class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var leaf(Tensor value, bool requires_grad = true, std::string name = {}) {
    if (!value.all_finite()) {
      throw NumericError("leaf", 0, "non-finite leaf value " + value.shape_string() +
                                        (name.empty() ? "" : " for '" + name + "'"));
    }
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->kind = "leaf";
    n->name = std::move(name);
    n->id = detail::next_node_id();
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }
  static Var constant(Tensor value) { return leaf(std::move(value), false); }
  static Var scalar(double v) { return constant(Tensor::scalar(v)); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  double item() const {
    if (node_->value.size() != 1) {
      throw ShapeError("item() on non-scalar " + node_->value.shape_string());
    }
    return node_->value[0];
  }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  bool is_leaf() const noexcept { return node_ && node_->inputs.empty(); }
  std::uint64_t id() const noexcept { return node_ ? node_->id : 0; }
  std::string_view kind() const { return node_->kind; }
  const std::string& name() const { return node_->name; }
  const NodePtr& node() const noexcept { return node_; }

  Var input(std::size_t i) const { return Var(node_->inputs.at(i)); }
  bool input_requires_grad(std::size_t i) const {
    return node_->inputs.at(i)->requires_grad;
  }

  Var detach() const { return constant(node_->value); }

 private:
  NodePtr node_;
};

namespace detail {

inline Var record(std::string_view kind, Tensor value, std::vector<Var> inputs,
                  BackwardFn backward) {
  auto n = std::make_shared<Node>();
  n->id = next_node_id();
  n->kind = kind;
  if (!value.all_finite()) {
    std::ostringstream msg;
    msg << "non-finite value produced by '" << kind << "' (node " << n->id << ", shape "
        << value.shape_string() << ")";
    throw NumericError(std::string(kind), n->id, msg.str());
  }
  n->value = std::move(value);
  bool any = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) any = any || in.requires_grad();
  }
  if (any) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

inline void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
  }
}

inline void require_finite_input(std::string_view op, const Tensor& t) {
  if (!t.all_finite()) {
    throw NumericError(std::string(op), 0,
                       std::string(op) + ": non-finite input " + t.shape_string());
  }
}

template <class F>
Tensor map_values(const Tensor& x, F f) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

inline bool broadcastable(const Tensor& small, std::size_t rows, std::size_t cols) {
  return (small.rows() == 1 || small.rows() == rows) &&
         (small.cols() == 1 || small.cols() == cols);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& x);
Var scale(const Var& x, double c);
Var affine(const Var& x, double a, double b);
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
Var transpose(const Var& x);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, std::size_t begin, std::size_t end);
Var slice_cols(const Var& x, std::size_t begin, std::size_t end);
Var embed_rows(const Var& x, std::size_t offset, std::size_t total_rows);
Var embed_cols(const Var& x, std::size_t offset, std::size_t total_cols);
Var expand(const Var& x, std::size_t rows, std::size_t cols);
Var reduce_rows(const Var& x);
Var reduce_cols(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);
Var dot(const Var& a, const Var& b);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var reciprocal(const Var& x);
Var rsqrt(const Var& x);
Var relu(const Var& x);
Var clamp_min(const Var& x, double floor);
Var softmax_rows(const Var& x);
Var gather_rows(const Var& table, std::span<const std::size_t> ids);
Var scatter_rows(const Var& x, std::span<const std::size_t> ids, std::size_t total_rows);
Var gather_cols(const Var& x, std::span<const std::size_t> ids);
Var scatter_cols(const Var& x, std::span<const std::size_t> ids, std::size_t total_cols);
Var pick_per_row(const Var& x, std::span<const std::size_t> ids);
Var place_per_row(const Var& x, std::span<const std::size_t> ids, std::size_t cols);
Var layer_norm_rows(const Var& x, double eps = 1e-5);
Var dropout_apply(const Var& x, const Tensor& mask, double keep_prob);

namespace detail {

// Sums `g` down to the given (broadcast source) shape.
inline Var reduce_to(const Var& g, std::size_t rows, std::size_t cols) {
  Var out = g;
  if (rows == 1 && out.rows() != 1) out = reduce_rows(out);
  if (cols == 1 && out.cols() != 1) out = reduce_cols(out);
  return out;
}

inline std::pair<Var, Var> broadcast_pair(std::string_view op, const Var& a, const Var& b) {
  const auto& ta = a.value();
  const auto& tb = b.value();
  if (ta.same_shape(tb)) return {a, b};
  if (broadcastable(tb, ta.rows(), ta.cols())) return {a, expand(b, ta.rows(), ta.cols())};
  if (broadcastable(ta, tb.rows(), tb.cols())) return {expand(a, tb.rows(), tb.cols()), b};
  throw ShapeError(std::string(op) + ": cannot broadcast " + ta.shape_string() + " with " +
                   tb.shape_string());
}

inline void matmul_kernel(const Tensor& a, const Tensor& b, bool ta, bool tb, Tensor& c) {
  const std::size_t m = c.rows(), n = c.cols();
  const std::size_t k = ta ? a.rows() : a.cols();
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = c.data().data();
  const std::size_t lda = a.cols(), ldb = b.cols();
  if (!ta && !tb) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = C + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = A[i * lda + p];
        if (av == 0.0) continue;
        const double* brow = B + p * ldb;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = A + i * lda;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = B + j * ldb;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        C[i * n + j] = s;
      }
    }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = A + p * lda;
      const double* brow = B + p * ldb;
      for (std::size_t i = 0; i < m; ++i) {
        const double av = arow[i];
        if (av == 0.0) continue;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += A[p * lda + i] * B[j * ldb + p];
        C[i * n + j] = s;
      }
    }
  }
}

}  // namespace detail

inline Var add(const Var& a0, const Var& b0) {
  auto [a, b] = detail::broadcast_pair("add", a0, b0);
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return detail::record("add", std::move(out), {a, b},
                        [](const Var&, const Var& g) { return std::vector<Var>{g, g}; });
}

inline Var sub(const Var& a0, const Var& b0) {
  auto [a, b] = detail::broadcast_pair("sub", a0, b0);
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return detail::record("sub", std::move(out), {a, b}, [](const Var& o, const Var& g) {
    return std::vector<Var>{g, o.input_requires_grad(1) ? neg(g) : Var{}};
  });
}

inline Var mul(const Var& a0, const Var& b0) {
  auto [a, b] = detail::broadcast_pair("mul", a0, b0);
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return detail::record("mul", std::move(out), {a, b}, [](const Var& o, const Var& g) {
    return std::vector<Var>{o.input_requires_grad(0) ? mul(g, o.input(1)) : Var{},
                            o.input_requires_grad(1) ? mul(g, o.input(0)) : Var{}};
  });
}

inline Var neg(const Var& x) {
  return detail::record("neg", detail::map_values(x.value(), [](double v) { return -v; }),
                        {x}, [](const Var&, const Var& g) { return std::vector<Var>{neg(g)}; });
}

inline Var scale(const Var& x, double c) {
  return detail::record("scale", detail::map_values(x.value(), [c](double v) { return v * c; }),
                        {x}, [c](const Var&, const Var& g) {
                          return std::vector<Var>{scale(g, c)};
                        });
}

inline Var affine(const Var& x, double a, double b) {
  return detail::record("affine",
                        detail::map_values(x.value(), [a, b](double v) { return a * v + b; }),
                        {x}, [a](const Var&, const Var& g) {
                          return std::vector<Var>{scale(g, a)};
                        });
}

inline Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t m = ta ? av.cols() : av.rows();
  const std::size_t k = ta ? av.rows() : av.cols();
  const std::size_t kb = tb ? bv.cols() : bv.rows();
  const std::size_t n = tb ? bv.rows() : bv.cols();
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ " + av.shape_string() +
                     (ta ? "^T" : "") + " x " + bv.shape_string() + (tb ? "^T" : ""));
  }
  Tensor out(m, n);
  detail::matmul_kernel(av, bv, ta, tb, out);
  return detail::record("matmul", std::move(out), {a, b}, [ta, tb](const Var& o, const Var& g) {
    const Var A = o.input(0), B = o.input(1);
    Var ga, gb;
    if (o.input_requires_grad(0)) ga = ta ? matmul(B, g, tb, true) : matmul(g, B, false, !tb);
    if (o.input_requires_grad(1)) gb = tb ? matmul(g, A, true, ta) : matmul(A, g, !ta, false);
    return std::vector<Var>{ga, gb};
  });
}

inline Var transpose(const Var& x) {
  const auto& v = x.value();
  Tensor out(v.cols(), v.rows());
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < v.cols(); ++c) out(c, r) = v(r, c);
  return detail::record("transpose", std::move(out), {x}, [](const Var&, const Var& g) {
    return std::vector<Var>{transpose(g)};
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw ShapeError("concat_cols: row count mismatch " + parts.front().value().shape_string() +
                       " vs " + p.value().shape_string());
    }
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data().data() + r * v.cols(), v.cols(), out.data().data() + r * cols + off);
    off += p.cols();
  }
  return detail::record("concat_cols", std::move(out), parts,
                        [offsets](const Var& o, const Var& g) {
                          std::vector<Var> grads(offsets.size());
                          for (std::size_t i = 0; i < offsets.size(); ++i) {
                            if (!o.input_requires_grad(i)) continue;
                            grads[i] = slice_cols(g, offsets[i], offsets[i] + o.input(i).cols());
                          }
                          return grads;
                        });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) {
      throw ShapeError("concat_rows: column count mismatch " +
                       parts.front().value().shape_string() + " vs " + p.value().shape_string());
    }
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(data.size() / cols);
    data.insert(data.end(), p.value().vec().begin(), p.value().vec().end());
  }
  return detail::record("concat_rows", Tensor(rows, cols, std::move(data)), parts,
                        [offsets](const Var& o, const Var& g) {
                          std::vector<Var> grads(offsets.size());
                          for (std::size_t i = 0; i < offsets.size(); ++i) {
                            if (!o.input_requires_grad(i)) continue;
                            grads[i] = slice_rows(g, offsets[i], offsets[i] + o.input(i).rows());
                          }
                          return grads;
                        });
}

inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  const auto& v = x.value();
  if (begin >= end || end > v.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + v.shape_string());
  }
  std::vector<double> data(v.vec().begin() + static_cast<std::ptrdiff_t>(begin * v.cols()),
                           v.vec().begin() + static_cast<std::ptrdiff_t>(end * v.cols()));
  const std::size_t total = v.rows();
  return detail::record("slice_rows", Tensor(end - begin, v.cols(), std::move(data)), {x},
                        [begin, total](const Var&, const Var& g) {
                          return std::vector<Var>{embed_rows(g, begin, total)};
                        });
}

inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  const auto& v = x.value();
  if (begin >= end || end > v.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + v.shape_string());
  }
  Tensor out(v.rows(), end - begin);
  for (std::size_t r = 0; r < v.rows(); ++r)
    std::copy_n(v.data().data() + r * v.cols() + begin, end - begin,
                out.data().data() + r * (end - begin));
  const std::size_t total = v.cols();
  return detail::record("slice_cols", std::move(out), {x},
                        [begin, total](const Var&, const Var& g) {
                          return std::vector<Var>{embed_cols(g, begin, total)};
                        });
}

inline Var embed_rows(const Var& x, std::size_t offset, std::size_t total_rows) {
  const auto& v = x.value();
  if (offset + v.rows() > total_rows) throw ShapeError("embed_rows: out of range");
  Tensor out(total_rows, v.cols());
  std::copy(v.vec().begin(), v.vec().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset * v.cols()));
  const std::size_t end = offset + v.rows();
  return detail::record("embed_rows", std::move(out), {x},
                        [offset, end](const Var&, const Var& g) {
                          return std::vector<Var>{slice_rows(g, offset, end)};
                        });
}

inline Var embed_cols(const Var& x, std::size_t offset, std::size_t total_cols) {
  const auto& v = x.value();
  if (offset + v.cols() > total_cols) throw ShapeError("embed_cols: out of range");
  Tensor out(v.rows(), total_cols);
  for (std::size_t r = 0; r < v.rows(); ++r)
    std::copy_n(v.data().data() + r * v.cols(), v.cols(),
                out.data().data() + r * total_cols + offset);
  const std::size_t end = offset + v.cols();
  return detail::record("embed_cols", std::move(out), {x},
                        [offset, end](const Var&, const Var& g) {
                          return std::vector<Var>{slice_cols(g, offset, end)};
                        });
}

inline Var expand(const Var& x, std::size_t rows, std::size_t cols) {
  const auto& v = x.value();
  if (v.rows() == rows && v.cols() == cols) return x;
  if (!detail::broadcastable(v, rows, cols)) {
    throw ShapeError("expand: cannot broadcast " + v.shape_string() + " to [" +
                     std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out(r, c) = v(v.rows() == 1 ? 0 : r, v.cols() == 1 ? 0 : c);
  const std::size_t src_rows = v.rows(), src_cols = v.cols();
  return detail::record("expand", std::move(out), {x},
                        [src_rows, src_cols](const Var&, const Var& g) {
                          return std::vector<Var>{detail::reduce_to(g, src_rows, src_cols)};
                        });
}

// Sums over rows: [r x c] -> [1 x c].
inline Var reduce_rows(const Var& x) {
  const auto& v = x.value();
  Tensor out(1, v.cols());
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < v.cols(); ++c) out[c] += v(r, c);
  const std::size_t rows = v.rows();
  return detail::record("reduce_rows", std::move(out), {x}, [rows](const Var&, const Var& g) {
    return std::vector<Var>{expand(g, rows, g.cols())};
  });
}

// Sums over columns: [r x c] -> [r x 1].
inline Var reduce_cols(const Var& x) {
  const auto& v = x.value();
  Tensor out(v.rows(), 1);
  for (std::size_t r = 0; r < v.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < v.cols(); ++c) s += v(r, c);
    out[r] = s;
  }
  const std::size_t cols = v.cols();
  return detail::record("reduce_cols", std::move(out), {x}, [cols](const Var&, const Var& g) {
    return std::vector<Var>{expand(g, g.rows(), cols)};
  });
}

inline Var sum(const Var& x) {
  const auto& v = x.value();
  double s = 0.0;
  for (double e : v.vec()) s += e;
  const std::size_t rows = v.rows(), cols = v.cols();
  return detail::record("sum", Tensor::scalar(s), {x}, [rows, cols](const Var&, const Var& g) {
    return std::vector<Var>{expand(g, rows, cols)};
  });
}

// Accumulates x_i * (1/n) left to right, the same arithmetic as dot(x, uniform).
inline Var mean(const Var& x) {
  const auto& v = x.value();
  const double w = 1.0 / static_cast<double>(v.size());
  double s = 0.0;
  for (double e : v.vec()) s += e * w;
  const std::size_t rows = v.rows(), cols = v.cols();
  return detail::record("mean", Tensor::scalar(s), {x},
                        [rows, cols, w](const Var&, const Var& g) {
                          return std::vector<Var>{expand(scale(g, w), rows, cols)};
                        });
}

inline Var dot(const Var& a, const Var& b) {
  detail::require_same_shape("dot", a.value(), b.value());
  const auto& av = a.value();
  const auto& bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return detail::record("dot", Tensor::scalar(s), {a, b}, [](const Var& o, const Var& g) {
    const Var A = o.input(0), B = o.input(1);
    return std::vector<Var>{
        o.input_requires_grad(0) ? mul(expand(g, B.rows(), B.cols()), B) : Var{},
        o.input_requires_grad(1) ? mul(expand(g, A.rows(), A.cols()), A) : Var{}};
  });
}

inline Var sigmoid(const Var& x) {
  return detail::record("sigmoid",
                        detail::map_values(x.value(),
                                           [](double v) {
                                             if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
                                             const double e = std::exp(v);
                                             return e / (1.0 + e);
                                           }),
                        {x}, [](const Var& o, const Var& g) {
                          return std::vector<Var>{mul(g, mul(o, affine(o, -1.0, 1.0)))};
                        });
}

inline Var tanh(const Var& x) {
  return detail::record("tanh",
                        detail::map_values(x.value(), [](double v) { return std::tanh(v); }),
                        {x}, [](const Var& o, const Var& g) {
                          return std::vector<Var>{mul(g, affine(mul(o, o), -1.0, 1.0))};
                        });
}

inline Var exp(const Var& x) {
  return detail::record("exp", detail::map_values(x.value(), [](double v) { return std::exp(v); }),
                        {x},
                        [](const Var& o, const Var& g) { return std::vector<Var>{mul(g, o)}; });
}

inline Var log(const Var& x) {
  for (double v : x.value().vec()) {
    if (!(v > 0.0)) throw NumericError("log", 0, "log: non-positive input " + std::to_string(v));
  }
  return detail::record("log", detail::map_values(x.value(), [](double v) { return std::log(v); }),
                        {x}, [](const Var& o, const Var& g) {
                          return std::vector<Var>{mul(g, reciprocal(o.input(0)))};
                        });
}

inline Var reciprocal(const Var& x) {
  return detail::record("reciprocal",
                        detail::map_values(x.value(), [](double v) { return 1.0 / v; }), {x},
                        [](const Var& o, const Var& g) {
                          return std::vector<Var>{mul(g, neg(mul(o, o)))};
                        });
}

inline Var rsqrt(const Var& x) {
  return detail::record("rsqrt",
                        detail::map_values(x.value(), [](double v) { return 1.0 / std::sqrt(v); }),
                        {x}, [](const Var& o, const Var& g) {
                          return std::vector<Var>{mul(g, scale(mul(o, mul(o, o)), -0.5))};
                        });
}

inline Var relu(const Var& x) {
  return detail::record("relu",
                        detail::map_values(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }),
                        {x}, [](const Var& o, const Var& g) {
                          auto mask = detail::map_values(o.input(0).value(), [](double v) {
                            return v > 0.0 ? 1.0 : 0.0;
                          });
                          return std::vector<Var>{mul(g, Var::constant(std::move(mask)))};
                        });
}

inline Var clamp_min(const Var& x, double floor) {
  return detail::record(
      "clamp_min",
      detail::map_values(x.value(), [floor](double v) { return v > floor ? v : floor; }), {x},
      [floor](const Var& o, const Var& g) {
        auto mask = detail::map_values(o.input(0).value(),
                                       [floor](double v) { return v > floor ? 1.0 : 0.0; });
        return std::vector<Var>{mul(g, Var::constant(std::move(mask)))};
      });
}

inline Var softmax_rows(const Var& x) {
  const auto& v = x.value();
  Tensor out(v.rows(), v.cols());
  for (std::size_t r = 0; r < v.rows(); ++r) {
    double mx = v(r, 0);
    for (std::size_t c = 1; c < v.cols(); ++c) mx = std::max(mx, v(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < v.cols(); ++c) {
      out(r, c) = std::exp(v(r, c) - mx);
      z += out(r, c);
    }
    for (std::size_t c = 0; c < v.cols(); ++c) out(r, c) /= z;
  }
  return detail::record("softmax_rows", std::move(out), {x}, [](const Var& o, const Var& g) {
    const Var inner = reduce_cols(mul(g, o));
    return std::vector<Var>{mul(o, sub(g, expand(inner, o.rows(), o.cols())))};
  });
}

inline Var gather_rows(const Var& table, std::span<const std::size_t> ids) {
  const auto& t = table.value();
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  Tensor out(ids.size(), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= t.rows()) {
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " out of range for " +
                       t.shape_string());
    }
    std::copy_n(t.data().data() + ids[i] * t.cols(), t.cols(), out.data().data() + i * t.cols());
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  const std::size_t total = t.rows();
  return detail::record("gather_rows", std::move(out), {table},
                        [idv, total](const Var&, const Var& g) {
                          return std::vector<Var>{scatter_rows(g, idv, total)};
                        });
}

inline Var scatter_rows(const Var& x, std::span<const std::size_t> ids, std::size_t total_rows) {
  const auto& v = x.value();
  if (ids.size() != v.rows()) throw ShapeError("scatter_rows: id count != rows");
  Tensor out(total_rows, v.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= total_rows) throw ShapeError("scatter_rows: id out of range");
    for (std::size_t c = 0; c < v.cols(); ++c) out(ids[i], c) += v(i, c);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return detail::record("scatter_rows", std::move(out), {x}, [idv](const Var&, const Var& g) {
    return std::vector<Var>{gather_rows(g, idv)};
  });
}

inline Var gather_cols(const Var& x, std::span<const std::size_t> ids) {
  const auto& v = x.value();
  if (ids.empty()) throw ShapeError("gather_cols: empty id list");
  Tensor out(v.rows(), ids.size());
  for (std::size_t j = 0; j < ids.size(); ++j) {
    if (ids[j] >= v.cols()) throw ShapeError("gather_cols: id out of range for " + v.shape_string());
    for (std::size_t r = 0; r < v.rows(); ++r) out(r, j) = v(r, ids[j]);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  const std::size_t total = v.cols();
  return detail::record("gather_cols", std::move(out), {x}, [idv, total](const Var&, const Var& g) {
    return std::vector<Var>{scatter_cols(g, idv, total)};
  });
}

// Scatter-add along columns; used by the copy mechanism to move attention mass
// from source positions onto vocabulary ids.
inline Var scatter_cols(const Var& x, std::span<const std::size_t> ids, std::size_t total_cols) {
  const auto& v = x.value();
  if (ids.size() != v.cols()) throw ShapeError("scatter_cols: id count != cols");
  Tensor out(v.rows(), total_cols);
  for (std::size_t j = 0; j < ids.size(); ++j) {
    if (ids[j] >= total_cols) throw ShapeError("scatter_cols: id out of range");
    for (std::size_t r = 0; r < v.rows(); ++r) out(r, ids[j]) += v(r, j);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return detail::record("scatter_cols", std::move(out), {x}, [idv](const Var&, const Var& g) {
    return std::vector<Var>{gather_cols(g, idv)};
  });
}

// out[i] = x[i, ids[i]] as an [n x 1] column.
inline Var pick_per_row(const Var& x, std::span<const std::size_t> ids) {
  const auto& v = x.value();
  if (ids.size() != v.rows()) {
    throw ShapeError("pick_per_row: " + std::to_string(ids.size()) + " ids for " + v.shape_string());
  }
  Tensor out(v.rows(), 1);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v.cols()) throw ShapeError("pick_per_row: id out of range");
    out[i] = v(i, ids[i]);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  const std::size_t cols = v.cols();
  return detail::record("pick_per_row", std::move(out), {x}, [idv, cols](const Var&, const Var& g) {
    return std::vector<Var>{place_per_row(g, idv, cols)};
  });
}

inline Var place_per_row(const Var& x, std::span<const std::size_t> ids, std::size_t cols) {
  const auto& v = x.value();
  if (v.cols() != 1 || ids.size() != v.rows()) throw ShapeError("place_per_row: bad shape");
  Tensor out(v.rows(), cols);
  for (std::size_t i = 0; i < ids.size(); ++i) out(i, ids[i]) = v[i];
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return detail::record("place_per_row", std::move(out), {x}, [idv](const Var&, const Var& g) {
    return std::vector<Var>{pick_per_row(g, idv)};
  });
}

// Row-wise normalization without affine parameters; composed from primitives
// so that it is differentiable to any order.
inline Var layer_norm_rows(const Var& x, double eps) {
  const double inv_n = 1.0 / static_cast<double>(x.cols());
  const Var mu = scale(reduce_cols(x), inv_n);
  const Var centered = sub(x, mu);
  const Var var = scale(reduce_cols(mul(centered, centered)), inv_n);
  return mul(centered, rsqrt(affine(var, 1.0, eps)));
}

inline Var dropout_apply(const Var& x, const Tensor& mask, double keep_prob) {
  detail::require_same_shape("dropout_apply", x.value(), mask);
  Tensor scaled = detail::map_values(mask, [keep_prob](double m) { return m / keep_prob; });
  return mul(x, Var::constant(std::move(scaled)));
}

// ---------------------------------------------------------------------------
// Backward pass

class Gradients {
 public:
  void set(std::uint64_t id, Var g) { grads_[id] = std::move(g); }
  bool has(const Var& leaf) const { return grads_.count(leaf.id()) != 0; }
  // Gradient for `leaf`; zeros of the leaf's shape when no path exists.
  Var of(const Var& leaf) const {
    auto it = grads_.find(leaf.id());
    if (it != grads_.end()) return it->second;
    return Var::constant(Tensor(leaf.rows(), leaf.cols()));
  }
  Tensor value_of(const Var& leaf) const { return of(leaf).value(); }
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  std::unordered_map<std::uint64_t, Var> grads_;
};

inline Gradients backward(const Var& root, const Tensor& seed, bool create_graph = false) {
  if (!root.defined()) throw std::logic_error("backward: root is undefined");
  if (!root.value().same_shape(seed)) {
    throw ShapeError("backward: seed shape " + seed.shape_string() + " != output shape " +
                     root.value().shape_string());
  }
  Gradients result;
  if (!root.requires_grad()) return result;

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<NodePtr> order;
  std::unordered_map<Node*, bool> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{root.node(), 0}};
  visited[root.node().get()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const NodePtr& child = node->inputs[next++];
      if (child->requires_grad && !visited[child.get()]) {
        visited[child.get()] = true;
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  GradModeGuard mode(create_graph);
  std::unordered_map<Node*, Var> grads;
  grads[root.node().get()] = Var::constant(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodePtr& node = *it;
    auto git = grads.find(node.get());
    if (git == grads.end()) continue;
    Var g = git->second;
    grads.erase(git);
    if (node->inputs.empty()) {
      result.set(node->id, g);
      continue;
    }
    const std::vector<Var> input_grads = node->backward(Var(node), g);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      Node* in = node->inputs[i].get();
      if (!in->requires_grad || i >= input_grads.size() || !input_grads[i].defined()) continue;
      auto [slot, inserted] = grads.try_emplace(in, input_grads[i]);
      if (!inserted) slot->second = add(slot->second, input_grads[i]);
    }
  }
  return result;
}

inline Gradients backward(const Var& root, bool create_graph = false) {
  return backward(root, Tensor(root.rows(), root.cols(), 1.0), create_graph);
}

// ---------------------------------------------------------------------------
// Named parameter collections

class ParamSet {
 public:
  ParamSet() = default;

  void add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_[name] = vars_.size();
    names_.push_back(name);
    vars_.push_back(Var::leaf(std::move(value), true, name));
    ++version_;
  }
  // Replaces the entry with an arbitrary node (used for fast weights that
  // remain linked to the graph that produced them).
  void set_var(const std::string& name, Var v) {
    auto& slot = vars_.at(index_of(name));
    if (!slot.value().same_shape(v.value())) {
      throw ShapeError("parameter '" + name + "' shape " + slot.value().shape_string() +
                       " cannot take " + v.value().shape_string());
    }
    slot = std::move(v);
    ++version_;
  }
  void set_value(const std::string& name, Tensor value) {
    set_var(name, Var::leaf(std::move(value), true, name));
  }

  const Var& operator[](const std::string& name) const { return vars_.at(index_of(name)); }
  const Var& at(std::size_t i) const { return vars_.at(i); }
  const std::string& name_at(std::size_t i) const { return names_.at(i); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const noexcept { return vars_.size(); }
  bool empty() const noexcept { return vars_.empty(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  std::uint64_t version() const noexcept { return version_; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v.size();
    return n;
  }

  // Independent leaves with equal values.
  ParamSet clone() const {
    ParamSet out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], vars_[i].value());
    return out;
  }
  // Constants with equal values; gradients do not flow into them.
  ParamSet detached() const {
    ParamSet out = *this;
    for (auto& v : out.vars_) v = v.detach();
    return out;
  }
  std::vector<Tensor> values() const {
    std::vector<Tensor> out;
    out.reserve(size());
    for (const auto& v : vars_) out.push_back(v.value());
    return out;
  }
  bool values_equal(const ParamSet& other) const {
    if (names_ != other.names_) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (!(vars_[i].value() == other.vars_[i].value())) return false;
    return true;
  }
  // Restricts to names starting with `prefix`.
  ParamSet subset(const std::string& prefix) const {
    ParamSet out;
    for (std::size_t i = 0; i < size(); ++i) {
      if (names_[i].rfind(prefix, 0) == 0) {
        out.index_[names_[i]] = out.vars_.size();
        out.names_.push_back(names_[i]);
        out.vars_.push_back(vars_[i]);
      }
    }
    return out;
  }

 private:
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Var> vars_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t version_{0};
};

// Gradient of `loss` for every entry of `params`, in parameter order.
inline std::vector<Tensor> gradients_for(const Gradients& g, const ParamSet& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) out.push_back(g.value_of(params.at(i)));
  return out;
}

// ---------------------------------------------------------------------------
// Explicit graph with named leaves (define-by-run under the hood).

class UnboundLeafError : public std::invalid_argument {
 public:
  explicit UnboundLeafError(const std::string& leaf)
      : std::invalid_argument("graph leaf '" + leaf + "' is not bound"), leaf_(leaf) {}
  const std::string& leaf() const noexcept { return leaf_; }

 private:
  std::string leaf_;
};

class Graph {
 public:
  using Bindings = std::map<std::string, Var>;
  using Builder = std::function<Var(const Bindings&)>;

  Graph(std::vector<std::string> leaves, Builder builder)
      : leaves_(std::move(leaves)), builder_(std::move(builder)) {}

  Var forward_eval(const Bindings& bindings) {
    for (const auto& leaf : leaves_)
      if (!bindings.count(leaf)) throw UnboundLeafError(leaf);
    output_ = builder_(bindings);
    return output_;
  }

  Gradients backward(const Tensor& seed, bool create_graph = false) const {
    if (!output_.defined()) throw std::logic_error("backward called before forward_eval");
    return ad::backward(output_, seed, create_graph);
  }

  const std::vector<std::string>& leaves() const noexcept { return leaves_; }

 private:
  std::vector<std::string> leaves_;
  Builder builder_;
  Var output_;
};

// ---------------------------------------------------------------------------
// Central-difference gradient check.

struct GradCheckResult {
  double max_relative_error{0.0};
  std::string worst_parameter;
  std::size_t worst_index{0};
};

// `fn` maps parameters to a scalar. Returns the max over coordinates of
// |analytic - numeric| / max(1, |analytic|). A nonzero `coords_per_param`
// probes that many evenly strided coordinates of each parameter.
inline GradCheckResult grad_check(const std::function<Var(const ParamSet&)>& fn,
                                  const ParamSet& point, double eps,
                                  std::size_t coords_per_param = 0) {
  if (!(eps > 1e-8 && eps < 1e-2)) throw std::invalid_argument("grad_check: eps must lie in (1e-8, 1e-2)");
  ParamSet params = point.clone();
  const Var out = fn(params);
  if (out.size() != 1) throw ShapeError("grad_check: function is not scalar-valued");
  const Gradients grads = backward(out);

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::string name = params.name_at(p);
    const Tensor analytic = grads.value_of(params.at(p));
    const Tensor base = params.at(p).value();
    const std::size_t stride =
        coords_per_param == 0 ? 1 : std::max<std::size_t>(1, base.size() / coords_per_param);
    for (std::size_t i = (p * 7) % stride; i < base.size(); i += stride) {
      Tensor probe = base;
      probe[i] = base[i] + eps;
      params.set_value(name, probe);
      const double fp = fn(params).item();
      probe[i] = base[i] - eps;
      params.set_value(name, probe);
      const double fm = fn(params).item();
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_parameter = name;
        result.worst_index = i;
      }
    }
    params.set_value(name, base);
  }
  return result;
}

}  // namespace dast::ad
