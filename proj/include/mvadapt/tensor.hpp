#pragma once

// Dense row-major tensors with tape-free reverse-mode autodiff.
//
// Every op result keeps shared ownership of its inputs while gradients are
// being recorded, so a loss tensor owns its whole graph. `backward(root)`
// traces that graph into topological order and runs the recorded closures
// in reverse. Leaves (parameters) accumulate gradients across calls until
// `zero_grad()`; interior gradients are reset on every call.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mvadapt/error.hpp"

namespace mvadapt {

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {
inline thread_local bool grad_enabled = true;
inline std::atomic<std::uint64_t> next_node_id{0};
}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  std::string_view op = "leaf";
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  std::uint64_t id = detail::next_node_id.fetch_add(1, std::memory_order_relaxed);

  bool is_leaf() const { return inputs.empty(); }
  std::span<T> grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (mvadapt::numel(shape) != values.size())
      throw ShapeError("tensor", "shape " + shape_str(shape) + " needs " + std::to_string(mvadapt::numel(shape)) +
                                     " values, got " + std::to_string(values.size()));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto n = mvadapt::numel(shape);
    return from(std::move(shape), std::vector<T>(n, v), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }
  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> data() const { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape.back() + c]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item", "tensor " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }

  // Leaves only: in-place parameter updates between graph constructions.
  std::span<T> mutable_data() {
    if (!node_->is_leaf()) throw Error("mutable_data: only leaf tensors may be modified");
    return node_->value;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw Error("set_requires_grad: only leaf tensors may change trainability");
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  // Gradient view; all zeros when nothing has been accumulated yet.
  std::span<const T> grad() const { return node_->grad_buffer(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  std::string_view op() const { return node_->op; }
  std::uint64_t id() const { return node_->id; }
  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  // Deep copy of the values as a new leaf.
  Tensor clone(bool requires_grad = false) const { return from(shape(), node_->value, requires_grad); }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <class T, class F>
Tensor<T> make_op(std::string_view op, Shape shape, std::vector<T> value,
                  std::initializer_list<Tensor<T>> inputs, F&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->inputs.reserve(inputs.size());
      for (const auto& t : inputs) n->inputs.push_back(t.node_ptr());
      n->backward = std::forward<F>(backward);
    }
  }
  return Tensor<T>(std::move(n));
}

template <class T, class F>
Tensor<T> make_op_list(std::string_view op, Shape shape, std::vector<T> value,
                       const std::vector<Tensor<T>>& inputs, F&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled) {
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& t : inputs) n->inputs.push_back(t.node_ptr());
      n->backward = std::forward<F>(backward);
    }
  }
  return Tensor<T>(std::move(n));
}

// Gradient sink for input `i` of `self`, or an empty span if it needs none.
template <class T>
std::span<T> sink(Node<T>& self, std::size_t i) {
  auto& in = *self.inputs[i];
  if (!in.requires_grad) return {};
  return in.grad_buffer();
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, std::string_view op) {
  if (axis >= s.size()) throw ShapeError(std::string(op), "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline Shape drop_axis(Shape s, std::size_t axis) {
  s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
  return s;
}

template <class T>
void require_same(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(op), a.shape(), b.shape());
}

template <class T>
void require_rank2(std::string_view op, const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError(std::string(op), "expected a 2-D tensor, got " + shape_str(a.shape()));
}

// Elementwise unary op; `df(x, y)` is dy/dx given input x and output y.
template <class T, class F, class DF>
Tensor<T> unary(std::string_view op, const Tensor<T>& x, F f, DF df) {
  auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return make_op(op, x.shape(), std::move(out), {x}, [df](Node<T>& self) {
    auto g = sink(self, 0);
    if (g.empty()) return;
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(xv[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// op(a)·op(b) for 2-D tensors, op = transpose when the flag is set.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  const std::size_t n = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t m = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb) throw ShapeError("matmul", a.shape(), b.shape());

  using detail::CMatMap;
  using detail::MatMap;
  std::vector<T> out(n * m);
  CMatMap<T> A(a.data().data(), static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1)));
  CMatMap<T> B(b.data().data(), static_cast<Eigen::Index>(b.dim(0)), static_cast<Eigen::Index>(b.dim(1)));
  MatMap<T> C(out.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  if (!trans_a && !trans_b) C.noalias() = A * B;
  else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();

  return detail::make_op("matmul", {n, m}, std::move(out), {a, b}, [trans_a, trans_b](Node<T>& self) {
    const auto& an = *self.inputs[0];
    const auto& bn = *self.inputs[1];
    auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
    CMatMap<T> A(an.value.data(), ei(an.shape[0]), ei(an.shape[1]));
    CMatMap<T> B(bn.value.data(), ei(bn.shape[0]), ei(bn.shape[1]));
    CMatMap<T> dC(self.grad.data(), ei(self.shape[0]), ei(self.shape[1]));
    if (auto ga = detail::sink(self, 0); !ga.empty()) {
      MatMap<T> dA(ga.data(), ei(an.shape[0]), ei(an.shape[1]));
      if (!trans_a) {
        if (!trans_b) dA.noalias() += dC * B.transpose();
        else dA.noalias() += dC * B;
      } else {
        if (!trans_b) dA.noalias() += B * dC.transpose();
        else dA.noalias() += B.transpose() * dC.transpose();
      }
    }
    if (auto gb = detail::sink(self, 1); !gb.empty()) {
      MatMap<T> dB(gb.data(), ei(bn.shape[0]), ei(bn.shape[1]));
      if (!trans_b) {
        if (!trans_a) dB.noalias() += A.transpose() * dC;
        else dB.noalias() += A * dC;
      } else {
        if (!trans_a) dB.noalias() += dC.transpose() * A;
        else dB.noalias() += dC.transpose() * A.transpose();
      }
    }
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank2("transpose", x);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  auto xs = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xs[i * c + j];
  return detail::make_op("transpose", {c, r}, std::move(out), {x}, [r, c](Node<T>& self) {
    auto g = detail::sink(self, 0);
    if (g.empty()) return;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("add", a, b);
  std::vector<T> out(a.numel());
  auto as = a.data(), bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
  return detail::make_op("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto g = detail::sink(self, k); !g.empty())
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("sub", a, b);
  std::vector<T> out(a.numel());
  auto as = a.data(), bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] - bs[i];
  return detail::make_op("sub", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (auto g = detail::sink(self, 0); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    if (auto g = detail::sink(self, 1); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("mul", a, b);
  std::vector<T> out(a.numel());
  auto as = a.data(), bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  return detail::make_op("mul", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (auto g = detail::sink(self, 0); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    if (auto g = detail::sink(self, 1); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
  });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same("div", a, b);
  std::vector<T> out(a.numel());
  auto as = a.data(), bs = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] / bs[i];
  return detail::make_op("div", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& bv = self.inputs[1]->value;
    if (auto g = detail::sink(self, 0); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bv[i];
    if (auto g = detail::sink(self, 1); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] / bv[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary<T>("scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary<T>("add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary<T>("sqrt", x, [](T v) { return std::sqrt(v); },
                          [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary<T>(
      "softplus", x, [](T v) { return v > T(20) ? v : std::log1p(std::exp(v)); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

// min(x, c); the gradient is cut where the clamp is active.
template <class T>
Tensor<T> clamp_max(const Tensor<T>& x, T c) {
  return detail::unary<T>("clamp_max", x, [c](T v) { return v < c ? v : c; },
                          [c](T v, T) { return v < c ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Broadcast over leading dimensions: `b` has as many elements as x's last dim.

template <class T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() == 0 || b.numel() != x.shape().back()) throw ShapeError("add_rowwise", x.shape(), b.shape());
  const std::size_t c = b.numel(), rows = x.numel() / c;
  std::vector<T> out(x.data().begin(), x.data().end());
  auto bs = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += bs[j];
  return detail::make_op("add_rowwise", x.shape(), std::move(out), {x, b}, [rows, c](Node<T>& self) {
    if (auto g = detail::sink(self, 0); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    if (auto g = detail::sink(self, 1); !g.empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[r * c + j];
  });
}

template <class T>
Tensor<T> mul_rowwise(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.rank() == 0 || w.numel() != x.shape().back()) throw ShapeError("mul_rowwise", x.shape(), w.shape());
  const std::size_t c = w.numel(), rows = x.numel() / c;
  std::vector<T> out(x.numel());
  auto xs = x.data(), ws = w.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xs[r * c + j] * ws[j];
  return detail::make_op("mul_rowwise", x.shape(), std::move(out), {x, w}, [rows, c](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& wv = self.inputs[1]->value;
    if (auto g = detail::sink(self, 0); !g.empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[r * c + j] * wv[j];
    if (auto g = detail::sink(self, 1); !g.empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[r * c + j] * xv[r * c + j];
  });
}

// Stacks `n` copies of a row vector into [n, C].
template <class T>
Tensor<T> repeat_rows(const Tensor<T>& row, std::size_t n) {
  const std::size_t c = row.numel();
  std::vector<T> out(n * c);
  auto rs = row.data();
  for (std::size_t r = 0; r < n; ++r) std::copy(rs.begin(), rs.end(), out.begin() + static_cast<std::ptrdiff_t>(r * c));
  return detail::make_op("repeat_rows", {n, c}, std::move(out), {row}, [n, c](Node<T>& self) {
    if (auto g = detail::sink(self, 0); !g.empty())
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[r * c + j];
  });
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) throw ShapeError("reshape", x.shape(), shape);
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_op("reshape", std::move(shape), std::move(out), {x}, [](Node<T>& self) {
    if (auto g = detail::sink(self, 0); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat", "axis out of range for " + shape_str(shape));
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = shape;
    if (a.size() != b.size()) throw ShapeError("concat", shape, p.shape());
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat", shape, p.shape());
    total += p.dim(axis);
  }
  shape[axis] = total;
  const auto split = detail::split_axis(shape, axis, "concat");
  std::vector<T> out(numel(shape));
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * split.inner;
    auto ps = p.data();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(ps.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * split.inner + off));
    widths.push_back(w);
    off += w;
  }
  const std::size_t row = total * split.inner, outer = split.outer;
  return detail::make_op_list("concat", shape, std::move(out), parts, [widths, row, outer](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = widths[k];
      if (auto g = detail::sink(self, k); !g.empty())
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < w; ++i) g[o * w + i] += self.grad[o * row + off + i];
      off += w;
    }
  });
}

// Half-open range [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto split = detail::split_axis(x.shape(), axis, "slice");
  if (begin > end || end > split.n)
    throw ShapeError("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                                  shape_str(x.shape()));
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t w = (end - begin) * split.inner, row = split.n * split.inner, off = begin * split.inner;
  std::vector<T> out(split.outer * w);
  auto xs = x.data();
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(xs.begin() + static_cast<std::ptrdiff_t>(o * row + off), w,
                out.begin() + static_cast<std::ptrdiff_t>(o * w));
  const std::size_t outer = split.outer;
  return detail::make_op("slice", std::move(shape), std::move(out), {x}, [outer, w, row, off](Node<T>& self) {
    if (auto g = detail::sink(self, 0); !g.empty())
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < w; ++i) g[o * row + off + i] += self.grad[o * w + i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations along an axis

template <class T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis, "sum");
  std::vector<T> out(s.outer * s.inner, T(0));
  auto xs = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xs[(o * s.n + k) * s.inner + i];
  return detail::make_op("sum", detail::drop_axis(x.shape(), axis), std::move(out), {x}, [s](Node<T>& self) {
    if (auto g = detail::sink(self, 0); !g.empty())
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t k = 0; k < s.n; ++k)
          for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.n + k) * s.inner + i] += self.grad[o * s.inner + i];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  const auto n = x.shape().at(axis);
  return scale(sum(x, axis), T(1) / static_cast<T>(n));
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_op("sum_all", {}, std::vector<T>{acc}, {x}, [](Node<T>& self) {
    if (auto g = detail::sink(self, 0); !g.empty())
      for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// Euclidean norm along `axis` (axis removed). Zero vectors get a zero gradient.
template <class T>
Tensor<T> l2norm(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis, "l2norm");
  std::vector<T> out(s.outer * s.inner, T(0));
  auto xs = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const T v = xs[(o * s.n + k) * s.inner + i];
        out[o * s.inner + i] += v * v;
      }
  for (auto& v : out) v = std::sqrt(v);
  return detail::make_op("l2norm", detail::drop_axis(x.shape(), axis), std::move(out), {x}, [s](Node<T>& self) {
    auto g = detail::sink(self, 0);
    if (g.empty()) return;
    const auto& xv = self.inputs[0]->value;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const T nrm = self.value[o * s.inner + i];
        if (nrm == T(0)) continue;
        const T c = self.grad[o * s.inner + i] / nrm;
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t idx = (o * s.n + k) * s.inner + i;
          g[idx] += c * xv[idx];
        }
      }
  });
}

// x / ||x|| along `axis`. Throws NumericalError on a zero vector.
template <class T>
Tensor<T> normalize(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis, "normalize");
  std::vector<T> norms(s.outer * s.inner, T(0));
  auto xs = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const T v = xs[(o * s.n + k) * s.inner + i];
        norms[o * s.inner + i] += v * v;
      }
  for (std::size_t j = 0; j < norms.size(); ++j) {
    norms[j] = std::sqrt(norms[j]);
    if (!(norms[j] > T(0))) throw NumericalError("normalize: zero-norm vector at index " + std::to_string(j));
  }
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t idx = (o * s.n + k) * s.inner + i;
        out[idx] = xs[idx] / norms[o * s.inner + i];
      }
  return detail::make_op("normalize", x.shape(), std::move(out), {x}, [s, norms = std::move(norms)](Node<T>& self) {
    auto g = detail::sink(self, 0);
    if (g.empty()) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        T dot = T(0);
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t idx = (o * s.n + k) * s.inner + i;
          dot += self.grad[idx] * self.value[idx];
        }
        const T inv = T(1) / norms[o * s.inner + i];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t idx = (o * s.n + k) * s.inner + i;
          g[idx] += inv * (self.grad[idx] - dot * self.value[idx]);
        }
      }
  });
}

// Cosine similarity of a and b along `axis` (axis removed).
template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
  detail::require_same("cosine_similarity", a, b);
  const auto s = detail::split_axis(a.shape(), axis, "cosine_similarity");
  const std::size_t m = s.outer * s.inner;
  std::vector<T> dot(m, T(0)), na(m, T(0)), nb(m, T(0));
  auto as = a.data(), bs = b.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t idx = (o * s.n + k) * s.inner + i, j = o * s.inner + i;
        dot[j] += as[idx] * bs[idx];
        na[j] += as[idx] * as[idx];
        nb[j] += bs[idx] * bs[idx];
      }
  std::vector<T> out(m);
  for (std::size_t j = 0; j < m; ++j) {
    na[j] = std::sqrt(na[j]);
    nb[j] = std::sqrt(nb[j]);
    if (!(na[j] > T(0)) || !(nb[j] > T(0)))
      throw NumericalError("cosine_similarity: zero-norm vector at index " + std::to_string(j));
    out[j] = dot[j] / (na[j] * nb[j]);
  }
  return detail::make_op("cosine_similarity", detail::drop_axis(a.shape(), axis), std::move(out), {a, b},
                         [s, na = std::move(na), nb = std::move(nb)](Node<T>& self) {
                           const auto& av = self.inputs[0]->value;
                           const auto& bv = self.inputs[1]->value;
                           auto ga = detail::sink(self, 0);
                           auto gb = detail::sink(self, 1);
                           for (std::size_t o = 0; o < s.outer; ++o)
                             for (std::size_t i = 0; i < s.inner; ++i) {
                               const std::size_t j = o * s.inner + i;
                               const T c = self.value[j], dy = self.grad[j];
                               const T inv = T(1) / (na[j] * nb[j]);
                               for (std::size_t k = 0; k < s.n; ++k) {
                                 const std::size_t idx = (o * s.n + k) * s.inner + i;
                                 if (!ga.empty()) ga[idx] += dy * (bv[idx] * inv - c * av[idx] / (na[j] * na[j]));
                                 if (!gb.empty()) gb[idx] += dy * (av[idx] * inv - c * bv[idx] / (nb[j] * nb[j]));
                               }
                             }
                         });
}

// softmax(x / temperature) along `axis`.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis, T temperature = T(1)) {
  if (!(temperature > T(0))) throw NumericalError("softmax: temperature must be positive");
  const auto s = detail::split_axis(x.shape(), axis, "softmax");
  const T inv_t = T(1) / temperature;
  std::vector<T> out(x.numel());
  auto xs = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
      T mx = xs[at(0)];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, xs[at(k)]);
      T z = T(0);
      for (std::size_t k = 0; k < s.n; ++k) {
        out[at(k)] = std::exp((xs[at(k)] - mx) * inv_t);
        z += out[at(k)];
      }
      for (std::size_t k = 0; k < s.n; ++k) out[at(k)] /= z;
    }
  return detail::make_op("softmax", x.shape(), std::move(out), {x}, [s, inv_t](Node<T>& self) {
    auto g = detail::sink(self, 0);
    if (g.empty()) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t k) { return (o * s.n + k) * s.inner + i; };
        T dot = T(0);
        for (std::size_t k = 0; k < s.n; ++k) dot += self.grad[at(k)] * self.value[at(k)];
        for (std::size_t k = 0; k < s.n; ++k) g[at(k)] += inv_t * self.value[at(k)] * (self.grad[at(k)] - dot);
      }
  });
}

// Normalizes over the last axis: (x - mean) / sqrt(var + eps), no affine.
// A constant row maps to zeros.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  if (x.rank() == 0) throw ShapeError("layer_norm", "scalar input");
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  std::vector<T> out(x.numel()), inv_std(rows);
  auto xs = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs.data() + r * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = (row[j] - mu) * inv_std[r];
  }
  return detail::make_op("layer_norm", x.shape(), std::move(out), {x},
                         [c, rows, inv_std = std::move(inv_std)](Node<T>& self) {
                           auto g = detail::sink(self, 0);
                           if (g.empty()) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* dy = self.grad.data() + r * c;
                             const T* y = self.value.data() + r * c;
                             T mdy = T(0), mdyy = T(0);
                             for (std::size_t j = 0; j < c; ++j) {
                               mdy += dy[j];
                               mdyy += dy[j] * y[j];
                             }
                             mdy /= static_cast<T>(c);
                             mdyy /= static_cast<T>(c);
                             for (std::size_t j = 0; j < c; ++j)
                               g[r * c + j] += inv_std[r] * (dy[j] - mdy - y[j] * mdyy);
                           }
                         });
}

// ---------------------------------------------------------------------------
// Backward

// Topologically ordered view of the differentiable part of a graph.
template <class T>
class Graph {
 public:
  static Graph trace(const Tensor<T>& root) {
    Graph g;
    if (!root.requires_grad()) return g;
    std::unordered_set<const Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(&root.node(), 0);
    seen.insert(&root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* in = node->inputs[next++].get();
        if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
      } else {
        g.order_.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }

  // Inputs precede outputs.
  std::span<Node<T>* const> nodes() const { return order_; }
  std::size_t size() const { return order_.size(); }

 private:
  std::vector<Node<T>*> order_;
};

template <class T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1) throw ShapeError("backward", "root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;
  auto graph = Graph<T>::trace(root);
  for (Node<T>* n : graph.nodes())
    if (!n->is_leaf()) n->grad.assign(n->value.size(), T(0));
  root.node().grad_buffer()[0] += T(1);
  auto order = graph.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

// Max over all parameter entries of |analytic - numeric| / max(1, |numeric|),
// using central differences of step h. `f` must rebuild its graph from the
// current parameter values on every call.
template <class T, class F>
T grad_check(F&& f, std::vector<Tensor<T>> params, T h) {
  if (!(h >= T(1e-5) && h <= T(1e-2))) throw ConfigError("h", "finite-difference step must lie in [1e-5, 1e-2]");
  for (auto& p : params) p.zero_grad();
  Tensor<T> loss = f();
  if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericalError("grad_check: non-finite loss");
  backward(loss);
  T worst = T(0);
  std::size_t flat = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<T> analytic(p.grad().begin(), p.grad().end());
    auto vals = p.mutable_data();
    for (std::size_t i = 0; i < vals.size(); ++i, ++flat) {
      const T orig = vals[i];
      vals[i] = orig + h;
      const T up = f().item();
      vals[i] = orig - h;
      const T down = f().item();
      vals[i] = orig;
      const T numeric = (up - down) / (T(2) * h);
      if (!std::isfinite(static_cast<double>(numeric)) || !std::isfinite(static_cast<double>(analytic[i])))
        throw NumericalError("grad_check: non-finite gradient at parameter " + std::to_string(pi) + " element " +
                             std::to_string(i) + " (flat index " + std::to_string(flat) + ")");
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(T(1), std::abs(numeric)));
    }
  }
  return worst;
}

}  // namespace mvadapt
