#pragma once

// Dense f64 tensors with reverse-mode differentiation over a fixed op set.
//
// A Tensor is a shared handle. Ops applied to tensors that require gradients
// record a GraphNode on the result; backward() walks the recorded graph once
// in reverse topological order. Leaf gradients accumulate across backward
// calls until zero_grad(); interior gradients are recomputed on every call.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <boost/math/special_functions/digamma.hpp>

#include "acd/errors.hpp"

namespace acd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

enum class OpKind {
  Leaf,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Square,
  Sum,
  Mean,
  Tanh,
  Sqrt,
  Softplus,
  Lgamma,
  Concat,
  RowBroadcastAdd,
  Reshape,
  GatherRows,
  MeanRows,
  Conv1dSame,
  SoftmaxT,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Square: return "square";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Softplus: return "softplus";
    case OpKind::Lgamma: return "lgamma";
    case OpKind::Concat: return "concat";
    case OpKind::RowBroadcastAdd: return "row_broadcast_add";
    case OpKind::Reshape: return "reshape";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::MeanRows: return "mean_rows";
    case OpKind::Conv1dSame: return "conv1d_same";
    case OpKind::SoftmaxT: return "softmax_t";
  }
  return "?";
}

struct TensorImpl;

struct GraphNode {
  OpKind op = OpKind::Leaf;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads self.grad and accumulates into the inputs' grad buffers.
  std::function<void(TensorImpl& self)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first needed
  std::unique_ptr<GraphNode> node;

  void accumulate(std::span<const double> g) {
    if (!requires_grad) return;
    if (grad.empty()) grad.assign(data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
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

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    if (numel_of(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }
  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  // Rank 0 and 1 read as a single row.
  std::size_t rows() const { return rank() == 2 ? impl_->shape[0] : 1; }
  std::size_t cols() const {
    if (rank() == 0) return 1;
    return rank() == 1 ? impl_->shape[0] : impl_->shape[1];
  }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  double at(std::size_t i) const { return impl_->data.at(i); }
  double at(std::size_t r, std::size_t c) const { return impl_->data.at(r * cols() + c); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }
  bool is_leaf() const { return !impl_->node; }
  OpKind op() const { return impl_->node ? impl_->node->op : OpKind::Leaf; }

  // Copy of the values with no graph attachment.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

// Builds the output tensor and, when needed, its graph node.
inline Tensor make_result(Shape shape, std::vector<double> data, OpKind op,
                          std::vector<Tensor> inputs,
                          std::function<void(TensorImpl&)> backward) {
  bool track = false;
  if (grad_enabled())
    for (const Tensor& t : inputs) track = track || t.requires_grad();
  Tensor out(std::move(shape), std::move(data), track);
  if (track) {
    auto node = std::make_unique<GraphNode>();
    node->op = op;
    for (const Tensor& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
  }
  return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
}

inline void require_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
}

template <class F, class DF>
Tensor unary(const Tensor& x, OpKind op, F f, DF df_from_in_out) {
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  auto xi = x.impl();
  return make_result(x.shape(), std::move(out), op, {x}, [xi, df_from_in_out](TensorImpl& self) {
    std::vector<double> g(self.data.size());
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] = self.grad[i] * df_from_in_out(xi->data[i], self.data[i]);
    xi->accumulate(g);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result(a.shape(), std::move(out), OpKind::Add, {a, b},
                             [ai, bi](TensorImpl& self) {
                               ai->accumulate(self.grad);
                               bi->accumulate(self.grad);
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result(a.shape(), std::move(out), OpKind::Sub, {a, b},
                             [ai, bi](TensorImpl& self) {
                               ai->accumulate(self.grad);
                               if (!bi->requires_grad) return;
                               std::vector<double> g(self.grad.size());
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
                               bi->accumulate(g);
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result(a.shape(), std::move(out), OpKind::Mul, {a, b},
                             [ai, bi](TensorImpl& self) {
                               const std::size_t n = self.grad.size();
                               std::vector<double> g(n);
                               if (ai->requires_grad) {
                                 for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * bi->data[i];
                                 ai->accumulate(g);
                               }
                               if (bi->requires_grad) {
                                 for (std::size_t i = 0; i < n; ++i) g[i] = self.grad[i] * ai->data[i];
                                 bi->accumulate(g);
                               }
                             });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      x, OpKind::Scale, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(
      x, OpKind::AddScalar, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(
      x, OpKind::Square, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, OpKind::Tanh, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sqrt(const Tensor& x) {
  for (double v : x.data())
    if (v < 0.0) throw DomainError("sqrt of negative value");
  return detail::unary(
      x, OpKind::Sqrt, [](double v) { return std::sqrt(v); },
      // Subgradient 0 at the origin keeps zero distances finite.
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

// log(1 + e^x), evaluated without overflow.
inline double softplus_value(double v) {
  return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(x, OpKind::Softplus, softplus_value, [](double v, double) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  });
}

inline Tensor lgamma(const Tensor& x) {
  for (double v : x.data())
    if (!(v > 0.0)) throw DomainError("lgamma requires positive arguments");
  return detail::unary(
      x, OpKind::Lgamma, [](double v) { return std::lgamma(v); },
      [](double v, double) { return boost::math::digamma(v); });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xi = x.impl();
  return detail::make_result({}, {s}, OpKind::Sum, {x}, [xi](TensorImpl& self) {
    std::vector<double> g(xi->data.size(), self.grad[0]);
    xi->accumulate(g);
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  auto xi = x.impl();
  return detail::make_result({}, {s / n}, OpKind::Mean, {x}, [xi, n](TensorImpl& self) {
    std::vector<double> g(xi->data.size(), self.grad[0] / n);
    xi->accumulate(g);
  });
}

// Column-wise mean over the rows of an r×c matrix, yielding a length-c vector.
inline Tensor mean_rows(const Tensor& m) {
  if (m.rank() != 2 || m.rows() == 0) throw ShapeError("mean_rows expects a non-empty matrix");
  const std::size_t r = m.rows(), c = m.cols();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += m.data()[i * c + j];
  for (double& v : out) v /= static_cast<double>(r);
  auto mi = m.impl();
  return detail::make_result({c}, std::move(out), OpKind::MeanRows, {m}, [mi, r, c](TensorImpl& self) {
    std::vector<double> g(r * c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] = self.grad[j] / static_cast<double>(r);
    mi->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and structure

// (m×k)·(k×n). A rank-1 left operand is read as 1×k and yields a rank-1 result.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || a.rank() > 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-1/2 left and rank-2 right operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  auto A = a.data(), B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  Shape shape = a.rank() == 1 ? Shape{n} : Shape{m, n};
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result(std::move(shape), std::move(out), OpKind::MatMul, {a, b},
                             [ai, bi, m, k, n](TensorImpl& self) {
                               const auto& G = self.grad;
                               if (ai->requires_grad) {
                                 // dA = G · Bᵀ
                                 std::vector<double> g(m * k, 0.0);
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                     double s = 0.0;
                                     for (std::size_t j = 0; j < n; ++j)
                                       s += G[i * n + j] * bi->data[p * n + j];
                                     g[i * k + p] = s;
                                   }
                                 ai->accumulate(g);
                               }
                               if (bi->requires_grad) {
                                 // dB = Aᵀ · G
                                 std::vector<double> g(k * n, 0.0);
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t p = 0; p < k; ++p) {
                                     const double av = ai->data[i * k + p];
                                     if (av == 0.0) continue;
                                     for (std::size_t j = 0; j < n; ++j)
                                       g[p * n + j] += av * G[i * n + j];
                                   }
                                 bi->accumulate(g);
                               }
                             });
}

// Adds a length-c vector to every row of an r×c matrix.
inline Tensor row_broadcast_add(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1 || v.numel() != m.cols())
    throw ShapeError("row_broadcast_add: " + shape_str(m.shape()) + " + " + shape_str(v.shape()));
  const std::size_t r = m.rows(), c = m.cols();
  std::vector<double> out(m.data().begin(), m.data().end());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += v.data()[j];
  auto mi = m.impl(), vi = v.impl();
  return detail::make_result(m.shape(), std::move(out), OpKind::RowBroadcastAdd, {m, v},
                             [mi, vi, r, c](TensorImpl& self) {
                               mi->accumulate(self.grad);
                               if (!vi->requires_grad) return;
                               std::vector<double> g(c, 0.0);
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
                               vi->accumulate(g);
                             });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto xi = x.impl();
  return detail::make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()),
                             OpKind::Reshape, {x}, [xi](TensorImpl& self) { xi->accumulate(self.grad); });
}

// Concatenation along the leading axis. Scalars join into a vector, vectors
// join end to end, and matrices with equal column counts stack by rows.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t rank = parts.front().rank();
  std::size_t lead = 0, total = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != rank) throw ShapeError("concat: mixed ranks");
    if (rank == 2 && t.cols() != parts.front().cols()) throw ShapeError("concat: column counts differ");
    if (rank > 2) throw ShapeError("concat: rank > 2 unsupported");
    lead += rank == 0 ? 1 : t.shape()[0];
    total += t.numel();
  }
  std::vector<double> out;
  out.reserve(total);
  for (const Tensor& t : parts) out.insert(out.end(), t.data().begin(), t.data().end());
  Shape shape = rank == 2 ? Shape{lead, parts.front().cols()} : Shape{lead};
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const Tensor& t : parts) impls.push_back(t.impl());
  return detail::make_result(std::move(shape), std::move(out), OpKind::Concat, parts,
                             [impls](TensorImpl& self) {
                               std::size_t off = 0;
                               for (const auto& p : impls) {
                                 const std::size_t n = p->data.size();
                                 p->accumulate(std::span<const double>(self.grad).subspan(off, n));
                                 off += n;
                               }
                             });
}

// Row lookup: returns the rows of a V×d table named by ids, as an n×d matrix.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows expects a matrix table");
  const std::size_t V = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= V)
      throw LookupError("row id " + std::to_string(ids[i]) + " out of range for table of " +
                        std::to_string(V) + " rows");
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  auto ti = table.impl();
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return detail::make_result({ids.size(), d}, std::move(out), OpKind::GatherRows, {table},
                             [ti, idv = std::move(idv), d](TensorImpl& self) {
                               if (!ti->requires_grad) return;
                               auto g = ti->grad_buffer();
                               for (std::size_t i = 0; i < idv.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j) g[idv[i] * d + j] += self.grad[i * d + j];
                             });
}

// Same-length 1-D convolution over an n×d_in sequence with an m×d_in×d_out
// kernel, zero-padded by (m-1)/2 rows on each side.
inline Tensor conv1d_same(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  if (input.rank() != 2 || kernel.rank() != 3 || bias.rank() != 1)
    throw ShapeError("conv1d_same expects input n×d_in, kernel m×d_in×d_out, bias d_out");
  const std::size_t n = input.rows(), din = input.cols();
  const std::size_t m = kernel.shape()[0], kin = kernel.shape()[1], dout = kernel.shape()[2];
  if (kin != din)
    throw ShapeError("conv1d_same: kernel input channels " + std::to_string(kin) +
                     " do not match input width " + std::to_string(din));
  if (bias.numel() != dout) throw ShapeError("conv1d_same: bias length mismatch");
  if (m % 2 == 0) throw ShapeError("conv1d_same: window must be odd");
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(m / 2);
  auto X = input.data(), K = kernel.data(), B = bias.data();
  std::vector<double> out(n * dout);
  for (std::size_t i = 0; i < n; ++i) std::copy(B.begin(), B.end(), out.begin() + static_cast<std::ptrdiff_t>(i * dout));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < m; ++t) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(t) - half;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
      for (std::size_t c = 0; c < din; ++c) {
        const double xv = X[static_cast<std::size_t>(src) * din + c];
        if (xv == 0.0) continue;
        const double* krow = &K[(t * din + c) * dout];
        double* orow = &out[i * dout];
        for (std::size_t o = 0; o < dout; ++o) orow[o] += xv * krow[o];
      }
    }
  auto xi = input.impl(), ki = kernel.impl(), bi = bias.impl();
  return detail::make_result(
      {n, dout}, std::move(out), OpKind::Conv1dSame, {input, kernel, bias},
      [xi, ki, bi, n, din, m, dout, half](TensorImpl& self) {
        const auto& G = self.grad;
        if (bi->requires_grad) {
          std::vector<double> g(dout, 0.0);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < dout; ++o) g[o] += G[i * dout + o];
          bi->accumulate(g);
        }
        std::vector<double> gx(xi->requires_grad ? n * din : 0, 0.0);
        std::vector<double> gk(ki->requires_grad ? m * din * dout : 0, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t t = 0; t < m; ++t) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(t) - half;
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
            const std::size_t s = static_cast<std::size_t>(src);
            const double* grow = &G[i * dout];
            for (std::size_t c = 0; c < din; ++c) {
              const std::size_t kbase = (t * din + c) * dout;
              if (!gx.empty()) {
                double acc = 0.0;
                for (std::size_t o = 0; o < dout; ++o) acc += grow[o] * ki->data[kbase + o];
                gx[s * din + c] += acc;
              }
              if (!gk.empty()) {
                const double xv = xi->data[s * din + c];
                for (std::size_t o = 0; o < dout; ++o) gk[kbase + o] += xv * grow[o];
              }
            }
          }
        if (!gx.empty()) xi->accumulate(gx);
        if (!gk.empty()) ki->accumulate(gk);
      });
}

// softmax(scores / temperature) over a vector, stabilised by max subtraction.
inline Tensor softmax_t(const Tensor& scores, double temperature = 1.0) {
  if (scores.rank() != 1 || scores.numel() == 0) throw ShapeError("softmax_t expects a non-empty vector");
  if (!(temperature > 0.0)) throw DomainError("softmax_t temperature must be positive");
  detail::require_finite(scores.data(), "softmax_t");
  const std::size_t k = scores.numel();
  auto s = scores.data();
  const double mx = *std::max_element(s.begin(), s.end());
  std::vector<double> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = std::exp((s[i] - mx) / temperature);
  // Summing in sorted order makes the result exactly permutation-equivariant.
  std::vector<double> sorted = out;
  std::sort(sorted.begin(), sorted.end());
  const double z = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  for (double& v : out) v /= z;
  auto si = scores.impl();
  return detail::make_result({k}, std::move(out), OpKind::SoftmaxT, {scores},
                             [si, temperature](TensorImpl& self) {
                               const auto& y = self.data;
                               double dot = 0.0;
                               for (std::size_t i = 0; i < y.size(); ++i) dot += self.grad[i] * y[i];
                               std::vector<double> g(y.size());
                               for (std::size_t i = 0; i < y.size(); ++i)
                                 g[i] = y[i] * (self.grad[i] - dot) / temperature;
                               si->accumulate(g);
                             });
}

// ---------------------------------------------------------------------------
// Backward

// Populates grad on every requires_grad ancestor of a scalar loss. Leaf
// gradients accumulate into existing buffers, so a second call without
// zero_grad() adds the same gradient again.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{loss.impl().get(), 0}};
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      TensorImpl* child = node->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (TensorImpl* t : order)
    if (t->node) t->grad.assign(t->data.size(), 0.0);
  loss.impl()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (t->node) t->node->backward(*t);
  }
}

}  // namespace acd
