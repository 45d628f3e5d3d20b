#pragma once

// Tape-based reverse-mode differentiation over a fixed set of matrix
// primitives. Every value on the tape is a rank-2 tensor; vectors are 1 x D.
// Nodes are appended in evaluation order, so walking the tape backwards is a
// reverse topological order and each node is visited exactly once.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "computer/errors.hpp"
#include "computer/tensor.hpp"

namespace computer {

/// A named trainable tensor with its gradient accumulator.
template <std::floating_point T>
struct Parameter {
  std::string name;
  std::string group;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::string g, Tensor<T> v)
      : name(std::move(n)), group(std::move(g)), value(std::move(v)),
        grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

template <std::floating_point T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  const Tensor<T>& value() const { return tape_->value(id_); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  /// Scalar read of a 1 x 1 node.
  T item() const { return value()[0]; }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

struct TapeOptions {
  /// When false, parameters and leaves are recorded as constants and no
  /// backward closures are kept (inference / finite-difference probes).
  bool grad_enabled = true;
  /// Throw NumericError as soon as an op produces NaN/Inf.
  bool check_finite = true;
  /// Test hook: the gradient flowing into every node recorded by this op is
  /// multiplied by corrupt_factor before its backward runs.
  std::string corrupt_op;
  double corrupt_factor = 1.0;
};

template <std::floating_point T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  explicit Tape(TapeOptions opts = {}) : opts_(std::move(opts)) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push("const", std::move(v), false, {}); }

  /// Differentiable leaf not tied to a Parameter (inputs under test).
  Var<T> leaf(Tensor<T> v) {
    return push("leaf", std::move(v), opts_.grad_enabled, {});
  }

  /// Leaf bound to a parameter; bound once per tape, gradients flow back into
  /// p.grad when backward() runs.
  Var<T> parameter(Parameter<T>& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return {this, it->second};
    Var<T> v = push("param", p.value, opts_.grad_enabled, {});
    nodes_[v.id()].param = &p;
    bound_.emplace(&p, v.id());
    return v;
  }

  /// Appends an op result. The backward closure is kept only when some input
  /// needs a gradient.
  Var<T> record(const char* op, Tensor<T> value,
                std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    return record_impl(op, std::move(value), needs, std::move(fn));
  }

  Var<T> record(const char* op, Tensor<T> value, std::span<const Var<T>> inputs,
                BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
    return record_impl(op, std::move(value), needs, std::move(fn));
  }

  const Tensor<T>& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  /// Gradient of a node after backward(); zeros if nothing reached it.
  Tensor<T> grad(Var<T> v) const {
    const auto& n = nodes_[v.id()];
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  /// Accumulator for node `id`, allocated on first use; nullptr when the
  /// node does not take gradients.
  Tensor<T>* grad_slot(std::uint32_t id) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }

  const Tensor<T>& out_grad(std::uint32_t id) const { return nodes_[id].grad; }

  /// Seeds d(root)/d(root) = 1 (root must be 1 x 1) and propagates. Parameter
  /// leaves add their gradient into Parameter::grad. Returns the number of
  /// nodes whose backward ran.
  std::size_t backward(Var<T> root) {
    if (root.value().size() != 1)
      throw DimensionError("backward needs a scalar root, got " +
                           shape_str(root.value().shape()));
    auto* seed = grad_slot(root.id());
    if (!seed) return 0;
    seed->fill(T(1));
    std::size_t visited = 0;
    for (std::int64_t i = root.id(); i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (!opts_.corrupt_op.empty() && opts_.corrupt_op == n.op)
        for (auto& g : n.grad.data()) g *= static_cast<T>(opts_.corrupt_factor);
      if (n.backward) {
        n.backward(*this, static_cast<std::uint32_t>(i));
        ++visited;
      }
      if (n.param) {
        auto& pg = n.param->grad;
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
    if (opts_.check_finite)
      for (const auto& n : nodes_)
        if (!n.grad.empty() && !n.grad.all_finite())
          throw NumericError(std::string("non-finite gradient at op ") + n.op);
    return visited;
  }

  std::size_t size() const { return nodes_.size(); }

  std::vector<std::string_view> ops() const {
    std::vector<std::string_view> out;
    out.reserve(nodes_.size());
    for (const auto& n : nodes_) out.emplace_back(n.op);
    return out;
  }

  void warn(std::string msg) { warnings_.push_back(std::move(msg)); }
  const std::vector<std::string>& warnings() const { return warnings_; }

  const TapeOptions& options() const { return opts_; }

 private:
  struct Node {
    const char* op;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  Var<T> push(const char* op, Tensor<T> v, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{op, std::move(v), {}, rg, std::move(fn)});
    return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var<T> record_impl(const char* op, Tensor<T> value, bool needs,
                     BackwardFn fn) {
    if (opts_.check_finite && !value.all_finite())
      throw NumericError(std::string("non-finite value produced by ") + op);
    return push(op, std::move(value), needs, needs ? std::move(fn) : BackwardFn{});
  }

  TapeOptions opts_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::uint32_t> bound_;
  std::vector<std::string> warnings_;
};

// ---------------------------------------------------------------------------
// Dense kernels (no tape). C += op(A) * op(B), fixed summation order.

namespace kernel {

template <std::floating_point T>
void gemm_acc(const Tensor<T>& a, bool ta, const Tensor<T>& b, bool tb,
              Tensor<T>& c) {
  const std::size_t n = ta ? a.cols() : a.rows();
  const std::size_t k = ta ? a.rows() : a.cols();
  const std::size_t m = tb ? b.rows() : b.cols();
  const T* A = a.data().data();
  const T* B = b.data().data();
  T* C = c.data().data();
  const std::size_t lda = a.cols(), ldb = b.cols();
  if (!ta && !tb) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const T av = A[i * lda + p];
        const T* brow = B + p * ldb;
        T* crow = C + i * m;
        for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        T s = 0;
        const T* arow = A + i * lda;
        const T* brow = B + j * ldb;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        C[i * m + j] += s;
      }
  } else if (ta && !tb) {
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < n; ++i) {
        const T av = A[p * lda + i];
        const T* brow = B + p * ldb;
        T* crow = C + i * m;
        for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
  } else {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        T s = 0;
        for (std::size_t p = 0; p < k; ++p) s += A[p * lda + i] * B[j * ldb + p];
        C[i * m + j] += s;
      }
  }
}

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ, " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> c({a.rows(), b.cols()});
  gemm_acc(a, false, b, false, c);
  return c;
}

template <std::floating_point T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Differentiable primitives.

namespace detail {

template <std::floating_point T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.value().shape() != b.value().shape())
    throw DimensionError(std::string(op) + ": shapes differ, " +
                         shape_str(a.value().shape()) + " vs " +
                         shape_str(b.value().shape()));
}

template <std::floating_point T>
void require_matrix(const char* op, const Var<T>& a) {
  if (a.value().rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(a.value().shape()));
}

}  // namespace detail

template <std::floating_point T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  Tensor<T> out = kernel::matmul(a.value(), b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {a, b},
                         [ia, ib](Tape<T>& t, std::uint32_t self) {
                           const auto& g = t.out_grad(self);
                           if (auto* ga = t.grad_slot(ia))
                             kernel::gemm_acc(g, false, t.value(ib), true, *ga);
                           if (auto* gb = t.grad_slot(ib))
                             kernel::gemm_acc(t.value(ia), true, g, false, *gb);
                         });
}

/// a * b^T.
template <std::floating_point T>
Var<T> matmul_bt(const Var<T>& a, const Var<T>& b) {
  detail::require_matrix("matmul_bt", a);
  detail::require_matrix("matmul_bt", b);
  if (a.cols() != b.cols())
    throw DimensionError("matmul_bt: inner dimensions differ, " +
                         shape_str(a.value().shape()) + " x " +
                         shape_str(b.value().shape()) + "^T");
  Tensor<T> out({a.rows(), b.rows()});
  kernel::gemm_acc(a.value(), false, b.value(), true, out);
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {a, b},
                         [ia, ib](Tape<T>& t, std::uint32_t self) {
                           const auto& g = t.out_grad(self);
                           if (auto* ga = t.grad_slot(ia))
                             kernel::gemm_acc(g, false, t.value(ib), false, *ga);
                           if (auto* gb = t.grad_slot(ib))
                             kernel::gemm_acc(g, true, t.value(ia), false, *gb);
                         });
}

template <std::floating_point T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> out = a.value();
  kernel::add_into(out, b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {a, b},
                         [ia, ib](Tape<T>& t, std::uint32_t self) {
                           const auto& g = t.out_grad(self);
                           if (auto* ga = t.grad_slot(ia)) kernel::add_into(*ga, g);
                           if (auto* gb = t.grad_slot(ib)) kernel::add_into(*gb, g);
                         });
}

template <std::floating_point T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {a, b},
                         [ia, ib](Tape<T>& t, std::uint32_t self) {
                           const auto& g = t.out_grad(self);
                           if (auto* ga = t.grad_slot(ia)) kernel::add_into(*ga, g);
                           if (auto* gb = t.grad_slot(ib))
                             for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
                         });
}

/// Broadcasts a 1 x m row over every row of a.
template <std::floating_point T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw DimensionError("add_row: " + shape_str(row.value().shape()) +
                         " cannot broadcast over " + shape_str(a.value().shape()));
  Tensor<T> out = a.value();
  const std::size_t n = a.rows(), m = a.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += row.value()[j];
  const auto ia = a.id(), ir = row.id();
  return a.tape().record("add", std::move(out), {a, row},
                         [ia, ir, n, m](Tape<T>& t, std::uint32_t self) {
                           const auto& g = t.out_grad(self);
                           if (auto* ga = t.grad_slot(ia)) kernel::add_into(*ga, g);
                           if (auto* gr = t.grad_slot(ir))
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < m; ++j) (*gr)[j] += g(i, j);
                         });
}

/// Elementwise product.
template <std::floating_point T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().record("mul", std::move(out), {a, b},
                         [ia, ib](Tape<T>& t, std::uint32_t self) {
                           const auto& g = t.out_grad(self);
                           if (auto* ga = t.grad_slot(ia))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               (*ga)[i] += g[i] * t.value(ib)[i];
                           if (auto* gb = t.grad_slot(ib))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               (*gb)[i] += g[i] * t.value(ia)[i];
                         });
}

template <std::floating_point T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  const auto ia = a.id();
  return a.tape().record("scale", std::move(out), {a},
                         [ia, s](Tape<T>& t, std::uint32_t self) {
                           const auto& g = t.out_grad(self);
                           if (auto* ga = t.grad_slot(ia))
                             for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
                         });
}

template <std::floating_point T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v += s;
  const auto ia = a.id();
  return a.tape().record("add", std::move(out), {a},
                         [ia](Tape<T>& t, std::uint32_t self) {
                           if (auto* ga = t.grad_slot(ia))
                             kernel::add_into(*ga, t.out_grad(self));
                         });
}

/// Horizontal concatenation [a | b | ...]; all parts share the row count.
template <std::floating_point T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require_matrix("concat_cols", p);
    if (p.rows() != n)
      throw DimensionError("concat_cols: row counts differ, " +
                           std::to_string(n) + " vs " + std::to_string(p.rows()));
    total += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  Tensor<T> out({n, total});
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
    off += p.cols();
  }
  return parts[0].tape().record(
      "concat", std::move(out), parts,
      [ids, widths, n](Tape<T>& t, std::uint32_t self) {
        const auto& g = t.out_grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (auto* gk = t.grad_slot(ids[k]))
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < widths[k]; ++j) (*gk)(i, j) += g(i, off + j);
          off += widths[k];
        }
      });
}

template <std::floating_point T>
Var<T> concat_cols(std::initializer_list<Var<T>> parts) {
  return concat_cols(std::span<const Var<T>>(parts.begin(), parts.size()));
}

/// Vertical concatenation; all parts share the column count.
template <std::floating_point T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t m = parts[0].cols();
  std::size_t total = 0;
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    detail::require_matrix("concat_rows", p);
    if (p.cols() != m)
      throw DimensionError("concat_rows: column counts differ, " +
                           std::to_string(m) + " vs " + std::to_string(p.cols()));
    offsets.push_back(total * m);
    total += p.rows();
    ids.push_back(p.id());
  }
  if (parts.size() == 1) return parts[0];
  std::vector<T> data;
  data.reserve(total * m);
  for (const auto& p : parts)
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return parts[0].tape().record(
      "concat", Tensor<T>({total, m}, std::move(data)), parts,
      [ids, offsets](Tape<T>& t, std::uint32_t self) {
        const auto& g = t.out_grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k)
          if (auto* gk = t.grad_slot(ids[k]))
            for (std::size_t i = 0; i < gk->size(); ++i) (*gk)[i] += g[offsets[k] + i];
      });
}

template <std::floating_point T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
  return concat_rows(std::span<const Var<T>>(parts.begin(), parts.size()));
}

/// Columns [begin, begin + count).
template <std::floating_point T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols())
    throw DimensionError("slice_cols: range exceeds " +
                         shape_str(a.value().shape()));
  const std::size_t n = a.rows();
  Tensor<T> out({n, count});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a.value()(i, begin + j);
  const auto ia = a.id();
  return a.tape().record("slice", std::move(out), {a},
                         [ia, begin, count, n](Tape<T>& t, std::uint32_t self) {
                           const auto& g = t.out_grad(self);
                           if (auto* ga = t.grad_slot(ia))
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < count; ++j)
                                 (*ga)(i, begin + j) += g(i, j);
                         });
}

/// Rows [begin, begin + count).
template <std::floating_point T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows())
    throw DimensionError("slice_rows: range exceeds " +
                         shape_str(a.value().shape()));
  const std::size_t m = a.cols();
  std::vector<T> d(a.value().data().begin() + begin * m,
                   a.value().data().begin() + (begin + count) * m);
  const auto ia = a.id();
  return a.tape().record("slice", Tensor<T>({count, m}, std::move(d)), {a},
                         [ia, begin, m](Tape<T>& t, std::uint32_t self) {
                           const auto& g = t.out_grad(self);
                           if (auto* ga = t.grad_slot(ia))
                             for (std::size_t i = 0; i < g.size(); ++i)
                               (*ga)[begin * m + i] += g[i];
                         });
}

/// Softmax along each row, with max subtraction.
template <std::floating_point T>
Tensor<T> row_softmax_values(const Tensor<T>& x) {
  Tensor<T> y = x;
  const std::size_t n = x.rows(), m = x.cols();
  for (std::size_t i = 0; i < n; ++i) {
    auto row = y.row_span(i);
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    T s = 0;
    for (T& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (T& v : row) v /= s;
  }
  (void)m;
  return y;
}

template <std::floating_point T>
Var<T> row_softmax(const Var<T>& x) {
  detail::require_matrix("row_softmax", x);
  const auto ix = x.id();
  const std::size_t n = x.rows(), m = x.cols();
  return x.tape().record("row_softmax", row_softmax_values(x.value()), {x},
                         [ix, n, m](Tape<T>& t, std::uint32_t self) {
                           auto* gx = t.grad_slot(ix);
                           if (!gx) return;
                           const auto& g = t.out_grad(self);
                           const auto& y = t.value(self);
                           for (std::size_t i = 0; i < n; ++i) {
                             T dot = 0;
                             for (std::size_t j = 0; j < m; ++j) dot += g(i, j) * y(i, j);
                             for (std::size_t j = 0; j < m; ++j)
                               (*gx)(i, j) += y(i, j) * (g(i, j) - dot);
                           }
                         });
}

/// Per-row normalization to zero mean / unit variance, then gain and bias
/// (both 1 x m).
template <std::floating_point T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5)) {
  const std::size_t n = x.rows(), m = x.cols();
  if (gain.rows() != 1 || gain.cols() != m || bias.rows() != 1 ||
      bias.cols() != m)
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(m));
  Tensor<T> xhat({n, m});
  std::vector<T> inv_std(n);
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    T mu = 0;
    for (std::size_t j = 0; j < m; ++j) mu += x.value()(i, j);
    mu /= T(m);
    T var = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const T d = x.value()(i, j) - mu;
      var += d * d;
    }
    var /= T(m);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat(i, j) = (x.value()(i, j) - mu) * inv_std[i];
      out(i, j) = xhat(i, j) * gain.value()[j] + bias.value()[j];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(
      "layer_norm", std::move(out), {x, gain, bias},
      [ix, ig, ib, n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& t, std::uint32_t self) {
        const auto& g = t.out_grad(self);
        if (auto* gg = t.grad_slot(ig))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*gg)[j] += g(i, j) * xhat(i, j);
        if (auto* gb = t.grad_slot(ib))
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*gb)[j] += g(i, j);
        if (auto* gx = t.grad_slot(ix)) {
          const auto& gain_v = t.value(ig);
          for (std::size_t i = 0; i < n; ++i) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < m; ++j) {
              const T d = g(i, j) * gain_v[j];
              mean_d += d;
              mean_dx += d * xhat(i, j);
            }
            mean_d /= T(m);
            mean_dx /= T(m);
            for (std::size_t j = 0; j < m; ++j) {
              const T d = g(i, j) * gain_v[j];
              (*gx)(i, j) += inv_std[i] * (d - mean_d - xhat(i, j) * mean_dx);
            }
          }
        }
      });
}

/// Column means: n x m -> 1 x m.
template <std::floating_point T>
Var<T> mean_rows(const Var<T>& x) {
  const std::size_t n = x.rows(), m = x.cols();
  Tensor<T> out({1, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += x.value()(i, j);
  for (auto& v : out.data()) v /= T(n);
  const auto ix = x.id();
  return x.tape().record("mean", std::move(out), {x},
                         [ix, n, m](Tape<T>& t, std::uint32_t self) {
                           const auto& g = t.out_grad(self);
                           if (auto* gx = t.grad_slot(ix))
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < m; ++j)
                                 (*gx)(i, j) += g[j] / T(n);
                         });
}

/// Row sums: n x m -> n x 1.
template <std::floating_point T>
Var<T> row_sum(const Var<T>& x) {
  const std::size_t n = x.rows(), m = x.cols();
  Tensor<T> out({n, 1});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i] += x.value()(i, j);
  const auto ix = x.id();
  return x.tape().record("sum", std::move(out), {x},
                         [ix, n, m](Tape<T>& t, std::uint32_t self) {
                           const auto& g = t.out_grad(self);
                           if (auto* gx = t.grad_slot(ix))
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < m; ++j) (*gx)(i, j) += g[i];
                         });
}

template <std::floating_point T>
Var<T> sum_all(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  const auto ix = x.id();
  return x.tape().record("sum", Tensor<T>({1, 1}, std::vector<T>{s}), {x},
                         [ix](Tape<T>& t, std::uint32_t self) {
                           const T g = t.out_grad(self)[0];
                           if (auto* gx = t.grad_slot(ix))
                             for (auto& v : gx->data()) v += g;
                         });
}

template <std::floating_point T>
Var<T> mean_all(const Var<T>& x) {
  const T n = static_cast<T>(x.value().size());
  T s = 0;
  for (T v : x.value().data()) s += v;
  const auto ix = x.id();
  return x.tape().record("mean", Tensor<T>({1, 1}, std::vector<T>{s / n}), {x},
                         [ix, n](Tape<T>& t, std::uint32_t self) {
                           const T g = t.out_grad(self)[0] / n;
                           if (auto* gx = t.grad_slot(ix))
                             for (auto& v : gx->data()) v += g;
                         });
}

/// Mean of equally shaped nodes.
template <std::floating_point T>
Var<T> average(std::span<const Var<T>> xs) {
  if (xs.empty()) throw DimensionError("average: no inputs");
  if (xs.size() == 1) return xs[0];
  Var<T> acc = xs[0];
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return scale(acc, T(1) / static_cast<T>(xs.size()));
}

namespace detail {

template <std::floating_point T, class F, class D>
Var<T> unary(const char* op, const Var<T>& x, F f, D dfdx_from_xy) {
  Tensor<T> y = x.value();
  for (auto& v : y.data()) v = f(v);
  const auto ix = x.id();
  return x.tape().record(op, std::move(y), {x},
                         [ix, dfdx_from_xy](Tape<T>& t, std::uint32_t self) {
                           auto* gx = t.grad_slot(ix);
                           if (!gx) return;
                           const auto& g = t.out_grad(self);
                           const auto& xv = t.value(ix);
                           const auto& yv = t.value(self);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             (*gx)[i] += g[i] * dfdx_from_xy(xv[i], yv[i]);
                         });
}

}  // namespace detail

template <std::floating_point T>
Var<T> log(const Var<T>& x) {
  for (T v : x.value().data())
    if (!(v > T(0))) throw NumericError("log: non-positive input");
  return detail::unary("log", x, [](T v) { return std::log(v); },
                       [](T xv, T) { return T(1) / xv; });
}

template <std::floating_point T>
Var<T> exp(const Var<T>& x) {
  return detail::unary("exp", x, [](T v) { return std::exp(v); },
                       [](T, T yv) { return yv; });
}

template <std::floating_point T>
T sigmoid_value(T v) {
  return v >= 0 ? T(1) / (T(1) + std::exp(-v))
                : std::exp(v) / (T(1) + std::exp(v));
}

template <std::floating_point T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary("sigmoid", x, [](T v) { return sigmoid_value(v); },
                       [](T, T yv) { return yv * (T(1) - yv); });
}

template <std::floating_point T>
Var<T> relu(const Var<T>& x) {
  return detail::unary("relu", x, [](T v) { return v > 0 ? v : T(0); },
                       [](T xv, T) { return xv > 0 ? T(1) : T(0); });
}

/// Result of a cosine similarity evaluation. `degenerate` marks a zero-norm
/// input, for which the value is defined as 0.
template <std::floating_point T>
struct Cosine {
  T value;
  bool degenerate;
};

template <std::floating_point T>
Cosine<T> cosine_sim(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size())
    throw DimensionError("cosine_sim: lengths " + std::to_string(u.size()) +
                         " and " + std::to_string(v.size()));
  T dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == T(0) || nv == T(0)) return {T(0), true};
  const T c = dot / (std::sqrt(nu) * std::sqrt(nv));
  return {std::clamp(c, T(-1), T(1)), false};
}

/// Pairwise cosine similarity between rows: out(i, j) = cos(a_i, b_j).
/// Zero-norm rows give 0 with zero gradient and a tape warning.
template <std::floating_point T>
Var<T> cosine_matrix(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.cols())
    throw DimensionError("cosine_matrix: " + shape_str(a.value().shape()) +
                         " vs " + shape_str(b.value().shape()));
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  auto norms = [d](const Tensor<T>& x) {
    std::vector<T> out(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      T s = 0;
      for (std::size_t j = 0; j < d; ++j) s += x(i, j) * x(i, j);
      out[i] = std::sqrt(s);
    }
    return out;
  };
  std::vector<T> na = norms(a.value()), nb = norms(b.value());
  Tensor<T> out({n, m});
  bool degenerate = false;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (na[i] == T(0) || nb[j] == T(0)) {
        degenerate = true;
        continue;
      }
      T dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += a.value()(i, k) * b.value()(j, k);
      out(i, j) = dot / (na[i] * nb[j]);
    }
  if (degenerate) a.tape().warn("cosine similarity: zero-norm input, value set to 0");
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(
      "cosine", std::move(out), {a, b},
      [ia, ib, n, m, d, na = std::move(na), nb = std::move(nb)](
          Tape<T>& t, std::uint32_t self) {
        const auto& g = t.out_grad(self);
        const auto& c = t.value(self);
        const auto& av = t.value(ia);
        const auto& bv = t.value(ib);
        auto* ga = t.grad_slot(ia);
        auto* gb = t.grad_slot(ib);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            if (na[i] == T(0) || nb[j] == T(0)) continue;
            const T gij = g(i, j);
            if (gij == T(0)) continue;
            const T inv = T(1) / (na[i] * nb[j]);
            for (std::size_t k = 0; k < d; ++k) {
              if (ga)
                (*ga)(i, k) += gij * (bv(j, k) * inv -
                                      c(i, j) * av(i, k) / (na[i] * na[i]));
              if (gb)
                (*gb)(j, k) += gij * (av(i, k) * inv -
                                      c(i, j) * bv(j, k) / (nb[j] * nb[j]));
            }
          }
      });
}

/// Mean binary cross-entropy of probabilities against {0,1} targets.
/// Probabilities are clamped to [1e-7, 1 - 1e-7]; clamped entries pass no
/// gradient.
template <std::floating_point T>
Var<T> bce_mean(const Var<T>& probs, const Tensor<T>& targets) {
  if (probs.value().shape() != targets.shape())
    throw DimensionError("bce: scores " + shape_str(probs.value().shape()) +
                         " vs targets " + shape_str(targets.shape()));
  constexpr T lo = T(1e-7), hi = T(1) - T(1e-7);
  T s = 0;
  const auto& p = probs.value();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T y = targets[i];
    if (y != T(0) && y != T(1))
      throw ConfigError("bce: target " + std::to_string(y) + " not in {0,1}");
    const T pc = std::clamp(p[i], lo, hi);
    s -= y * std::log(pc) + (T(1) - y) * std::log(T(1) - pc);
  }
  const T n = static_cast<T>(p.size());
  const auto ip = probs.id();
  return probs.tape().record(
      "bce", Tensor<T>({1, 1}, std::vector<T>{s / n}), {probs},
      [ip, targets, n](Tape<T>& t, std::uint32_t self) {
        auto* gp = t.grad_slot(ip);
        if (!gp) return;
        const T g = t.out_grad(self)[0] / n;
        const auto& p = t.value(ip);
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (p[i] < lo || p[i] > hi) continue;
          const T y = targets[i];
          (*gp)[i] += g * (-y / p[i] + (T(1) - y) / (T(1) - p[i]));
        }
      });
}

/// Mean over rows of -log probs(i, target_i).
template <std::floating_point T>
Var<T> nll_mean(const Var<T>& probs, std::span<const std::size_t> targets) {
  if (targets.size() != probs.rows())
    throw DimensionError("nll: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(probs.rows()) + " rows");
  constexpr T floor = std::numeric_limits<T>::min();
  T s = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= probs.cols())
      throw ConfigError("ce: target class " + std::to_string(targets[i]) +
                        " out of range [0, " + std::to_string(probs.cols()) + ")");
    s -= std::log(std::max(probs.value()(i, targets[i]), floor));
  }
  const T n = static_cast<T>(targets.size());
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  const auto ip = probs.id();
  return probs.tape().record(
      "log", Tensor<T>({1, 1}, std::vector<T>{s / n}), {probs},
      [ip, tg = std::move(tg), n](Tape<T>& t, std::uint32_t self) {
        auto* gp = t.grad_slot(ip);
        if (!gp) return;
        const T g = t.out_grad(self)[0] / n;
        const auto& p = t.value(ip);
        for (std::size_t i = 0; i < tg.size(); ++i) {
          const T pv = p(i, tg[i]);
          if (pv > floor) (*gp)(i, tg[i]) -= g / pv;
        }
      });
}

}  // namespace computer
