// Copyright 2026 The MicFormer-Desk Authors.
// SPDX-License-Identifier: Apache-2.0

// Dense tensors with an eager reverse-mode tape.
//
// A Tensor is an immutable value: shape plus shared, read-only storage. Tensors that
// participate in differentiation additionally carry a handle to the Tape that recorded
// them. Operations record onto the tape of their tracked inputs; if no input is tracked
// the result is a plain value and nothing is recorded.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "micformer/errors.hpp"

namespace micformer {

template <typename T>
class Tape;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() : Tensor(Shape{}, std::vector<T>{T(0)}) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::make_shared<const std::vector<T>>(std::move(data))) {
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    }
    if (data_->size() != shape_numel(shape_)) {
      throw ShapeError("data length " + std::to_string(data_->size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static Tensor full(Shape shape, T v) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }
  static Tensor scalar(T v) { return Tensor(Shape{}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_->size(); }

  /// Extent of an axis; negative axes count from the end.
  std::size_t dim(int axis) const { return shape_.at(normalize_axis(axis)); }

  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(shape_.size());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw ShapeError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape_));
    }
    return static_cast<std::size_t>(a);
  }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  const std::shared_ptr<const std::vector<T>>& storage() const { return data_; }
  T operator[](std::size_t i) const { return (*data_)[i]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    return (*data_)[0];
  }

  bool tracked() const { return tape_ != nullptr; }
  int node() const { return node_; }
  const std::shared_ptr<Tape<T>>& tape() const { return tape_; }

  /// Same values, no tape.
  Tensor detach() const {
    Tensor t = *this;
    t.tape_.reset();
    t.node_ = -1;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_->begin(), data_->end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool same_values(const Tensor& o) const { return shape_ == o.shape_ && *data_ == *o.data_; }

  /// Untracked view of the same storage under another shape of equal size.
  Tensor view(Shape shape) const {
    if (shape_numel(shape) != numel()) throw ShapeError("cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    return Tensor(std::move(shape), data_, nullptr, -1);
  }

 private:
  template <typename>
  friend class Tape;

  Tensor(Shape shape, std::shared_ptr<const std::vector<T>> data, std::shared_ptr<Tape<T>> tape,
         int node)
      : shape_(std::move(shape)), data_(std::move(data)), tape_(std::move(tape)), node_(node) {}

  Shape shape_;
  std::shared_ptr<const std::vector<T>> data_;
  std::shared_ptr<Tape<T>> tape_;
  int node_ = -1;
};

enum class OpKind {
  leaf,
  matmul,
  softmax,
  add,
  sub,
  mul,
  scale,
  gelu,
  exp,
  sqrt,
  reciprocal,
  sum,
  mean,
  max,
  reshape,
  gather,
  concat,
  layer_norm,
  depthwise_conv3d,
  trilinear_sample,
  cross_entropy,
};

/// Gradients produced by a backward pass, keyed by leaf name.
template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

/// Receives the output gradient and accumulates into each input's gradient buffer.
template <typename T>
using BackwardFn = std::function<void(std::span<const T> grad_out, std::span<std::vector<T>* const> grad_in)>;

template <typename T>
class Tape : public std::enable_shared_from_this<Tape<T>> {
 public:
  static std::shared_ptr<Tape> create() { return std::shared_ptr<Tape>(new Tape()); }

  /// Registers a named leaf; backward() reports its gradient under `name`.
  /// An empty name makes an anonymous leaf whose gradient is discarded.
  Tensor<T> leaf(std::string name, const Tensor<T>& value) {
    Record r;
    r.kind = OpKind::leaf;
    r.numel = value.numel();
    r.name = std::move(name);
    if (!r.name.empty()) r.shape = value.shape();
    records_.push_back(std::move(r));
    return Tensor<T>(value.shape(), value.storage(), this->shared_from_this(),
                     static_cast<int>(records_.size() - 1));
  }

  Tensor<T> record(OpKind kind, Shape shape, std::vector<T> data, std::vector<int> inputs,
                   BackwardFn<T> backward) {
    auto storage = std::make_shared<const std::vector<T>>(std::move(data));
    return record_shared(kind, std::move(shape), std::move(storage), std::move(inputs),
                         std::move(backward));
  }

  Tensor<T> record_shared(OpKind kind, Shape shape, std::shared_ptr<const std::vector<T>> storage,
                          std::vector<int> inputs, BackwardFn<T> backward) {
    for (int in : inputs) {
      if (in < 0 || in >= static_cast<int>(records_.size())) {
        throw AutodiffError("tape record references an unknown input node");
      }
    }
    Record r;
    r.kind = kind;
    r.numel = storage->size();
    r.inputs = std::move(inputs);
    r.backward = std::move(backward);
    records_.push_back(std::move(r));
    return Tensor<T>(std::move(shape), std::move(storage), this->shared_from_this(),
                     static_cast<int>(records_.size() - 1));
  }

  std::size_t size() const { return records_.size(); }
  OpKind kind(int node) const { return records_.at(node).kind; }
  const std::vector<int>& inputs(int node) const { return records_.at(node).inputs; }

  /// Number of times each record's backward ran during the most recent backward().
  const std::vector<std::uint32_t>& visit_counts() const { return visits_; }

  GradientMap<T> backward(const Tensor<T>& loss) {
    if (!loss.tracked()) throw AutodiffError("backward() on a detached tensor (no tape)");
    if (loss.tape().get() != this) throw AutodiffError("loss was recorded on a different tape");
    if (loss.numel() != 1) {
      throw AutodiffError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    const int n = static_cast<int>(records_.size());
    std::vector<std::vector<T>> grads(n);
    visits_.assign(n, 0);
    grads[loss.node()] = {T(1)};
    std::vector<std::vector<T>*> in_ptrs;
    for (int i = loss.node(); i >= 0; --i) {
      Record& r = records_[i];
      if (r.kind == OpKind::leaf || grads[i].empty()) continue;
      in_ptrs.clear();
      for (int in : r.inputs) {
        if (grads[in].empty()) grads[in].assign(records_[in].numel, T(0));
        in_ptrs.push_back(&grads[in]);
      }
      r.backward(std::span<const T>(grads[i]), std::span<std::vector<T>* const>(in_ptrs));
      ++visits_[i];
      grads[i].clear();
      grads[i].shrink_to_fit();
    }
    GradientMap<T> out;
    for (int i = 0; i < n; ++i) {
      const Record& r = records_[i];
      if (r.kind != OpKind::leaf || r.name.empty()) continue;
      std::vector<T> g = grads[i].empty() ? std::vector<T>(r.numel, T(0)) : std::move(grads[i]);
      out.insert_or_assign(r.name, Tensor<T>(r.shape, std::move(g)));
    }
    return out;
  }

 private:
  struct Record {
    OpKind kind = OpKind::leaf;
    std::size_t numel = 0;
    std::vector<int> inputs;
    BackwardFn<T> backward;
    std::string name;
    Shape shape;  // leaves only
  };

  Tape() = default;

  std::vector<Record> records_;
  std::vector<std::uint32_t> visits_;
};

namespace detail {

template <typename T>
std::shared_ptr<Tape<T>> common_tape(std::initializer_list<const Tensor<T>*> xs) {
  std::shared_ptr<Tape<T>> tape;
  for (const Tensor<T>* x : xs) {
    if (!x->tracked()) continue;
    if (tape && tape != x->tape()) throw AutodiffError("operands were recorded on different tapes");
    tape = x->tape();
  }
  return tape;
}

/// Wraps a freshly computed value; records it if any input is tracked. Untracked inputs
/// get a throwaway gradient slot via a constant leaf so backward functions can index uniformly.
template <typename T>
Tensor<T> finish(OpKind kind, Shape shape, std::vector<T> data,
                 std::initializer_list<const Tensor<T>*> inputs, BackwardFn<T> backward) {
  auto tape = common_tape<T>(inputs);
  if (!tape) return Tensor<T>(std::move(shape), std::move(data));
  std::vector<int> ids;
  for (const Tensor<T>* x : inputs) {
    ids.push_back(x->tracked() ? x->node() : tape->leaf("", *x).node());
  }
  return tape->record(kind, std::move(shape), std::move(data), std::move(ids), std::move(backward));
}

inline void check_finite_shape(const Shape& s) {
  for (auto e : s) {
    if (e == 0) throw ShapeError("zero extent in shape " + shape_str(s));
  }
}

/// Splits a shape around an axis into (outer, n, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

// C[m,n] (+)= A[m,k] B[k,n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += G[m,n] B[k,n]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    T* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T G[m,n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul

/// Batched matrix product. Leading batch extents must agree, or one side's batch must
/// be absent or all ones (it is then reused for every slice).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  const std::size_t na = shape_numel(a_batch), nb = shape_numel(b_batch);
  if (k != k2 || (a_batch != b_batch && na != 1 && nb != 1)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Shape out_shape = na > nb ? a_batch : nb > na ? b_batch : a_batch.size() >= b_batch.size() ? a_batch : b_batch;
  const std::size_t batch = std::max(na, nb);
  out_shape.push_back(m);
  out_shape.push_back(n);

  const std::size_t sa = na == 1 ? 0 : m * k, sb = nb == 1 ? 0 : k * n;
  std::vector<T> out(batch * m * n, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t t = 0; t < batch; ++t) detail::gemm_nn(pa + t * sa, pb + t * sb, out.data() + t * m * n, m, k, n);

  auto as = a.storage(), bs = b.storage();
  return detail::finish<T>(OpKind::matmul, std::move(out_shape), std::move(out), {&a, &b},
                           [=](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             for (std::size_t t = 0; t < batch; ++t) {
                               const T* gt = g.data() + t * m * n;
                               detail::gemm_nt(gt, bs->data() + t * sb, gi[0]->data() + t * sa, m, k, n);
                               detail::gemm_tn(as->data() + t * sa, gt, gi[1]->data() + t * sb, m, k, n);
                             }
                           });
}

// ---------------------------------------------------------------------------
// elementwise

namespace detail {

/// Result shape for binary ops: equal shapes, a numel-1 operand, or one shape a suffix of the other.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a == b) return a;
  const auto na = shape_numel(a), nb = shape_numel(b);
  if (nb == 1 && b.size() <= a.size()) return a;
  if (na == 1 && a.size() <= b.size()) return b;
  auto is_suffix = [](const Shape& small, const Shape& big) {
    return small.size() <= big.size() && std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw ShapeError("elementwise shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary(OpKind kind, const Tensor<T>& a, const Tensor<T>& b, Fwd f, DA da, DB db) {
  Shape shape = broadcast_shape(a.shape(), b.shape());
  const std::size_t n = shape_numel(shape), na = a.numel(), nb = b.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (na == n && nb == n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i % na], pb[i % nb]);
  }
  auto as = a.storage(), bs = b.storage();
  return finish<T>(kind, std::move(shape), std::move(out), {&a, &b},
                   [=](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                     T* ga = gi[0]->data();
                     T* gb = gi[1]->data();
                     const T* xa = as->data();
                     const T* xb = bs->data();
                     for (std::size_t i = 0; i < n; ++i) {
                       const T x = xa[i % na], y = xb[i % nb];
                       ga[i % na] += da(g[i], x, y);
                       gb[i % nb] += db(g[i], x, y);
                     }
                   });
}

template <typename T, typename Fwd, typename D>
Tensor<T> unary(OpKind kind, const Tensor<T>& x, Fwd f, D dfdx) {
  const std::size_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(px[i]);
  auto xs = x.storage();
  return finish<T>(kind, x.shape(), std::move(out), {&x},
                   [=](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                     T* gx = gi[0]->data();
                     const T* v = xs->data();
                     for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * dfdx(v[i]);
                   });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      OpKind::add, a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      OpKind::sub, a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      OpKind::mul, a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary<T>(
      OpKind::scale, x, [c](T v) { return v * c; }, [c](T) { return c; });
}

namespace detail {
template <typename T>
T gelu_value(T x) {
  constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = T(0.044715);
  return T(0.5) * x * (T(1) + std::tanh(k0 * (x + k1 * x * x * x)));
}
template <typename T>
T gelu_grad(T x) {
  constexpr T k0 = T(0.7978845608028654);
  constexpr T k1 = T(0.044715);
  const T u = k0 * (x + k1 * x * x * x);
  const T th = std::tanh(u);
  const T du = k0 * (T(1) + T(3) * k1 * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}
}  // namespace detail

/// GELU, tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary<T>(OpKind::gelu, x, detail::gelu_value<T>, detail::gelu_grad<T>);
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>(
      OpKind::exp, x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  for (T v : x.data()) {
    if (!(v >= T(0))) throw DomainError("sqrt of negative or NaN value");
  }
  return detail::unary<T>(
      OpKind::sqrt, x, [](T v) { return std::sqrt(v); }, [](T v) { return T(0.5) / std::sqrt(v); });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  for (T v : x.data()) {
    if (v == T(0) || std::isnan(v)) throw DomainError("reciprocal of zero or NaN value");
  }
  return detail::unary<T>(
      OpKind::reciprocal, x, [](T v) { return T(1) / v; }, [](T v) { return -T(1) / (v * v); });
}

// ---------------------------------------------------------------------------
// softmax

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto [outer, n, inner] = detail::split_axis(x.shape(), ax);
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = px[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, px[base + j * inner]);
      T s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(px[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      const T inv = T(1) / s;
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] *= inv;
    }
  }
  auto ys = std::make_shared<const std::vector<T>>(std::move(out));
  auto tape = detail::common_tape<T>({&x});
  if (!tape) return Tensor<T>(x.shape(), *ys);
  return tape->record_shared(OpKind::softmax, x.shape(), ys, {x.node()},
                             [ys, outer = outer, n = n, inner = inner](std::span<const T> g,
                                                                       std::span<std::vector<T>* const> gi) {
                               T* gx = gi[0]->data();
                               const T* y = ys->data();
                               for (std::size_t o = 0; o < outer; ++o) {
                                 for (std::size_t in = 0; in < inner; ++in) {
                                   const std::size_t base = o * n * inner + in;
                                   T dot = 0;
                                   for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
                                   for (std::size_t j = 0; j < n; ++j) {
                                     const std::size_t idx = base + j * inner;
                                     gx[idx] += y[idx] * (g[idx] - dot);
                                   }
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// reductions

enum class Reduce { sum, mean, max };

/// Reduces over one axis (the axis is removed from the shape).
template <typename T>
Tensor<T> reduce(Reduce kind, const Tensor<T>& x, int axis) {
  const std::size_t ax = x.normalize_axis(axis);
  const auto [outer, n, inner] = detail::split_axis(x.shape(), ax);
  Shape shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != ax) shape.push_back(x.shape()[i]);
  }
  std::vector<T> out(outer * inner);
  std::vector<std::uint32_t> argmax;
  if (kind == Reduce::max) argmax.resize(outer * inner);
  const T* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      if (kind == Reduce::max) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j) {
          if (px[base + j * inner] > px[base + best * inner]) best = j;
        }
        out[o * inner + in] = px[base + best * inner];
        argmax[o * inner + in] = static_cast<std::uint32_t>(best);
      } else {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += px[base + j * inner];
        out[o * inner + in] = static_cast<T>(kind == Reduce::mean ? s / static_cast<double>(n) : s);
      }
    }
  }
  const OpKind op = kind == Reduce::sum ? OpKind::sum : kind == Reduce::mean ? OpKind::mean : OpKind::max;
  return detail::finish<T>(op, std::move(shape), std::move(out), {&x},
                           [kind, outer = outer, n = n, inner = inner, argmax = std::move(argmax)](
                               std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             T* gx = gi[0]->data();
                             const T w = kind == Reduce::mean ? T(1) / static_cast<T>(n) : T(1);
                             for (std::size_t o = 0; o < outer; ++o) {
                               for (std::size_t in = 0; in < inner; ++in) {
                                 const std::size_t base = o * n * inner + in;
                                 const T go = g[o * inner + in];
                                 if (kind == Reduce::max) {
                                   gx[base + argmax[o * inner + in] * inner] += go;
                                 } else {
                                   for (std::size_t j = 0; j < n; ++j) gx[base + j * inner] += go * w;
                                 }
                               }
                             }
                           });
}

/// Reduces over every element to a rank-0 scalar.
template <typename T>
Tensor<T> reduce_all(Reduce kind, const Tensor<T>& x) {
  const std::size_t n = x.numel();
  const T* px = x.data().data();
  std::size_t best = 0;
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    s += px[i];
    if (px[i] > px[best]) best = i;
  }
  T v = kind == Reduce::max ? px[best] : static_cast<T>(kind == Reduce::mean ? s / static_cast<double>(n) : s);
  const OpKind op = kind == Reduce::sum ? OpKind::sum : kind == Reduce::mean ? OpKind::mean : OpKind::max;
  return detail::finish<T>(op, Shape{}, {v}, {&x},
                           [kind, n, best](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             T* gx = gi[0]->data();
                             if (kind == Reduce::max) {
                               gx[best] += g[0];
                               return;
                             }
                             const T w = kind == Reduce::mean ? g[0] / static_cast<T>(n) : g[0];
                             for (std::size_t i = 0; i < n; ++i) gx[i] += w;
                           });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) { return reduce_all(Reduce::sum, x); }
template <typename T>
Tensor<T> mean(const Tensor<T>& x) { return reduce_all(Reduce::mean, x); }

// ---------------------------------------------------------------------------
// structural ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::check_finite_shape(shape);
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto tape = detail::common_tape<T>({&x});
  if (!tape) return x.view(std::move(shape));
  const std::size_t n = x.numel();
  return tape->record_shared(OpKind::reshape, std::move(shape), x.storage(), {x.node()},
                             [n](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                               T* gx = gi[0]->data();
                               for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
                             });
}

using IndexList = std::shared_ptr<const std::vector<std::uint32_t>>;

/// out.flat[i] = x.flat[index[i]]. The backward pass scatter-adds, so repeated indices are allowed.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape shape, IndexList index) {
  if (index->size() != shape_numel(shape)) {
    throw ShapeError("gather index count does not match output shape " + shape_str(shape));
  }
  const std::size_t n = index->size();
  std::vector<T> out(n);
  const T* px = x.data().data();
  const std::size_t limit = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = (*index)[i];
    if (j >= limit) throw ShapeError("gather index out of range");
    out[i] = px[j];
  }
  return detail::finish<T>(OpKind::gather, std::move(shape), std::move(out), {&x},
                           [index, n](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                             T* gx = gi[0]->data();
                             const auto* idx = index->data();
                             for (std::size_t i = 0; i < n; ++i) gx[idx[i]] += g[i];
                           });
}

/// Gather indices for an axis permutation: out axis i is input axis axes[i].
inline std::pair<Shape, IndexList> permute_index(const Shape& in, const std::vector<std::size_t>& axes) {
  const std::size_t r = in.size();
  if (axes.size() != r) throw ShapeError("permutation rank mismatch for " + shape_str(in));
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw ShapeError("invalid permutation for " + shape_str(in));
    seen[a] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[axes[i]];
    strides[i] = in_strides[axes[i]];
  }
  const std::size_t n = shape_numel(in);
  auto idx = std::make_shared<std::vector<std::uint32_t>>(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*idx)[i] = static_cast<std::uint32_t>(src);
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out[d]) {
        src += strides[d];
        break;
      }
      src -= strides[d] * (out[d] - 1);
      counter[d] = 0;
    }
  }
  return {out, idx};
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  auto [shape, idx] = permute_index(x.shape(), axes);
  return gather(x, std::move(shape), std::move(idx));
}

/// Concatenates along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t ax = xs[0].normalize_axis(axis);
  Shape shape = xs[0].shape();
  shape[ax] = 0;
  for (const auto& x : xs) {
    if (x.rank() != xs[0].rank()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < x.rank(); ++i) {
      if (i != ax && x.shape()[i] != xs[0].shape()[i]) {
        throw ShapeError("concat shape mismatch: " + shape_str(xs[0].shape()) + " vs " + shape_str(x.shape()));
      }
    }
    shape[ax] += x.shape()[ax];
  }
  const auto [outer, total, inner] = detail::split_axis(shape, ax);
  std::vector<T> out(shape_numel(shape));
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t w = x.shape()[ax] * inner;
    const T* px = x.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy(px + o * w, px + (o + 1) * w, out.data() + o * total * inner + off);
    }
    widths.push_back(w);
    off += w;
  }

  auto tape = [&] {
    std::shared_ptr<Tape<T>> t;
    for (const auto& x : xs) {
      if (!x.tracked()) continue;
      if (t && t != x.tape()) throw AutodiffError("operands were recorded on different tapes");
      t = x.tape();
    }
    return t;
  }();
  if (!tape) return Tensor<T>(std::move(shape), std::move(out));
  std::vector<int> ids;
  for (const auto& x : xs) ids.push_back(x.tracked() ? x.node() : tape->leaf("", x).node());
  const std::size_t row = total * inner;
  return tape->record(OpKind::concat, std::move(shape), std::move(out), std::move(ids),
                      [widths, outer = outer, row](std::span<const T> g, std::span<std::vector<T>* const> gi) {
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < widths.size(); ++k) {
                          T* gx = gi[k]->data();
                          const std::size_t w = widths[k];
                          for (std::size_t o = 0; o < outer; ++o) {
                            const T* src = g.data() + o * row + off;
                            for (std::size_t j = 0; j < w; ++j) gx[o * w + j] += src[j];
                          }
                          off += w;
                        }
                      });
}

/// Runs reverse-mode differentiation from a scalar loss back to every named leaf.
template <typename T>
GradientMap<T> backward(const Tensor<T>& loss) {
  if (!loss.tracked()) throw AutodiffError("backward() on a detached tensor (no tape)");
  return loss.tape()->backward(loss);
}

}  // namespace micformer
