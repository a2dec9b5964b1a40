#pragma once

// Reverse-mode autodiff on dense row-major tensors. Scalar type is a template
// parameter: float for training, double for gradient checking. Graphs are
// built eagerly; backward() runs an iterative topological sweep and frees
// intermediate buffers as soon as they are no longer needed.

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <new>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mmae/common.hpp"

namespace mmae::nn {

class ShapeMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// NumPy broadcasting rules; throws on incompatible dims.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (size_t i = 0; i < nd; ++i) {
    int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeMismatch("cannot broadcast " + shape_str(a) + " with " +
                          shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` (right-aligned) when walking `out`; 0 where broadcast.
inline std::vector<int64_t> broadcast_strides(const Shape& in,
                                              const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  auto ist = contiguous_strides(in);
  size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i)
    st[off + i] = in[i] == 1 ? 0 : ist[i];
  return st;
}

// Calls f(out_flat_index, a_offset, b_offset) for every element of `out`.
// Visits every output coordinate as f(i, ia, ib). The innermost dims where
// each operand's stride pattern is either densely packed or all-zero are
// collapsed into straight runs so the hot loops stay branch-free; the
// odometer only turns over the remaining outer dims.
template <class F>
inline void strided_walk(const Shape& out, const std::vector<int64_t>& sa,
                         const std::vector<int64_t>& sb, F&& f) {
  int64_t n = shape_numel(out);
  int nd = static_cast<int>(out.size());
  if (nd == 0) {
    if (n == 1) f(int64_t{0}, int64_t{0}, int64_t{0});
    return;
  }
  int64_t run = 1;
  bool a_packed = true, a_zero = true, b_packed = true, b_zero = true;
  int outer = nd;
  while (outer > 0) {
    int d = outer - 1;
    if (out[d] != 1) {
      bool ap = a_packed && sa[d] == run;
      bool az = a_zero && sa[d] == 0;
      bool bp = b_packed && sb[d] == run;
      bool bz = b_zero && sb[d] == 0;
      if (!((ap || az) && (bp || bz))) break;
      a_packed = ap;
      a_zero = az;
      b_packed = bp;
      b_zero = bz;
    }
    run *= out[d];
    --outer;
  }
  const int64_t stepa = a_packed ? 1 : 0;
  const int64_t stepb = b_packed ? 1 : 0;

  std::vector<int64_t> idx(outer, 0);
  int64_t offa = 0, offb = 0;
  for (int64_t i = 0; i < n; i += run) {
    if (stepa == 1 && stepb == 1) {
      for (int64_t k = 0; k < run; ++k) f(i + k, offa + k, offb + k);
    } else if (stepa == 1) {
      for (int64_t k = 0; k < run; ++k) f(i + k, offa + k, offb);
    } else if (stepb == 1) {
      for (int64_t k = 0; k < run; ++k) f(i + k, offa, offb + k);
    } else {
      for (int64_t k = 0; k < run; ++k) f(i + k, offa, offb);
    }
    for (int d = outer - 1; d >= 0; --d) {
      ++idx[d];
      offa += sa[d];
      offb += sb[d];
      if (idx[d] < out[d]) break;
      offa -= sa[d] * out[d];
      offb -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Thread-local gradient mode. Ops built while disabled record no parents, so
// their inputs can be freed as soon as the last handle goes away.
inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

// Buffers are 64-byte aligned so Eigen's alignment-driven kernel choices
// (reduction peeling, gemv split points) are the same for every allocation;
// otherwise results would vary bitwise with the heap address.
template <class T>
struct AlignedAlloc {
  using value_type = T;
  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) {}
  T* allocate(size_t n) {
    return static_cast<T*>(
        ::operator new(n * sizeof(T), std::align_val_t(64)));
  }
  void deallocate(T* p, size_t) {
    ::operator delete(p, std::align_val_t(64));
  }
  bool operator==(const AlignedAlloc&) const { return true; }
  bool operator!=(const AlignedAlloc&) const { return false; }
};

template <class T>
using AVec = std::vector<T, AlignedAlloc<T>>;

template <class T>
struct Node {
  Shape shape;
  AVec<T> value;
  AVec<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node*)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
NodePtr<T> make_node(Shape shape) {
  auto n = std::make_shared<Node<T>>();
  int64_t numel = shape_numel(shape);
  n->shape = std::move(shape);
  n->value.resize(numel);
  return n;
}

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr<T> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = make_node<T>(std::move(shape));
    n->requires_grad = requires_grad;
    return Tensor(n);
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }
  static Tensor from(Shape shape, std::vector<T> data,
                     bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeMismatch("data size does not match shape " +
                          shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value.assign(data.begin(), data.end());
    n->requires_grad = requires_grad;
    return Tensor(n);
  }
  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const {
    int n = ndim();
    return node_->shape[i < 0 ? i + n : i];
  }
  int64_t numel() const { return node_->numel(); }
  AVec<T>& data() { return node_->value; }
  const AVec<T>& data() const { return node_->value; }
  AVec<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }
  void zero_grad() { node_->grad.clear(); }
  T item() const {
    if (numel() != 1) throw ShapeMismatch("item() on non-scalar tensor");
    return node_->value[0];
  }
  NodePtr<T> node() const { return node_; }
  Node<T>* raw() const { return node_.get(); }

 private:
  NodePtr<T> node_;
};

// Registers parents and a backward closure when grads are live.
template <class T, class F>
inline void attach(const NodePtr<T>& out, std::vector<NodePtr<T>> parents,
                   F&& fn) {
  if (!grad_mode()) return;
  bool rq = false;
  for (const auto& p : parents) rq = rq || p->requires_grad;
  if (!rq) return;
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backward_fn = std::forward<F>(fn);
}

// Reverse sweep from a scalar root. Intermediate value/grad buffers are
// released right after a node's backward runs: by then every reader of that
// node (its consumers) has already executed.
template <class T>
inline void backward(const Tensor<T>& root, bool free_buffers = true) {
  if (root.numel() != 1) throw ShapeMismatch("backward requires a scalar");
  Node<T>* r = root.raw();
  if (!r->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(r, 0);
  seen.insert(r);
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      Node<T>* p = top.first->parents[top.second++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(top.first);
      stack.pop_back();
    }
  }

  r->ensure_grad();
  r->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) {
      if (!n->grad.empty()) n->backward_fn(n);
      if (free_buffers && n != r) {
        n->value = AVec<T>();
        n->grad = AVec<T>();
      }
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise binary ops with broadcasting

namespace detail {

template <class T, class FwdOp, class BwdOp>
Tensor<T> ew_binary(const Tensor<T>& a, const Tensor<T>& b, FwdOp fwd,
                    BwdOp bwd) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  auto out = make_node<T>(os);
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out->value.data();
  bool same = a.shape() == b.shape();
  if (same) {
    int64_t n = out->numel();
    for (int64_t i = 0; i < n; ++i) op[i] = fwd(ap[i], bp[i]);
  } else {
    auto sa = broadcast_strides(a.shape(), os);
    auto sb = broadcast_strides(b.shape(), os);
    strided_walk(os, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
      op[i] = fwd(ap[ia], bp[ib]);
    });
  }
  Node<T>* pa = a.raw();
  Node<T>* pb = b.raw();
  attach(out, {a.node(), b.node()},
         [pa, pb, os, same, bwd](Node<T>* self) {
           const T* g = self->grad.data();
           bool need_a = pa->requires_grad;
           bool need_b = pb->requires_grad;
           if (need_a) pa->ensure_grad();
           if (need_b) pb->ensure_grad();
           if (same) {
             int64_t n = self->numel();
             for (int64_t i = 0; i < n; ++i)
               bwd(g[i], pa->value[i], pb->value[i],
                   need_a ? &pa->grad[i] : nullptr,
                   need_b ? &pb->grad[i] : nullptr);
           } else {
             auto sa = broadcast_strides(pa->shape, os);
             auto sb = broadcast_strides(pb->shape, os);
             strided_walk(os, sa, sb,
                          [&](int64_t i, int64_t ia, int64_t ib) {
                            bwd(g[i], pa->value[ia], pb->value[ib],
                                need_a ? &pa->grad[ia] : nullptr,
                                need_b ? &pb->grad[ib] : nullptr);
                          });
           }
         });
  return Tensor<T>(out);
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::ew_binary(
      a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, T* da, T* db) {
        if (da) *da += g;
        if (db) *db += g;
      });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::ew_binary(
      a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, T* da, T* db) {
        if (da) *da += g;
        if (db) *db -= g;
      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::ew_binary(
      a, b, [](T x, T y) { return x * y; },
      [](T g, T x, T y, T* da, T* db) {
        if (da) *da += g * y;
        if (db) *db += g * x;
      });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::ew_binary(
      a, b, [](T x, T y) { return x / y; },
      [](T g, T x, T y, T* da, T* db) {
        if (da) *da += g / y;
        if (db) *db -= g * x / (y * y);
      });
}

// ---------------------------------------------------------------------------
// elementwise unary ops

namespace detail {

template <class T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

// fwd: value -> value; bwd: (grad_out, x, y) -> grad_in contribution
template <class T, class FwdOp, class BwdOp>
Tensor<T> ew_unary(const Tensor<T>& x, FwdOp fwd, BwdOp bwd) {
  auto out = make_node<T>(x.shape());
  const T* xp = x.data().data();
  T* op = out->value.data();
  int64_t n = out->numel();
  for (int64_t i = 0; i < n; ++i) op[i] = fwd(xp[i]);
  Node<T>* px = x.raw();
  attach(out, {x.node()}, [px, bwd](Node<T>* self) {
    px->ensure_grad();
    const T* g = self->grad.data();
    const T* xv = px->value.data();
    const T* yv = self->value.data();
    T* dx = px->grad.data();
    int64_t n = self->numel();
    for (int64_t i = 0; i < n; ++i) dx[i] += bwd(g[i], xv[i], yv[i]);
  });
  return Tensor<T>(out);
}

}  // namespace detail

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::ew_unary(
      x, [](T v) { return -v; }, [](T g, T, T) { return -g; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::ew_unary(
      x, [s](T v) { return s * v; }, [s](T g, T, T) { return s * g; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::ew_unary(
      x, [s](T v) { return v + s; }, [](T g, T, T) { return g; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::ew_unary(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T g, T xv, T) { return xv > T(0) ? g : T(0); });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  // exact erf form: 0.5 x (1 + erf(x / sqrt(2)))
  const T inv_sqrt2 = T(0.7071067811865475244);
  const T inv_sqrt2pi = T(0.3989422804014326779);
  auto out = make_node<T>(x.shape());
  int64_t n = out->numel();
  detail::CArrMap<T> xm(x.data().data(), n);
  detail::ArrMap<T> ym(out->value.data(), n);
  ym = T(0.5) * xm * (T(1) + (xm * inv_sqrt2).erf());
  Node<T>* px = x.raw();
  attach(out, {x.node()}, [px, inv_sqrt2, inv_sqrt2pi](Node<T>* self) {
    px->ensure_grad();
    int64_t n = self->numel();
    detail::CArrMap<T> g(self->grad.data(), n);
    detail::CArrMap<T> xv(px->value.data(), n);
    detail::ArrMap<T> dx(px->grad.data(), n);
    dx += g * (T(0.5) * (T(1) + (xv * inv_sqrt2).erf()) +
               xv * inv_sqrt2pi * (T(-0.5) * xv.square()).exp());
  });
  return Tensor<T>(out);
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  auto out = make_node<T>(x.shape());
  int64_t n = out->numel();
  detail::CArrMap<T> xm(x.data().data(), n);
  detail::ArrMap<T> ym(out->value.data(), n);
  // sigma(-|x|) first, then mirror: stable on both tails
  ym = (-xm.abs()).exp();
  ym = ym / (T(1) + ym);
  ym = (xm >= T(0)).select(T(1) - ym, ym);
  Node<T>* px = x.raw();
  attach(out, {x.node()}, [px](Node<T>* self) {
    px->ensure_grad();
    int64_t n = self->numel();
    detail::CArrMap<T> g(self->grad.data(), n);
    detail::CArrMap<T> yv(self->value.data(), n);
    detail::ArrMap<T> dx(px->grad.data(), n);
    dx += g * yv * (T(1) - yv);
  });
  return Tensor<T>(out);
}

template <class T>
Tensor<T> tanh_t(const Tensor<T>& x) {
  return detail::ew_unary(
      x, [](T v) { return std::tanh(v); },
      [](T g, T, T y) { return g * (T(1) - y * y); });
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::ew_unary(
      x,
      [](T v) {
        if (v > T(20)) return v;
        if (v < T(-20)) return std::exp(v);
        return std::log1p(std::exp(v));
      },
      [](T g, T xv, T) {
        T s = xv >= T(0) ? T(1) / (T(1) + std::exp(-xv))
                         : std::exp(xv) / (T(1) + std::exp(xv));
        return g * s;
      });
}

template <class T>
Tensor<T> exp_t(const Tensor<T>& x) {
  return detail::ew_unary(
      x, [](T v) { return std::exp(v); }, [](T g, T, T y) { return g * y; });
}

template <class T>
Tensor<T> log_t(const Tensor<T>& x) {
  return detail::ew_unary(
      x, [](T v) { return std::log(v); },
      [](T g, T xv, T) { return g / xv; });
}

template <class T>
Tensor<T> sqrt_t(const Tensor<T>& x) {
  return detail::ew_unary(
      x, [](T v) { return std::sqrt(v); },
      [](T g, T, T y) { return g / (T(2) * y); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::ew_unary(
      x, [](T v) { return v * v; },
      [](T g, T xv, T) { return T(2) * g * xv; });
}

// Gradient convention at the boundary: inside-closed (1 at x == lo or hi).
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::ew_unary(
      x, [=](T v) { return v < lo ? lo : (v > hi ? hi : v); },
      [=](T g, T xv, T) { return (xv >= lo && xv <= hi) ? g : T(0); });
}

template <class T>
Tensor<T> detach(const Tensor<T>& x) {
  auto out = make_node<T>(x.shape());
  out->value = x.data();
  return Tensor<T>(out);
}

// operator sugar
template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) {
  return div(a, b);
}
template <class T>
Tensor<T> operator*(T s, const Tensor<T>& a) {
  return scale(a, s);
}
template <class T>
Tensor<T> operator-(const Tensor<T>& a) {
  return neg(a);
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto out = make_node<T>(Shape{1});
  const auto& v = x.data();
  // pairwise-ish accumulation is unnecessary at these sizes; plain loop
  T acc = T(0);
  for (T e : v) acc += e;
  out->value[0] = acc;
  Node<T>* px = x.raw();
  attach(out, {x.node()}, [px](Node<T>* self) {
    px->ensure_grad();
    T g = self->grad[0];
    for (auto& d : px->grad) d += g;
  });
  return Tensor<T>(out);
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  int64_t n = x.numel();
  return scale(sum_all(x), T(1) / static_cast<T>(n));
}

// Sum over `axes` (non-negative, unique). keepdim keeps reduced dims as 1.
template <class T>
Tensor<T> sum_axes(const Tensor<T>& x, std::vector<int> axes,
                   bool keepdim = false) {
  int nd = x.ndim();
  for (auto& a : axes)
    if (a < 0) a += nd;
  std::sort(axes.begin(), axes.end());
  Shape kshape = x.shape();
  for (int a : axes) kshape[a] = 1;
  Shape oshape;
  if (keepdim) {
    oshape = kshape;
  } else {
    for (int d = 0; d < nd; ++d)
      if (!std::binary_search(axes.begin(), axes.end(), d))
        oshape.push_back(x.shape()[d]);
    if (oshape.empty()) oshape = {1};
  }
  auto out = make_node<T>(oshape);
  std::fill(out->value.begin(), out->value.end(), T(0));
  // walk input; output offset uses stride 0 on reduced dims
  auto so = broadcast_strides(kshape, x.shape());
  auto sx = contiguous_strides(x.shape());
  const T* xp = x.data().data();
  T* op = out->value.data();
  strided_walk(x.shape(), sx, so,
               [&](int64_t, int64_t ix, int64_t io) { op[io] += xp[ix]; });
  Node<T>* px = x.raw();
  Shape xshape = x.shape();
  attach(out, {x.node()}, [px, xshape, kshape](Node<T>* self) {
    px->ensure_grad();
    auto so = broadcast_strides(kshape, xshape);
    auto sx = contiguous_strides(xshape);
    const T* g = self->grad.data();
    T* dx = px->grad.data();
    strided_walk(xshape, sx, so,
                 [&](int64_t, int64_t ix, int64_t io) { dx[ix] += g[io]; });
  });
  return Tensor<T>(out);
}

template <class T>
Tensor<T> mean_axes(const Tensor<T>& x, std::vector<int> axes,
                    bool keepdim = false) {
  int nd = x.ndim();
  int64_t cnt = 1;
  for (int a : axes) cnt *= x.shape()[a < 0 ? a + nd : a];
  return scale(sum_axes(x, std::move(axes), keepdim),
               T(1) / static_cast<T>(cnt));
}

// ---------------------------------------------------------------------------
// shape/movement ops

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  // one dim may be -1
  int64_t known = 1, neg = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1)
      neg = static_cast<int64_t>(i);
    else
      known *= shape[i];
  }
  if (neg >= 0) shape[neg] = x.numel() / known;
  if (shape_numel(shape) != x.numel())
    throw ShapeMismatch("reshape " + shape_str(x.shape()) + " -> " +
                        shape_str(shape));
  auto out = std::make_shared<Node<T>>();
  out->shape = std::move(shape);
  out->value = x.data();
  Node<T>* px = x.raw();
  attach(out, {x.node()}, [px](Node<T>* self) {
    px->ensure_grad();
    const T* g = self->grad.data();
    T* dx = px->grad.data();
    int64_t n = self->numel();
    for (int64_t i = 0; i < n; ++i) dx[i] += g[i];
  });
  return Tensor<T>(out);
}

template <class T>
Tensor<T> permute(const Tensor<T>& x, std::vector<int> perm) {
  int nd = x.ndim();
  if (static_cast<int>(perm.size()) != nd)
    throw ShapeMismatch("permute rank mismatch");
  Shape oshape(nd);
  for (int d = 0; d < nd; ++d) oshape[d] = x.shape()[perm[d]];
  auto xs = contiguous_strides(x.shape());
  std::vector<int64_t> sa(nd);
  for (int d = 0; d < nd; ++d) sa[d] = xs[perm[d]];
  auto out = make_node<T>(oshape);
  const T* xp = x.data().data();
  T* op = out->value.data();
  std::vector<int64_t> zero(nd, 0);
  strided_walk(oshape, sa, zero,
               [&](int64_t i, int64_t ix, int64_t) { op[i] = xp[ix]; });
  Node<T>* px = x.raw();
  attach(out, {x.node()}, [px, oshape, sa, zero](Node<T>* self) {
    px->ensure_grad();
    const T* g = self->grad.data();
    T* dx = px->grad.data();
    strided_walk(oshape, sa, zero,
                 [&](int64_t i, int64_t ix, int64_t) { dx[ix] += g[i]; });
  });
  return Tensor<T>(out);
}

template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape)
    throw ShapeMismatch("broadcast_to " + shape_str(x.shape()) + " -> " +
                        shape_str(shape));
  auto sa = broadcast_strides(x.shape(), shape);
  std::vector<int64_t> zero(shape.size(), 0);
  auto out = make_node<T>(shape);
  const T* xp = x.data().data();
  T* op = out->value.data();
  strided_walk(shape, sa, zero,
               [&](int64_t i, int64_t ix, int64_t) { op[i] = xp[ix]; });
  Node<T>* px = x.raw();
  Shape oshape = shape;
  attach(out, {x.node()}, [px, oshape, sa, zero](Node<T>* self) {
    px->ensure_grad();
    const T* g = self->grad.data();
    T* dx = px->grad.data();
    strided_walk(oshape, sa, zero,
                 [&](int64_t i, int64_t ix, int64_t) { dx[ix] += g[i]; });
  });
  return Tensor<T>(out);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeMismatch("concat of nothing");
  int nd = xs[0].ndim();
  if (axis < 0) axis += nd;
  Shape oshape = xs[0].shape();
  int64_t total = 0;
  for (const auto& t : xs) {
    if (t.ndim() != nd) throw ShapeMismatch("concat rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis && t.shape()[d] != oshape[d])
        throw ShapeMismatch("concat dim mismatch");
    total += t.shape()[axis];
  }
  oshape[axis] = total;
  auto out = make_node<T>(oshape);
  int64_t inner = 1;
  for (int d = axis + 1; d < nd; ++d) inner *= oshape[d];
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= oshape[d];
  int64_t orow = total * inner;

  std::vector<NodePtr<T>> parents;
  std::vector<int64_t> offs;  // start index along axis within the output
  std::vector<int64_t> lens;  // axis length per input
  int64_t cur = 0;
  for (const auto& t : xs) {
    int64_t rows = t.shape()[axis] * inner;
    const T* xp = t.data().data();
    T* op = out->value.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(xp + o * rows, xp + (o + 1) * rows,
                op + o * orow + cur * inner);
    parents.push_back(t.node());
    offs.push_back(cur);
    lens.push_back(t.shape()[axis]);
    cur += t.shape()[axis];
  }
  std::vector<Node<T>*> raw;
  for (auto& p : parents) raw.push_back(p.get());
  attach(out, parents, [raw, offs, lens, outer, inner, orow](Node<T>* self) {
    const T* g = self->grad.data();
    for (size_t k = 0; k < raw.size(); ++k) {
      Node<T>* p = raw[k];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      int64_t rows = lens[k] * inner;
      T* dx = p->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        const T* gs = g + o * orow + offs[k] * inner;
        T* ds = dx + o * rows;
        for (int64_t i = 0; i < rows; ++i) ds[i] += gs[i];
      }
    }
  });
  return Tensor<T>(out);
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
  int nd = x.ndim();
  if (axis < 0) axis += nd;
  if (start < 0 || start + len > x.shape()[axis])
    throw ShapeMismatch("slice out of range");
  Shape oshape = x.shape();
  oshape[axis] = len;
  int64_t inner = 1;
  for (int d = axis + 1; d < nd; ++d) inner *= x.shape()[d];
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= x.shape()[d];
  int64_t xrow = x.shape()[axis] * inner;
  int64_t orow = len * inner;
  auto out = make_node<T>(oshape);
  const T* xp = x.data().data();
  T* op = out->value.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(xp + o * xrow + start * inner, xp + o * xrow + start * inner + orow,
              op + o * orow);
  Node<T>* px = x.raw();
  attach(out, {x.node()}, [px, outer, inner, xrow, orow, start](Node<T>* self) {
    px->ensure_grad();
    const T* g = self->grad.data();
    T* dx = px->grad.data();
    for (int64_t o = 0; o < outer; ++o) {
      T* ds = dx + o * xrow + start * inner;
      const T* gs = g + o * orow;
      for (int64_t i = 0; i < orow; ++i) ds[i] += gs[i];
    }
  });
  return Tensor<T>(out);
}

// Gather slices along `axis`; backward is scatter-add into the source.
template <class T>
Tensor<T> index_select(const Tensor<T>& x, int axis,
                       const std::vector<int64_t>& idx) {
  int nd = x.ndim();
  if (axis < 0) axis += nd;
  int64_t ax = x.shape()[axis];
  for (int64_t i : idx)
    if (i < 0 || i >= ax) throw ShapeMismatch("index_select out of range");
  Shape oshape = x.shape();
  oshape[axis] = static_cast<int64_t>(idx.size());
  int64_t inner = 1;
  for (int d = axis + 1; d < nd; ++d) inner *= x.shape()[d];
  int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= x.shape()[d];
  int64_t xrow = ax * inner;
  int64_t orow = static_cast<int64_t>(idx.size()) * inner;
  auto out = make_node<T>(oshape);
  const T* xp = x.data().data();
  T* op = out->value.data();
  for (int64_t o = 0; o < outer; ++o)
    for (size_t k = 0; k < idx.size(); ++k)
      std::copy(xp + o * xrow + idx[k] * inner,
                xp + o * xrow + (idx[k] + 1) * inner,
                op + o * orow + static_cast<int64_t>(k) * inner);
  Node<T>* px = x.raw();
  std::vector<int64_t> idc = idx;
  attach(out, {x.node()}, [px, idc, outer, inner, xrow, orow](Node<T>* self) {
    px->ensure_grad();
    const T* g = self->grad.data();
    T* dx = px->grad.data();
    for (int64_t o = 0; o < outer; ++o)
      for (size_t k = 0; k < idc.size(); ++k) {
        const T* gs = g + o * orow + static_cast<int64_t>(k) * inner;
        T* ds = dx + o * xrow + idc[k] * inner;
        for (int64_t i = 0; i < inner; ++i) ds[i] += gs[i];
      }
  });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// matmul (batched, broadcasting leading dims, optional transposes and scale)

namespace detail {

inline std::vector<int64_t> batch_strides(const Shape& in, const Shape& obatch,
                                          int64_t slice_elems) {
  // strides (elements) of the leading dims of `in`, aligned right to obatch
  Shape ibatch(in.begin(), in.end() - 2);
  std::vector<int64_t> st(obatch.size(), 0);
  auto ist = contiguous_strides(ibatch);
  size_t off = obatch.size() - ibatch.size();
  for (size_t i = 0; i < ibatch.size(); ++i)
    st[off + i] = ibatch[i] == 1 ? 0 : ist[i] * slice_elems;
  return st;
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false, T alpha = T(1)) {
  using EMat =
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const EMat>;
  using MMap = Eigen::Map<EMat>;
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ShapeMismatch("matmul needs rank >= 2");
  int64_t ar = a.dim(-2), ac = a.dim(-1);
  int64_t br = b.dim(-2), bc = b.dim(-1);
  int64_t M = trans_a ? ac : ar;
  int64_t K = trans_a ? ar : ac;
  int64_t Kb = trans_b ? bc : br;
  int64_t N = trans_b ? br : bc;
  if (K != Kb)
    throw ShapeMismatch("matmul inner dim mismatch " + shape_str(a.shape()) +
                        " x " + shape_str(b.shape()));
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape obatch = broadcast_shape(abatch, bbatch);
  Shape oshape = obatch;
  oshape.push_back(M);
  oshape.push_back(N);
  auto out = make_node<T>(oshape);

  auto sa = detail::batch_strides(a.shape(), obatch, ar * ac);
  auto sb = detail::batch_strides(b.shape(), obatch, br * bc);
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* cp = out->value.data();
  int64_t slice_c = M * N;
  strided_walk(obatch, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
    CMap A(ap + ia, ar, ac);
    CMap B(bp + ib, br, bc);
    MMap C(cp + i * slice_c, M, N);
    if (!trans_a && !trans_b)
      C.noalias() = alpha * (A * B);
    else if (!trans_a && trans_b)
      C.noalias() = alpha * (A * B.transpose());
    else if (trans_a && !trans_b)
      C.noalias() = alpha * (A.transpose() * B);
    else
      C.noalias() = alpha * (A.transpose() * B.transpose());
  });

  Node<T>* pa = a.raw();
  Node<T>* pb = b.raw();
  attach(out, {a.node(), b.node()},
         [pa, pb, obatch, sa, sb, ar, ac, br, bc, M, N, trans_a, trans_b,
          alpha](Node<T>* self) {
           const T* g = self->grad.data();
           int64_t slice_c = M * N;
           bool need_a = pa->requires_grad;
           bool need_b = pb->requires_grad;
           if (need_a) pa->ensure_grad();
           if (need_b) pb->ensure_grad();
           strided_walk(obatch, sa, sb, [&](int64_t i, int64_t ia,
                                            int64_t ib) {
             CMap G(g + i * slice_c, M, N);
             CMap A(pa->value.data() + ia, ar, ac);
             CMap B(pb->value.data() + ib, br, bc);
             if (need_a) {
               MMap GA(pa->grad.data() + ia, ar, ac);
               if (!trans_a && !trans_b)
                 GA.noalias() += alpha * (G * B.transpose());
               else if (!trans_a && trans_b)
                 GA.noalias() += alpha * (G * B);
               else if (trans_a && !trans_b)
                 GA.noalias() += alpha * (B * G.transpose());
               else
                 GA.noalias() += alpha * (B.transpose() * G.transpose());
             }
             if (need_b) {
               MMap GB(pb->grad.data() + ib, br, bc);
               if (!trans_a && !trans_b)
                 GB.noalias() += alpha * (A.transpose() * G);
               else if (trans_a && !trans_b)
                 GB.noalias() += alpha * (A * G);
               else if (!trans_a && trans_b)
                 GB.noalias() += alpha * (G.transpose() * A);
               else
                 GB.noalias() += alpha * (G.transpose() * A.transpose());
             }
           });
         });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// softmax / cross-entropy (fused, row-max stabilized)

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  int64_t D = x.dim(-1);
  int64_t rows = x.numel() / D;
  auto out = make_node<T>(x.shape());
  const T* xp = x.data().data();
  T* op = out->value.data();
  for (int64_t r = 0; r < rows; ++r) {
    detail::CArrMap<T> xr(xp + r * D, D);
    detail::ArrMap<T> yr(op + r * D, D);
    yr = (xr - xr.maxCoeff()).exp();
    yr *= T(1) / yr.sum();
  }
  Node<T>* px = x.raw();
  attach(out, {x.node()}, [px, D, rows](Node<T>* self) {
    px->ensure_grad();
    const T* g = self->grad.data();
    const T* y = self->value.data();
    T* dx = px->grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      detail::CArrMap<T> gr(g + r * D, D);
      detail::CArrMap<T> yr(y + r * D, D);
      detail::ArrMap<T> dr(dx + r * D, D);
      T dot = (gr * yr).sum();
      dr += yr * (gr - dot);
    }
  });
  return Tensor<T>(out);
}

// Mean negative log-likelihood over rows for integer class labels.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        const std::vector<int64_t>& labels) {
  if (logits.ndim() != 2) throw ShapeMismatch("cross_entropy expects [B,K]");
  int64_t B = logits.dim(0), K = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != B)
    throw ShapeMismatch("cross_entropy label count mismatch");
  for (int64_t l : labels)
    if (l < 0 || l >= K) throw ShapeMismatch("label out of range");
  auto out = make_node<T>(Shape{1});
  const T* xp = logits.data().data();
  std::vector<T> probs(B * K);
  T loss = T(0);
  for (int64_t r = 0; r < B; ++r) {
    const T* xr = xp + r * K;
    T* pr = probs.data() + r * K;
    T m = xr[0];
    for (int64_t j = 1; j < K; ++j) m = std::max(m, xr[j]);
    T s = T(0);
    for (int64_t j = 0; j < K; ++j) {
      pr[j] = std::exp(xr[j] - m);
      s += pr[j];
    }
    T inv = T(1) / s;
    for (int64_t j = 0; j < K; ++j) pr[j] *= inv;
    loss -= std::log(std::max(pr[labels[r]], std::numeric_limits<T>::min()));
  }
  out->value[0] = loss / static_cast<T>(B);
  Node<T>* px = logits.raw();
  std::vector<int64_t> lab = labels;
  attach(out, {logits.node()},
         [px, lab, B, K, probs = std::move(probs)](Node<T>* self) {
           px->ensure_grad();
           T g = self->grad[0] / static_cast<T>(B);
           T* dx = px->grad.data();
           for (int64_t r = 0; r < B; ++r)
             for (int64_t j = 0; j < K; ++j)
               dx[r * K + j] +=
                   g * (probs[r * K + j] - (lab[r] == j ? T(1) : T(0)));
         });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// normalization

// LayerNorm over the last dim; population variance.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  int64_t D = x.dim(-1);
  if (gamma.numel() != D || beta.numel() != D)
    throw ShapeMismatch("layer_norm affine params must have last-dim size");
  int64_t rows = x.numel() / D;
  auto out = make_node<T>(x.shape());
  const T* xp = x.data().data();
  const T* gm = gamma.data().data();
  const T* bt = beta.data().data();
  T* op = out->value.data();
  std::vector<T> inv_std(rows), mean(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xp + r * D;
    T mu = T(0);
    for (int64_t j = 0; j < D; ++j) mu += xr[j];
    mu /= static_cast<T>(D);
    T var = T(0);
    for (int64_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(D);
    T is = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    inv_std[r] = is;
    T* yr = op + r * D;
    for (int64_t j = 0; j < D; ++j) yr[j] = (xr[j] - mu) * is * gm[j] + bt[j];
  }
  Node<T>* px = x.raw();
  Node<T>* pg = gamma.raw();
  Node<T>* pb = beta.raw();
  attach(out, {x.node(), gamma.node(), beta.node()},
         [px, pg, pb, D, rows, mean = std::move(mean),
          inv_std = std::move(inv_std)](Node<T>* self) {
           const T* g = self->grad.data();
           const T* xv = px->value.data();
           const T* gm = pg->value.data();
           bool nx = px->requires_grad, ng = pg->requires_grad,
                nb = pb->requires_grad;
           if (nx) px->ensure_grad();
           if (ng) pg->ensure_grad();
           if (nb) pb->ensure_grad();
           for (int64_t r = 0; r < rows; ++r) {
             const T* gr = g + r * D;
             const T* xr = xv + r * D;
             T mu = mean[r], is = inv_std[r];
             if (ng || nb) {
               for (int64_t j = 0; j < D; ++j) {
                 T xh = (xr[j] - mu) * is;
                 if (ng) pg->grad[j] += gr[j] * xh;
                 if (nb) pb->grad[j] += gr[j];
               }
             }
             if (nx) {
               T sum_g = T(0), sum_gx = T(0);
               for (int64_t j = 0; j < D; ++j) {
                 T xh = (xr[j] - mu) * is;
                 sum_g += gr[j] * gm[j];
                 sum_gx += gr[j] * gm[j] * xh;
               }
               T invD = T(1) / static_cast<T>(D);
               T* dr = px->grad.data() + r * D;
               for (int64_t j = 0; j < D; ++j) {
                 T xh = (xr[j] - mu) * is;
                 dr[j] += is * (gr[j] * gm[j] - invD * sum_g - xh * invD * sum_gx);
               }
             }
           }
         });
  return Tensor<T>(out);
}

// BatchNorm over dim 0 of a [B, C] input; population (biased) variance both
// for normalization and for the running-stat update. Running stats live
// outside the graph and are only touched when update_running is set.
template <class T>
Tensor<T> batch_norm1d(const Tensor<T>& x, const Tensor<T>& gamma,
                       const Tensor<T>& beta, AVec<T>& running_mean,
                       AVec<T>& running_var, bool training,
                       bool update_running, T momentum = T(0.1),
                       T eps = T(1e-5)) {
  if (x.ndim() != 2) throw ShapeMismatch("batch_norm1d expects [B,C]");
  int64_t B = x.dim(0), C = x.dim(1);
  if (gamma.numel() != C || beta.numel() != C ||
      static_cast<int64_t>(running_mean.size()) != C ||
      static_cast<int64_t>(running_var.size()) != C)
    throw ShapeMismatch("batch_norm1d channel mismatch");
  auto out = make_node<T>(x.shape());
  const T* xp = x.data().data();
  const T* gm = gamma.data().data();
  const T* bt = beta.data().data();
  T* op = out->value.data();
  std::vector<T> mu(C), iv(C);
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      T m = T(0);
      for (int64_t b = 0; b < B; ++b) m += xp[b * C + c];
      m /= static_cast<T>(B);
      T v = T(0);
      for (int64_t b = 0; b < B; ++b) {
        T d = xp[b * C + c] - m;
        v += d * d;
      }
      v /= static_cast<T>(B);
      mu[c] = m;
      iv[c] = T(1) / std::sqrt(v + eps);
      if (update_running) {
        running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * m;
        running_var[c] = (T(1) - momentum) * running_var[c] + momentum * v;
      }
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mu[c] = running_mean[c];
      iv[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      op[b * C + c] = (xp[b * C + c] - mu[c]) * iv[c] * gm[c] + bt[c];

  Node<T>* px = x.raw();
  Node<T>* pg = gamma.raw();
  Node<T>* pb = beta.raw();
  attach(out, {x.node(), gamma.node(), beta.node()},
         [px, pg, pb, B, C, training, mu = std::move(mu),
          iv = std::move(iv)](Node<T>* self) {
           const T* g = self->grad.data();
           const T* xv = px->value.data();
           const T* gm = pg->value.data();
           bool nx = px->requires_grad, ng = pg->requires_grad,
                nb = pb->requires_grad;
           if (nx) px->ensure_grad();
           if (ng) pg->ensure_grad();
           if (nb) pb->ensure_grad();
           T invB = T(1) / static_cast<T>(B);
           for (int64_t c = 0; c < C; ++c) {
             T sum_g = T(0), sum_gx = T(0);
             for (int64_t b = 0; b < B; ++b) {
               T xh = (xv[b * C + c] - mu[c]) * iv[c];
               sum_g += g[b * C + c];
               sum_gx += g[b * C + c] * xh;
             }
             if (ng) pg->grad[c] += sum_gx;
             if (nb) pb->grad[c] += sum_g;
             if (nx) {
               for (int64_t b = 0; b < B; ++b) {
                 T xh = (xv[b * C + c] - mu[c]) * iv[c];
                 T go = g[b * C + c] * gm[c];
                 if (training) {
                   px->grad[b * C + c] +=
                       iv[c] * (go - invB * gm[c] * sum_g -
                                xh * invB * gm[c] * sum_gx);
                 } else {
                   px->grad[b * C + c] += go * iv[c];
                 }
               }
             }
           }
         });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// convolution and pooling

// x: [B, Cin, L], w: [Cout, Cin, K], b: [Cout] (optional, pass undefined)
template <class T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int64_t stride = 1, int64_t padding = 0) {
  if (x.ndim() != 3 || w.ndim() != 3)
    throw ShapeMismatch("conv1d expects x [B,C,L], w [O,C,K]");
  int64_t B = x.dim(0), Cin = x.dim(1), L = x.dim(2);
  int64_t Cout = w.dim(0), K = w.dim(2);
  if (w.dim(1) != Cin) throw ShapeMismatch("conv1d channel mismatch");
  if (b.defined() && b.numel() != Cout)
    throw ShapeMismatch("conv1d bias size mismatch");
  int64_t Lout = (L + 2 * padding - K) / stride + 1;
  if (Lout <= 0) throw ShapeMismatch("conv1d output length <= 0");
  auto out = make_node<T>(Shape{B, Cout, Lout});
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  const T* bp = b.defined() ? b.data().data() : nullptr;
  T* op = out->value.data();
  for (int64_t n = 0; n < B; ++n)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t lo = 0; lo < Lout; ++lo) {
        T acc = bp ? bp[co] : T(0);
        int64_t base = lo * stride - padding;
        for (int64_t ci = 0; ci < Cin; ++ci) {
          const T* xr = xp + (n * Cin + ci) * L;
          const T* wr = wp + (co * Cin + ci) * K;
          for (int64_t k = 0; k < K; ++k) {
            int64_t li = base + k;
            if (li >= 0 && li < L) acc += xr[li] * wr[k];
          }
        }
        op[(n * Cout + co) * Lout + lo] = acc;
      }
  Node<T>* px = x.raw();
  Node<T>* pw = w.raw();
  Node<T>* pbn = b.defined() ? b.raw() : nullptr;
  std::vector<NodePtr<T>> parents{x.node(), w.node()};
  if (b.defined()) parents.push_back(b.node());
  attach(out, std::move(parents),
         [px, pw, pbn, B, Cin, L, Cout, K, Lout, stride,
          padding](Node<T>* self) {
           const T* g = self->grad.data();
           bool nx = px->requires_grad, nw = pw->requires_grad;
           bool nb = pbn && pbn->requires_grad;
           if (nx) px->ensure_grad();
           if (nw) pw->ensure_grad();
           if (nb) pbn->ensure_grad();
           for (int64_t n = 0; n < B; ++n)
             for (int64_t co = 0; co < Cout; ++co)
               for (int64_t lo = 0; lo < Lout; ++lo) {
                 T go = g[(n * Cout + co) * Lout + lo];
                 if (go == T(0)) continue;
                 if (nb) pbn->grad[co] += go;
                 int64_t base = lo * stride - padding;
                 for (int64_t ci = 0; ci < Cin; ++ci) {
                   for (int64_t k = 0; k < K; ++k) {
                     int64_t li = base + k;
                     if (li < 0 || li >= L) continue;
                     if (nx)
                       px->grad[(n * Cin + ci) * L + li] +=
                           go * pw->value[(co * Cin + ci) * K + k];
                     if (nw)
                       pw->grad[(co * Cin + ci) * K + k] +=
                           go * px->value[(n * Cin + ci) * L + li];
                   }
                 }
               }
         });
  return Tensor<T>(out);
}

// x: [B, C, L] -> [B, C, out_len]; bin i covers [floor(iL/o), ceil((i+1)L/o)).
// First maximum wins on ties.
template <class T>
Tensor<T> adaptive_max_pool1d(const Tensor<T>& x, int64_t out_len) {
  if (x.ndim() != 3) throw ShapeMismatch("adaptive_max_pool1d expects [B,C,L]");
  int64_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  auto out = make_node<T>(Shape{B, C, out_len});
  const T* xp = x.data().data();
  T* op = out->value.data();
  std::vector<int64_t> argmax(B * C * out_len);
  for (int64_t n = 0; n < B; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T* xr = xp + (n * C + c) * L;
      for (int64_t i = 0; i < out_len; ++i) {
        int64_t s = i * L / out_len;
        int64_t e = ((i + 1) * L + out_len - 1) / out_len;
        int64_t best = s;
        for (int64_t j = s + 1; j < e; ++j)
          if (xr[j] > xr[best]) best = j;
        op[(n * C + c) * out_len + i] = xr[best];
        argmax[(n * C + c) * out_len + i] = best;
      }
    }
  Node<T>* px = x.raw();
  attach(out, {x.node()},
         [px, B, C, L, out_len, argmax = std::move(argmax)](Node<T>* self) {
           px->ensure_grad();
           const T* g = self->grad.data();
           for (int64_t i = 0; i < static_cast<int64_t>(self->numel()); ++i) {
             int64_t row = i / out_len;
             px->grad[row * L + argmax[i]] += g[i];
           }
         });
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// composed conveniences

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  auto y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  return mean_all(square(sub(pred, target)));
}

// Elementwise stable BCE on logits: softplus(x) - x*y, mean-reduced.
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  return mean_all(sub(softplus(logits), mul(logits, targets)));
}

// Cosine similarity along the last axis; zero vectors yield 0.
template <class T>
Tensor<T> cosine_similarity_lastdim(const Tensor<T>& a, const Tensor<T>& b,
                                    T eps = T(1e-8)) {
  auto dot = sum_axes(mul(a, b), {-1}, true);
  auto na = sqrt_t(add_scalar(sum_axes(square(a), {-1}, true), eps));
  auto nb = sqrt_t(add_scalar(sum_axes(square(b), {-1}, true), eps));
  return div(dot, mul(na, nb));
}

}  // namespace mmae::nn
