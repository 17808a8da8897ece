#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dualharm/tensor.hpp"

namespace dualharm {

// Minimal reverse-mode differentiation over Tensor values. A Var is a node in
// a dynamically recorded graph; calling backward() on a scalar Var
// accumulates d(root)/d(node) into every node with requires_grad set.

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<Var<T>> parents;
  std::function<void(Node&)> backward_fn;

  const Shape& shape() const { return value.shape(); }

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size() || !(grad.shape() == value.shape())) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !grad.empty(); }
  void zero_grad() { grad = Tensor<T>(); }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return leaf(std::move(value), false);
}

/// Creates an interior node. The backward function is kept only when some
/// parent needs a gradient and recording is enabled.
template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return node;
}

template <typename T>
Var<T> detach(const Var<T>& v) {
  return constant(v->value);
}

/// Backpropagates from `root` with seed gradient `seed` (ones when omitted).
template <typename T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
  if (!root->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Tensor<T>& g = root->ensure_grad();
  if (seed) {
    if (!(seed->shape() == g.shape())) throw ShapeError("backward seed shape " + seed->shape().str());
    g += *seed;
  } else {
    for (auto& v : g) v += T(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic with broadcasting. Each dimension of an operand must
// either match the result or be 1.

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  auto dim = [&](int x, int y) {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError("cannot broadcast " + a.str() + " with " + b.str());
  };
  return Shape{dim(a.n, b.n), dim(a.c, b.c), dim(a.h, b.h), dim(a.w, b.w)};
}

struct Strides {
  std::size_t n, c, h, w;
};

inline Strides broadcast_strides(const Shape& s) {
  std::size_t sw = 1, sh = static_cast<std::size_t>(s.w), sc = sh * s.h, sn = sc * s.c;
  return Strides{s.n == 1 ? 0 : sn, s.c == 1 ? 0 : sc, s.h == 1 ? 0 : sh, s.w == 1 ? 0 : sw};
}

// Calls f(out_index, a_index, b_index) over the broadcast result.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  if (a == out && b == out) {
    for (std::size_t i = 0; i < out.size(); ++i) f(i, i, i);
    return;
  }
  const Strides sa = broadcast_strides(a), sb = broadcast_strides(b);
  std::size_t o = 0;
  for (int n = 0; n < out.n; ++n)
    for (int c = 0; c < out.c; ++c)
      for (int y = 0; y < out.h; ++y) {
        std::size_t ia = n * sa.n + c * sa.c + y * sa.h;
        std::size_t ib = n * sb.n + c * sb.c + y * sb.h;
        for (int x = 0; x < out.w; ++x, ++o) f(o, ia + x * sa.w, ib + x * sb.w);
      }
}

// Binary op: fwd(a, b) -> out; dfa/dfb(a, b, out) -> partial derivatives.
template <typename T, typename Fwd, typename Da, typename Db>
Var<T> binary(const Var<T>& a, const Var<T>& b, Fwd fwd, Da da, Db db) {
  const Shape out_shape = broadcast_shape(a->shape(), b->shape());
  Tensor<T> out(out_shape);
  const T* pa = a->value.data();
  const T* pb = b->value.data();
  T* po = out.data();
  for_each_broadcast(out_shape, a->shape(), b->shape(),
                     [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = fwd(pa[ia], pb[ib]); });
  return make_node<T>(std::move(out), {a, b}, [a, b, da, db](Node<T>& self) {
    const T* pa = a->value.data();
    const T* pb = b->value.data();
    const T* po = self.value.data();
    const T* g = self.grad.data();
    T* gpa = a->requires_grad ? a->ensure_grad().data() : nullptr;
    T* gpb = b->requires_grad ? b->ensure_grad().data() : nullptr;
    for_each_broadcast(self.shape(), a->shape(), b->shape(), [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (gpa) gpa[ia] += g[o] * da(pa[ia], pb[ib], po[o]);
      if (gpb) gpb[ib] += g[o] * db(pa[ia], pb[ib], po[o]);
    });
  });
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& x, Fwd fwd, Deriv deriv) {
  Tensor<T> out(x->shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x->value[i]);
  return make_node<T>(std::move(out), {x}, [x, deriv](Node<T>& self) {
    Tensor<T>& gx = x->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * deriv(x->value[i], self.value[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T out) { return -out / y; });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary<T>(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

/// Computes s - x elementwise.
template <typename T>
Var<T> rsub_scalar(T s, const Var<T>& x) {
  return detail::unary<T>(x, [s](T v) { return s - v; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return v > T(0) || v != v ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return detail::unary<T>(
      x, [slope](T v) { return v > T(0) || v != v ? v : slope * v; }, [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary<T>(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); }, [](T, T y) { return y * (T(1) - y); });
}

/// Sum of all elements as a (1,1,1,1) scalar.
template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x->value) s += v;
  return make_node<T>(Tensor<T>::scalar(s), {x}, [x](Node<T>& self) {
    const T g = self.grad[0];
    for (auto& v : x->ensure_grad()) v += g;
  });
}

/// Sum of squared elements as a scalar.
template <typename T>
Var<T> sum_squares(const Var<T>& x) {
  T s = 0;
  for (T v : x->value) s += v * v;
  return make_node<T>(Tensor<T>::scalar(s), {x}, [x](Node<T>& self) {
    const T g = self.grad[0];
    Tensor<T>& gx = x->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += T(2) * g * x->value[i];
  });
}

/// Sum of squared differences ||a - b||^2 (no broadcasting).
template <typename T>
Var<T> squared_distance(const Var<T>& a, const Var<T>& b) {
  if (!(a->shape() == b->shape())) throw ShapeError("squared_distance: " + a->shape().str() + " vs " + b->shape().str());
  T s = 0;
  for (std::size_t i = 0; i < a->value.size(); ++i) {
    const T d = a->value[i] - b->value[i];
    s += d * d;
  }
  return make_node<T>(Tensor<T>::scalar(s), {a, b}, [a, b](Node<T>& self) {
    const T g = self.grad[0];
    T* ga = a->requires_grad ? a->ensure_grad().data() : nullptr;
    T* gb = b->requires_grad ? b->ensure_grad().data() : nullptr;
    for (std::size_t i = 0; i < a->value.size(); ++i) {
      const T d = T(2) * g * (a->value[i] - b->value[i]);
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape s) {
  return make_node<T>(x->value.reshaped(s), {x}, [x](Node<T>& self) {
    Tensor<T>& gx = x->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

/// Channel-wise concatenation of tensors that agree in N, H and W.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape s0 = xs.front()->shape();
  int channels = 0;
  for (const auto& x : xs) {
    const Shape& s = x->shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
      throw ShapeError("concat_channels: " + s0.str() + " vs " + s.str());
    channels += s.c;
  }
  Tensor<T> out(Shape{s0.n, channels, s0.h, s0.w});
  const std::size_t plane = s0.plane();
  for (int n = 0; n < s0.n; ++n) {
    int offset = 0;
    for (const auto& x : xs) {
      std::copy_n(x->value.plane(n, 0), plane * x->shape().c, out.plane(n, offset));
      offset += x->shape().c;
    }
  }
  return make_node<T>(std::move(out), xs, [xs, plane](Node<T>& self) {
    for (int n = 0; n < self.shape().n; ++n) {
      int offset = 0;
      for (const auto& x : xs) {
        const std::size_t count = plane * x->shape().c;
        if (x->requires_grad) {
          T* gx = x->ensure_grad().plane(n, 0);
          const T* g = self.grad.plane(n, offset);
          for (std::size_t i = 0; i < count; ++i) gx[i] += g[i];
        }
        offset += x->shape().c;
      }
    }
  });
}

/// Channels [begin, begin + count) of x.
template <typename T>
Var<T> slice_channels(const Var<T>& x, int begin, int count) {
  const Shape s = x->shape();
  if (begin < 0 || count < 0 || begin + count > s.c) throw ShapeError("slice_channels out of range for " + s.str());
  Tensor<T> out(Shape{s.n, count, s.h, s.w});
  for (int n = 0; n < s.n; ++n) std::copy_n(x->value.plane(n, begin), s.plane() * count, out.plane(n, 0));
  return make_node<T>(std::move(out), {x}, [x, begin, count](Node<T>& self) {
    const Shape s = x->shape();
    Tensor<T>& gx = x->ensure_grad();
    for (int n = 0; n < s.n; ++n) {
      T* dst = gx.plane(n, begin);
      const T* src = self.grad.plane(n, 0);
      for (std::size_t i = 0; i < s.plane() * count; ++i) dst[i] += src[i];
    }
  });
}

}  // namespace dualharm

namespace dualharm {

/// Picks `a` where mask == 1 and `b` elsewhere. The mask is (N or 1, 1, H, W)
/// and broadcasts over channels; a and b share one shape.
template <typename T>
Var<T> where_mask(const Tensor<T>& mask, const Var<T>& a, const Var<T>& b) {
  const Shape s = a->shape();
  if (!(b->shape() == s)) throw ShapeError("where_mask: " + s.str() + " vs " + b->shape().str());
  const Shape ms = mask.shape();
  if (ms.c != 1 || ms.h != s.h || ms.w != s.w || (ms.n != s.n && ms.n != 1))
    throw ShapeError("where_mask: mask " + ms.str() + " incompatible with " + s.str());
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    const T* m = mask.plane(ms.n == 1 ? 0 : n, 0);
    for (int c = 0; c < s.c; ++c) {
      const T* pa = a->value.plane(n, c);
      const T* pb = b->value.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) o[i] = m[i] == T(1) ? pa[i] : pb[i];
    }
  }
  return make_node<T>(std::move(out), {a, b}, [mask, a, b](Node<T>& self) {
    const Shape s = a->shape();
    const Shape ms = mask.shape();
    T* ga = a->requires_grad ? a->ensure_grad().data() : nullptr;
    T* gb = b->requires_grad ? b->ensure_grad().data() : nullptr;
    for (int n = 0; n < s.n; ++n) {
      const T* m = mask.plane(ms.n == 1 ? 0 : n, 0);
      for (int c = 0; c < s.c; ++c) {
        const std::size_t base = a->value.index(n, c, 0, 0);
        const T* g = self.grad.data() + base;
        for (std::size_t i = 0; i < s.plane(); ++i) {
          if (m[i] == T(1)) {
            if (ga) ga[base + i] += g[i];
          } else if (gb) {
            gb[base + i] += g[i];
          }
        }
      }
    }
  });
}

}  // namespace dualharm
