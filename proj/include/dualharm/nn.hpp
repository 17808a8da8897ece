#pragma once

#include <Eigen/Core>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dualharm/autograd.hpp"

namespace dualharm {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  int cin, h, w, k, stride, pad, ho, wo;
  std::size_t rows() const { return static_cast<std::size_t>(cin) * k * k; }
  std::size_t cols() const { return static_cast<std::size_t>(ho) * wo; }
};

/// Output columns [lo, hi) whose input column ox*stride - pad + kx is in range.
inline std::pair<int, int> valid_columns(const ConvGeometry& g, int kx) {
  const int offset = kx - g.pad;
  int lo = offset >= 0 ? 0 : (-offset + g.stride - 1) / g.stride;
  int hi = g.w - 1 - offset < 0 ? 0 : (g.w - 1 - offset) / g.stride + 1;
  lo = std::min(lo, g.wo);
  hi = std::clamp(hi, lo, g.wo);
  return {lo, hi};
}

template <typename T>
void im2col(const T* src, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.cols();
  for (int ci = 0; ci < g.cin; ++ci) {
    const T* plane = src + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * cols;
        const auto [lo, hi] = valid_columns(g, kx);
        const int offset = kx - g.pad;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* out = row + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(out, g.wo, T(0));
            continue;
          }
          const T* in = plane + static_cast<std::size_t>(iy) * g.w;
          std::fill_n(out, lo, T(0));
          if (g.stride == 1) {
            if (hi > lo) std::copy(in + lo + offset, in + hi + offset, out + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) out[ox] = in[ox * g.stride + offset];
          }
          std::fill(out + hi, out + g.wo, T(0));
        }
      }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dst) {
  const std::size_t cols = g.cols();
  for (int ci = 0; ci < g.cin; ++ci) {
    T* plane = dst + static_cast<std::size_t>(ci) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * cols;
        const auto [lo, hi] = valid_columns(g, kx);
        const int offset = kx - g.pad;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* in = row + static_cast<std::size_t>(oy) * g.wo;
          T* out = plane + static_cast<std::size_t>(iy) * g.w;
          if (g.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) out[ox + offset] += in[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) out[ox * g.stride + offset] += in[ox];
          }
        }
      }
  }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. `weight` is (Cout, Cin, k, k),
/// `bias` is (1, Cout, 1, 1) or null.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  const Shape xs = x->shape();
  const Shape ws = weight->shape();
  if (ws.c != xs.c || ws.h != ws.w)
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with weight " + ws.str());
  detail::ConvGeometry g{xs.c, xs.h, xs.w, ws.h, stride, pad, 0, 0};
  g.ho = (xs.h + 2 * pad - g.k) / stride + 1;
  g.wo = (xs.w + 2 * pad - g.k) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: input " + xs.str() + " too small for kernel");
  const int cout = ws.n;

  Tensor<T> out(Shape{xs.n, cout, g.ho, g.wo});
  AlignedVector<T> col(g.rows() * g.cols());
  using Mat = detail::RowMat<T>;
  Eigen::Map<const Mat> wmat(weight->value.data(), cout, static_cast<Eigen::Index>(g.rows()));
  for (int n = 0; n < xs.n; ++n) {
    detail::im2col(x->value.plane(n, 0), g, col.data());
    Eigen::Map<const Mat> cmat(col.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
    Eigen::Map<Mat> omat(out.plane(n, 0), cout, static_cast<Eigen::Index>(g.cols()));
    omat.noalias() = wmat * cmat;
    if (bias) {
      for (int co = 0; co < cout; ++co) omat.row(co).array() += bias->value[co];
    }
  }

  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(bias);
  return make_node<T>(std::move(out), parents, [x, weight, bias, g, cout](Node<T>& self) {
    using Mat = detail::RowMat<T>;
    const Eigen::Index rows = static_cast<Eigen::Index>(g.rows()), cols = static_cast<Eigen::Index>(g.cols());
    Eigen::Map<const Mat> wmat(weight->value.data(), cout, rows);
    AlignedVector<T> col(g.rows() * g.cols());
    Mat gw;
    if (weight->requires_grad) gw = Mat::Zero(cout, rows);
    for (int n = 0; n < x->shape().n; ++n) {
      Eigen::Map<const Mat> gout(self.grad.plane(n, 0), cout, cols);
      if (weight->requires_grad) {
        detail::im2col(x->value.plane(n, 0), g, col.data());
        Eigen::Map<const Mat> cmat(col.data(), rows, cols);
        gw.noalias() += gout * cmat.transpose();
      }
      if (x->requires_grad) {
        Eigen::Map<Mat> gcol(col.data(), rows, cols);
        gcol.noalias() = wmat.transpose() * gout;
        detail::col2im(col.data(), g, x->ensure_grad().plane(n, 0));
      }
      if (bias && bias->requires_grad) {
        Tensor<T>& gb = bias->ensure_grad();
        for (int co = 0; co < cout; ++co) gb[co] += gout.row(co).sum();
      }
    }
    if (weight->requires_grad) {
      Eigen::Map<Mat> gwm(weight->ensure_grad().data(), cout, rows);
      gwm += gw;
    }
  });
}

/// Batch normalization over (N, H, W) per channel. In training mode batch
/// statistics are used and the running estimates are updated in place.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const Shape s = x->shape();
  const std::size_t plane = s.plane();
  const std::size_t count = plane * s.n;
  Tensor<T> out(s);
  if (!training) {
    std::vector<T> a(s.c), b(s.c);
    for (int c = 0; c < s.c; ++c) {
      a[c] = gamma->value[c] / std::sqrt(running_var[c] + eps);
      b[c] = beta->value[c] - a[c] * running_mean[c];
    }
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* in = x->value.plane(n, c);
        T* o = out.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) o[i] = a[c] * in[i] + b[c];
      }
    std::vector<T> inv(s.c), mean(s.c);
    for (int c = 0; c < s.c; ++c) {
      inv[c] = T(1) / std::sqrt(running_var[c] + eps);
      mean[c] = running_mean[c];
    }
    return make_node<T>(std::move(out), {x, gamma, beta}, [x, gamma, beta, inv, mean](Node<T>& self) {
      const Shape s = x->shape();
      for (int c = 0; c < s.c; ++c) {
        T dg = 0, db = 0;
        for (int n = 0; n < s.n; ++n) {
          const T* g = self.grad.plane(n, c);
          const T* in = x->value.plane(n, c);
          T* gx = x->requires_grad ? x->ensure_grad().plane(n, c) : nullptr;
          for (std::size_t i = 0; i < s.plane(); ++i) {
            if (gx) gx[i] += g[i] * gamma->value[c] * inv[c];
            dg += g[i] * (in[i] - mean[c]) * inv[c];
            db += g[i];
          }
        }
        if (gamma->requires_grad) gamma->ensure_grad()[c] += dg;
        if (beta->requires_grad) beta->ensure_grad()[c] += db;
      }
    });
  }

  auto xhat = std::make_shared<Tensor<T>>(s);
  auto inv_std = std::make_shared<std::vector<T>>(s.c);
  for (int c = 0; c < s.c; ++c) {
    T mean = 0;
    for (int n = 0; n < s.n; ++n) {
      const T* in = x->value.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) mean += in[i];
    }
    mean /= static_cast<T>(count);
    T var = 0;
    for (int n = 0; n < s.n; ++n) {
      const T* in = x->value.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) var += (in[i] - mean) * (in[i] - mean);
    }
    var /= static_cast<T>(count);
    const T inv = T(1) / std::sqrt(var + eps);
    (*inv_std)[c] = inv;
    for (int n = 0; n < s.n; ++n) {
      const T* in = x->value.plane(n, c);
      T* xh = xhat->plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (in[i] - mean) * inv;
        o[i] = gamma->value[c] * xh[i] + beta->value[c];
      }
    }
    const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
    running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean;
    running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
  }
  return make_node<T>(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, count](Node<T>& self) {
    const Shape s = x->shape();
    const T m = static_cast<T>(count);
    for (int c = 0; c < s.c; ++c) {
      T sum_g = 0, sum_gx = 0;
      for (int n = 0; n < s.n; ++n) {
        const T* g = self.grad.plane(n, c);
        const T* xh = xhat->plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          sum_g += g[i];
          sum_gx += g[i] * xh[i];
        }
      }
      if (gamma->requires_grad) gamma->ensure_grad()[c] += sum_gx;
      if (beta->requires_grad) beta->ensure_grad()[c] += sum_g;
      if (!x->requires_grad) continue;
      const T k = gamma->value[c] * (*inv_std)[c] / m;
      for (int n = 0; n < s.n; ++n) {
        const T* g = self.grad.plane(n, c);
        const T* xh = xhat->plane(n, c);
        T* gx = x->ensure_grad().plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) gx[i] += k * (m * g[i] - sum_g - xh[i] * sum_gx);
      }
    }
  });
}

/// Instance normalization without affine parameters: each (n, c) plane is
/// shifted to zero mean and scaled to unit variance.
template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps = T(1e-5)) {
  const Shape s = x->shape();
  const std::size_t plane = s.plane();
  Tensor<T> out(s);
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(s.n) * s.c);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* in = x->value.plane(n, c);
      T mean = 0;
      for (std::size_t i = 0; i < plane; ++i) mean += in[i];
      mean /= static_cast<T>(plane);
      T var = 0;
      for (std::size_t i = 0; i < plane; ++i) var += (in[i] - mean) * (in[i] - mean);
      var /= static_cast<T>(plane);
      const T inv = T(1) / std::sqrt(var + eps);
      (*inv_std)[static_cast<std::size_t>(n) * s.c + c] = inv;
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) o[i] = (in[i] - mean) * inv;
    }
  return make_node<T>(std::move(out), {x}, [x, inv_std](Node<T>& self) {
    const Shape s = x->shape();
    const T m = static_cast<T>(s.plane());
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* g = self.grad.plane(n, c);
        const T* xh = self.value.plane(n, c);
        T sum_g = 0, sum_gx = 0;
        for (std::size_t i = 0; i < s.plane(); ++i) {
          sum_g += g[i];
          sum_gx += g[i] * xh[i];
        }
        const T k = (*inv_std)[static_cast<std::size_t>(n) * s.c + c] / m;
        T* gx = x->ensure_grad().plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) gx[i] += k * (m * g[i] - sum_g - xh[i] * sum_gx);
      }
  });
}

/// 2x2 max pooling with stride 2; H and W must be even.
template <typename T>
Var<T> max_pool2(const Var<T>& x) {
  const Shape s = x->shape();
  if (s.h % 2 || s.w % 2) throw ShapeError("max_pool2 needs even spatial size, got " + s.str());
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Tensor<T> out(os);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(os.size());
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* in = x->value.plane(n, c);
      for (int y = 0; y < os.h; ++y)
        for (int xo = 0; xo < os.w; ++xo, ++o) {
          std::uint32_t best = static_cast<std::uint32_t>(2 * y * s.w + 2 * xo);
          for (std::uint32_t cand : {best + 1, best + static_cast<std::uint32_t>(s.w), best + static_cast<std::uint32_t>(s.w) + 1})
            if (in[cand] > in[best]) best = cand;
          (*argmax)[o] = best;
          out[o] = in[best];
        }
    }
  return make_node<T>(std::move(out), {x}, [x, argmax](Node<T>& self) {
    const Shape os = self.shape();
    Tensor<T>& gx = x->ensure_grad();
    std::size_t o = 0;
    for (int n = 0; n < os.n; ++n)
      for (int c = 0; c < os.c; ++c) {
        T* g = gx.plane(n, c);
        for (std::size_t i = 0; i < os.plane(); ++i, ++o) g[(*argmax)[o]] += self.grad[o];
      }
  });
}

/// Nearest-neighbour upsampling by an integer factor.
template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int factor = 2) {
  const Shape s = x->shape();
  const Shape os{s.n, s.c, s.h * factor, s.w * factor};
  Tensor<T> out(os);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* in = x->value.plane(n, c);
      T* o = out.plane(n, c);
      for (int y = 0; y < os.h; ++y)
        for (int xo = 0; xo < os.w; ++xo) o[y * os.w + xo] = in[(y / factor) * s.w + xo / factor];
    }
  return make_node<T>(std::move(out), {x}, [x, factor](Node<T>& self) {
    const Shape s = x->shape();
    const Shape os = self.shape();
    Tensor<T>& gx = x->ensure_grad();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* g = self.grad.plane(n, c);
        T* gi = gx.plane(n, c);
        for (int y = 0; y < os.h; ++y)
          for (int xo = 0; xo < os.w; ++xo) gi[(y / factor) * s.w + xo / factor] += g[y * os.w + xo];
      }
  });
}

// ---------------------------------------------------------------------------
// Parameterized layers.

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

/// Flat view of a network's learnable parameters and persistent buffers.
template <typename T>
struct ParamList {
  std::vector<NamedParam<T>> params;
  std::vector<NamedBuffer<T>> buffers;

  void append(const ParamList& o) {
    params.insert(params.end(), o.params.begin(), o.params.end());
    buffers.insert(buffers.end(), o.buffers.begin(), o.buffers.end());
  }
  void set_requires_grad(bool on) {
    for (auto& p : params) p.var->requires_grad = on;
  }
  void zero_grad() {
    for (auto& p : params) p.var->zero_grad();
  }
};

template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  template <typename Rng>
  Conv2d(int cin, int cout, int kernel, int stride_, int pad_, Rng& rng, T gain = T(2), bool with_bias = true)
      : stride(stride_), pad(pad_) {
    const T stddev = std::sqrt(gain / static_cast<T>(cin * kernel * kernel));
    weight = leaf(random_normal<T>(Shape{cout, cin, kernel, kernel}, rng, stddev), true);
    if (with_bias) bias = leaf(Tensor<T>(Shape{1, cout, 1, 1}), true);
  }

  int in_channels() const { return weight->shape().c; }
  int out_channels() const { return weight->shape().n; }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.params.push_back({prefix + ".weight", weight});
    if (bias) out.params.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct BatchNorm2d {
  Var<T> gamma;
  Var<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels)
      : gamma(leaf(Tensor<T>(Shape{1, channels, 1, 1}, T(1)), true)),
        beta(leaf(Tensor<T>(Shape{1, channels, 1, 1}), true)),
        running_mean(Shape{1, channels, 1, 1}),
        running_var(Shape{1, channels, 1, 1}, T(1)) {}

  Var<T> operator()(const Var<T>& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.params.push_back({prefix + ".gamma", gamma});
    out.params.push_back({prefix + ".beta", beta});
    out.buffers.push_back({prefix + ".running_mean", &running_mean});
    out.buffers.push_back({prefix + ".running_var", &running_var});
  }
};

}  // namespace dualharm
