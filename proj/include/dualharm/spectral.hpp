#pragma once

#include <cmath>
#include <complex>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualharm/autograd.hpp"

namespace dualharm::spectral {

/// Unnormalized 1-D complex DFT of a fixed length. Powers of two use an
/// iterative radix-2 transform; other lengths go through Bluestein's chirp-z
/// reformulation on a power-of-two convolution.
template <typename T>
class FftPlan {
 public:
  using Complex = std::complex<T>;

  explicit FftPlan(int n) : n_(n) {
    if (n < 1) throw std::invalid_argument("FftPlan: length must be positive, got " + std::to_string(n));
    if (is_pow2(n)) {
      init_radix2(n, twiddle_, bitrev_);
      return;
    }
    int m = 1;
    while (m < 2 * n - 1) m <<= 1;
    conv_ = std::make_unique<FftPlan>(m);
    chirp_.resize(n);
    for (int k = 0; k < n; ++k) {
      // k^2 mod 2n keeps the phase argument small for large k.
      const long long k2 = (static_cast<long long>(k) * k) % (2LL * n);
      const double phase = -std::numbers::pi * static_cast<double>(k2) / n;
      chirp_[k] = Complex(static_cast<T>(std::cos(phase)), static_cast<T>(std::sin(phase)));
    }
    kernel_.assign(m, Complex(0));
    kernel_[0] = std::conj(chirp_[0]);
    for (int k = 1; k < n; ++k) kernel_[k] = kernel_[m - k] = std::conj(chirp_[k]);
    conv_->forward(kernel_.data());
  }

  int size() const { return n_; }

  void forward(Complex* data) const {
    if (!conv_) {
      radix2(data, false);
      return;
    }
    const int m = conv_->size();
    std::vector<Complex> buf(m, Complex(0));
    for (int k = 0; k < n_; ++k) buf[k] = data[k] * chirp_[k];
    conv_->forward(buf.data());
    for (int k = 0; k < m; ++k) buf[k] *= kernel_[k];
    conv_->inverse(buf.data());
    const T inv_m = T(1) / static_cast<T>(m);
    for (int k = 0; k < n_; ++k) data[k] = buf[k] * inv_m * chirp_[k];
  }

  /// Sign +1 transform, also unnormalized.
  void inverse(Complex* data) const {
    if (!conv_) {
      radix2(data, true);
      return;
    }
    for (int k = 0; k < n_; ++k) data[k] = std::conj(data[k]);
    forward(data);
    for (int k = 0; k < n_; ++k) data[k] = std::conj(data[k]);
  }

 private:
  static bool is_pow2(int n) { return (n & (n - 1)) == 0; }

  static void init_radix2(int n, std::vector<Complex>& tw, std::vector<int>& rev) {
    tw.resize(n / 2 > 0 ? n / 2 : 1);
    for (int k = 0; k < n / 2; ++k) {
      const double phase = -2.0 * std::numbers::pi * k / n;
      tw[k] = Complex(static_cast<T>(std::cos(phase)), static_cast<T>(std::sin(phase)));
    }
    rev.resize(n);
    int bits = 0;
    while ((1 << bits) < n) ++bits;
    for (int i = 0; i < n; ++i) {
      int r = 0;
      for (int b = 0; b < bits; ++b)
        if (i & (1 << b)) r |= 1 << (bits - 1 - b);
      rev[i] = r;
    }
  }

  void radix2(Complex* a, bool inverse) const {
    for (int i = 0; i < n_; ++i)
      if (i < bitrev_[i]) std::swap(a[i], a[bitrev_[i]]);
    for (int len = 2; len <= n_; len <<= 1) {
      const int half = len / 2;
      const int step = n_ / len;
      for (int start = 0; start < n_; start += len)
        for (int k = 0; k < half; ++k) {
          const Complex w = inverse ? std::conj(twiddle_[k * step]) : twiddle_[k * step];
          const Complex u = a[start + k];
          const Complex v = a[start + k + half] * w;
          a[start + k] = u + v;
          a[start + k + half] = u - v;
        }
    }
  }

  int n_;
  std::vector<Complex> twiddle_;
  std::vector<int> bitrev_;
  std::unique_ptr<FftPlan> conv_;
  std::vector<Complex> chirp_;
  std::vector<Complex> kernel_;
};

/// Plans for an h x w grid; transforms operate on row-major complex planes.
template <typename T>
class Fft2 {
 public:
  using Complex = std::complex<T>;

  Fft2(int h, int w) : h_(h), w_(w), rows_(w), cols_(h), column_(h) {}

  /// Transforms the first `width` columns along the height axis.
  void columns(Complex* plane, int stride, int width, bool inverse) {
    for (int v = 0; v < width; ++v) {
      for (int u = 0; u < h_; ++u) column_[u] = plane[static_cast<std::size_t>(u) * stride + v];
      inverse ? cols_.inverse(column_.data()) : cols_.forward(column_.data());
      for (int u = 0; u < h_; ++u) plane[static_cast<std::size_t>(u) * stride + v] = column_[u];
    }
  }
  void rows(Complex* plane, bool inverse) {
    for (int u = 0; u < h_; ++u) {
      Complex* row = plane + static_cast<std::size_t>(u) * w_;
      inverse ? rows_.inverse(row) : rows_.forward(row);
    }
  }
  void full(Complex* plane, bool inverse) {
    rows(plane, inverse);
    columns(plane, w_, w_, inverse);
  }

  int h() const { return h_; }
  int w() const { return w_; }

 private:
  int h_, w_;
  FftPlan<T> rows_, cols_;
  std::vector<Complex> column_;
};

inline int half_width(int w) { return w / 2 + 1; }

/// Non-redundant half of a real signal's 2-D spectrum along the width axis.
template <typename T>
struct HalfSpectrum {
  Tensor<T> real;
  Tensor<T> imag;
  int original_width = 0;

  void validate() const {
    if (!(real.shape() == imag.shape()))
      throw ShapeError("HalfSpectrum: real " + real.shape().str() + " vs imag " + imag.shape().str());
    if (original_width < 1 || half_width(original_width) != real.w())
      throw std::invalid_argument("HalfSpectrum: original_width " + std::to_string(original_width) +
                                  " inconsistent with stored width " + std::to_string(real.w()));
  }
};

/// Real parts in channels [0, C), imaginary parts in [C, 2C).
template <typename T>
struct PackedSpectrum {
  Tensor<T> data;
  int original_width = 0;
};

namespace detail {

template <typename T>
void require_finite(const Tensor<T>& x, const char* op) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]))
      throw std::invalid_argument(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
}

// Forward real-to-half transform of every (n, c) plane. Output planes are
// h x wf, stored into separate real/imag tensors.
template <typename T>
void rfft2_planes(const Tensor<T>& x, Tensor<T>& re, Tensor<T>& im) {
  const Shape s = x.shape();
  const int wf = half_width(s.w);
  re = Tensor<T>(Shape{s.n, s.c, s.h, wf});
  im = Tensor<T>(Shape{s.n, s.c, s.h, wf});
  Fft2<T> fft(s.h, s.w);
  std::vector<std::complex<T>> buf(s.plane());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* in = x.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) buf[i] = std::complex<T>(in[i], T(0));
      fft.rows(buf.data(), false);
      fft.columns(buf.data(), s.w, wf, false);
      T* r = re.plane(n, c);
      T* m = im.plane(n, c);
      for (int u = 0; u < s.h; ++u)
        for (int v = 0; v < wf; ++v) {
          const auto z = buf[static_cast<std::size_t>(u) * s.w + v];
          r[u * wf + v] = z.real();
          m[u * wf + v] = z.imag();
        }
    }
}

// Inverse of rfft2_planes with 1/(h w) normalization. Imaginary parts of the
// DC and Nyquist columns are ignored, matching the usual c2r convention.
template <typename T>
Tensor<T> irfft2_planes(const Tensor<T>& re, const Tensor<T>& im, int w) {
  const Shape s = re.shape();
  const int wf = s.w;
  Tensor<T> out(Shape{s.n, s.c, s.h, w});
  Fft2<T> fft(s.h, w);
  std::vector<std::complex<T>> buf(static_cast<std::size_t>(s.h) * w);
  const T norm = T(1) / static_cast<T>(static_cast<std::size_t>(s.h) * w);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* r = re.plane(n, c);
      const T* m = im.plane(n, c);
      for (int u = 0; u < s.h; ++u)
        for (int v = 0; v < wf; ++v) buf[static_cast<std::size_t>(u) * w + v] = {r[u * wf + v], m[u * wf + v]};
      fft.columns(buf.data(), w, wf, true);
      for (int u = 0; u < s.h; ++u) {
        std::complex<T>* row = buf.data() + static_cast<std::size_t>(u) * w;
        for (int v = wf; v < w; ++v) row[v] = std::conj(row[w - v]);
      }
      fft.rows(buf.data(), true);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < buf.size(); ++i) o[i] = buf[i].real() * norm;
    }
  return out;
}

// Re( sum_{u, v < wf} G[u, v] exp(+2 pi i (u y / h + v x / w)) ) for each
// plane: the adjoint of rfft2_planes.
template <typename T>
Tensor<T> rfft2_adjoint(const Tensor<T>& gre, const Tensor<T>& gim, int w) {
  const Shape s = gre.shape();
  const int wf = s.w;
  Tensor<T> out(Shape{s.n, s.c, s.h, w});
  Fft2<T> fft(s.h, w);
  std::vector<std::complex<T>> buf(static_cast<std::size_t>(s.h) * w);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      std::fill(buf.begin(), buf.end(), std::complex<T>(0));
      const T* r = gre.plane(n, c);
      const T* m = gim.plane(n, c);
      for (int u = 0; u < s.h; ++u)
        for (int v = 0; v < wf; ++v) buf[static_cast<std::size_t>(u) * w + v] = {r[u * wf + v], m[u * wf + v]};
      fft.columns(buf.data(), w, wf, true);
      fft.rows(buf.data(), true);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < buf.size(); ++i) o[i] = buf[i].real();
    }
  return out;
}

// Full complex 2-D transform of real planes, packed as [re | im] channels.
template <typename T>
Tensor<T> full_fft2_planes(const Tensor<T>& x) {
  const Shape s = x.shape();
  Tensor<T> out(Shape{s.n, 2 * s.c, s.h, s.w});
  Fft2<T> fft(s.h, s.w);
  std::vector<std::complex<T>> buf(s.plane());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* in = x.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) buf[i] = std::complex<T>(in[i], T(0));
      fft.full(buf.data(), false);
      T* r = out.plane(n, c);
      T* m = out.plane(n, c + s.c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        r[i] = buf[i].real();
        m[i] = buf[i].imag();
      }
    }
  return out;
}

}  // namespace detail

/// Forward 2-D real FFT of every (n, c) plane, unnormalized.
template <typename T>
HalfSpectrum<T> rfft2(const Tensor<T>& feature) {
  if (feature.h() < 1 || feature.w() < 1) throw ShapeError("rfft2: empty spatial extent " + feature.shape().str());
  detail::require_finite(feature, "rfft2");
  HalfSpectrum<T> out;
  detail::rfft2_planes(feature, out.real, out.imag);
  out.original_width = feature.w();
  return out;
}

/// Inverse of rfft2 (scaled by 1/(h w)); output width is original_width.
template <typename T>
Tensor<T> irfft2(const HalfSpectrum<T>& spectrum) {
  spectrum.validate();
  return detail::irfft2_planes(spectrum.real, spectrum.imag, spectrum.original_width);
}

template <typename T>
PackedSpectrum<T> pack(const HalfSpectrum<T>& spectrum) {
  spectrum.validate();
  const Shape s = spectrum.real.shape();
  PackedSpectrum<T> out{Tensor<T>(Shape{s.n, 2 * s.c, s.h, s.w}), spectrum.original_width};
  for (int n = 0; n < s.n; ++n) {
    std::copy_n(spectrum.real.plane(n, 0), s.plane() * s.c, out.data.plane(n, 0));
    std::copy_n(spectrum.imag.plane(n, 0), s.plane() * s.c, out.data.plane(n, s.c));
  }
  return out;
}

template <typename T>
HalfSpectrum<T> unpack(const PackedSpectrum<T>& packed) {
  const Shape s = packed.data.shape();
  if (s.c % 2 != 0) throw ShapeError("unpack: odd channel count in packed spectrum " + s.str());
  const int c = s.c / 2;
  HalfSpectrum<T> out{Tensor<T>(Shape{s.n, c, s.h, s.w}), Tensor<T>(Shape{s.n, c, s.h, s.w}), packed.original_width};
  for (int n = 0; n < s.n; ++n) {
    std::copy_n(packed.data.plane(n, 0), s.plane() * c, out.real.plane(n, 0));
    std::copy_n(packed.data.plane(n, c), s.plane() * c, out.imag.plane(n, 0));
  }
  out.validate();
  return out;
}

/// Full (unhalved) 2-D DFT of square planes, real/imag packed channel-wise.
template <typename T>
Tensor<T> full_fft2_packed(const Tensor<T>& feature) {
  if (feature.h() != feature.w()) throw ShapeError("full_fft2_packed: square input required, got " + feature.shape().str());
  detail::require_finite(feature, "full_fft2_packed");
  return detail::full_fft2_planes(feature);
}

// ---------------------------------------------------------------------------
// Differentiable forms used inside the networks.

/// rfft2 followed by pack: (N, C, H, W) -> (N, 2C, H, W/2 + 1).
template <typename T>
Var<T> rfft2_packed(const Var<T>& x) {
  const Shape s = x->shape();
  Tensor<T> re, im;
  detail::rfft2_planes(x->value, re, im);
  PackedSpectrum<T> packed = pack(HalfSpectrum<T>{std::move(re), std::move(im), s.w});
  return make_node<T>(std::move(packed.data), {x}, [x](Node<T>& self) {
    const Shape s = x->shape();
    const Shape hs{s.n, s.c, s.h, half_width(s.w)};
    Tensor<T> gre(hs), gim(hs);
    for (int n = 0; n < s.n; ++n) {
      std::copy_n(self.grad.plane(n, 0), hs.plane() * s.c, gre.plane(n, 0));
      std::copy_n(self.grad.plane(n, s.c), hs.plane() * s.c, gim.plane(n, 0));
    }
    x->ensure_grad() += detail::rfft2_adjoint(gre, gim, s.w);
  });
}

/// unpack followed by irfft2: (N, 2C, H, W/2 + 1) -> (N, C, H, width).
template <typename T>
Var<T> irfft2_packed(const Var<T>& packed, int width) {
  HalfSpectrum<T> half = unpack(PackedSpectrum<T>{packed->value, width});
  Tensor<T> out = detail::irfft2_planes(half.real, half.imag, width);
  return make_node<T>(std::move(out), {packed}, [packed, width](Node<T>& self) {
    // d/dY of the c2r inverse: (c_v / (h w)) * rfft2(g), with c_v = 1 on the
    // DC and Nyquist columns and 2 elsewhere.
    Tensor<T> re, im;
    detail::rfft2_planes(self.grad, re, im);
    const Shape hs = re.shape();
    const T norm = T(1) / static_cast<T>(static_cast<std::size_t>(hs.h) * width);
    Tensor<T>& g = packed->ensure_grad();
    for (int n = 0; n < hs.n; ++n)
      for (int c = 0; c < hs.c; ++c) {
        const T* r = re.plane(n, c);
        const T* m = im.plane(n, c);
        T* gr = g.plane(n, c);
        T* gi = g.plane(n, c + hs.c);
        for (int u = 0; u < hs.h; ++u)
          for (int v = 0; v < hs.w; ++v) {
            const bool edge = v == 0 || (width % 2 == 0 && v == width / 2);
            const T k = (edge ? T(1) : T(2)) * norm;
            gr[u * hs.w + v] += k * r[u * hs.w + v];
            gi[u * hs.w + v] += k * m[u * hs.w + v];
          }
      }
  });
}

/// Differentiable full_fft2_packed.
template <typename T>
Var<T> fft2_full_packed(const Var<T>& x) {
  if (x->shape().h != x->shape().w) throw ShapeError("fft2_full_packed: square input required, got " + x->shape().str());
  return make_node<T>(detail::full_fft2_planes(x->value), {x}, [x](Node<T>& self) {
    const Shape s = x->shape();
    Fft2<T> fft(s.h, s.w);
    std::vector<std::complex<T>> buf(s.plane());
    Tensor<T>& gx = x->ensure_grad();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* r = self.grad.plane(n, c);
        const T* m = self.grad.plane(n, c + s.c);
        for (std::size_t i = 0; i < s.plane(); ++i) buf[i] = {r[i], m[i]};
        fft.full(buf.data(), true);
        T* g = gx.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) g[i] += buf[i].real();
      }
  });
}

// ---------------------------------------------------------------------------
// Frequency maps for inspection.

/// Centered log-magnitude spectrum, shape (1, 1, H, W).
template <typename T>
struct FrequencyMap {
  Tensor<T> data;
};

inline constexpr double kLogEpsilon = 1e-8;

/// log(eps + |FFT|) of the image luminance (0.299 R + 0.587 G + 0.114 B),
/// with the zero frequency moved to (H/2, W/2). Uses the first sample.
template <typename T>
FrequencyMap<T> log_magnitude_map(const Tensor<T>& image) {
  const Shape s = image.shape();
  if (s.c != 3 && s.c != 1) throw ShapeError("log_magnitude_map: expected 1 or 3 channels, got " + s.str());
  Fft2<T> fft(s.h, s.w);
  std::vector<std::complex<T>> buf(s.plane());
  for (std::size_t i = 0; i < s.plane(); ++i) {
    const T y = s.c == 3 ? T(0.299) * image.plane(0, 0)[i] + T(0.587) * image.plane(0, 1)[i] +
                               T(0.114) * image.plane(0, 2)[i]
                         : image.plane(0, 0)[i];
    buf[i] = {y, T(0)};
  }
  fft.full(buf.data(), false);
  FrequencyMap<T> out{Tensor<T>(Shape{1, 1, s.h, s.w})};
  for (int u = 0; u < s.h; ++u)
    for (int v = 0; v < s.w; ++v) {
      const int su = (u + s.h / 2) % s.h;
      const int sv = (v + s.w / 2) % s.w;
      out.data(0, 0, su, sv) =
          static_cast<T>(std::log(kLogEpsilon + static_cast<double>(std::abs(buf[static_cast<std::size_t>(u) * s.w + v]))));
    }
  return out;
}

}  // namespace dualharm::spectral
