#pragma once

// Direct-summation DFT used as an independent reference for the FFT paths.
// Cost is O((h w)^2) per plane, so inputs are capped at 32 x 32.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "dualharm/spectral.hpp"

namespace dualharm::spectral {

inline constexpr int kNaiveDftMaxSide = 32;

namespace detail {

inline void require_small(const Shape& s) {
  if (s.h > kNaiveDftMaxSide || s.w > kNaiveDftMaxSide)
    throw std::invalid_argument("naive_dft2: input " + s.str() + " exceeds " + std::to_string(kNaiveDftMaxSide) +
                                "x" + std::to_string(kNaiveDftMaxSide));
}

// X[u, v] for one plane, accumulated in long double.
template <typename T>
void naive_bin(const T* plane, int h, int w, int u, int v, long double& re, long double& im) {
  re = 0;
  im = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      // Reduce the integer phase first so the angle stays in [0, 2 pi).
      const long double turns = static_cast<long double>((u * y) % h) / h + static_cast<long double>((v * x) % w) / w;
      const long double angle = -2.0L * std::numbers::pi_v<long double> * turns;
      const long double val = plane[y * w + x];
      re += val * std::cos(angle);
      im += val * std::sin(angle);
    }
}

}  // namespace detail

/// Half-width spectrum (width W/2 + 1) by direct summation.
template <typename T>
HalfSpectrum<T> naive_dft2(const Tensor<T>& feature) {
  const Shape s = feature.shape();
  detail::require_small(s);
  const int wf = half_width(s.w);
  HalfSpectrum<T> out{Tensor<T>(Shape{s.n, s.c, s.h, wf}), Tensor<T>(Shape{s.n, s.c, s.h, wf}), s.w};
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int u = 0; u < s.h; ++u)
        for (int v = 0; v < wf; ++v) {
          long double re, im;
          detail::naive_bin(feature.plane(n, c), s.h, s.w, u, v, re, im);
          out.real(n, c, u, v) = static_cast<T>(re);
          out.imag(n, c, u, v) = static_cast<T>(im);
        }
  return out;
}

/// Full spectrum by direct summation, packed as [re | im] channels.
template <typename T>
Tensor<T> naive_dft2_full_packed(const Tensor<T>& feature) {
  const Shape s = feature.shape();
  detail::require_small(s);
  Tensor<T> out(Shape{s.n, 2 * s.c, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int u = 0; u < s.h; ++u)
        for (int v = 0; v < s.w; ++v) {
          long double re, im;
          detail::naive_bin(feature.plane(n, c), s.h, s.w, u, v, re, im);
          out(n, c, u, v) = static_cast<T>(re);
          out(n, c + s.c, u, v) = static_cast<T>(im);
        }
  return out;
}

}  // namespace dualharm::spectral
