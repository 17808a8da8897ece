#pragma once

#include <algorithm>
#include <iostream>
#include <string>

#include "dualharm/generator.hpp"
#include "dualharm/image.hpp"

namespace dualharm::infer {

template <typename T>
struct Harmonized {
  Tensor<T> image;      // (1, 3, H, W) in [0, 1]
  Tensor<T> soft_mask;  // (1, 1, H, W)
  int pad_bottom = 0;
  int pad_right = 0;
};

/// Runs the generator on one composite. Sides that are not multiples of 8
/// are reflect-padded on the bottom/right and cropped back afterwards, unless
/// `strict_size` is set, in which case they are rejected.
template <typename T>
Harmonized<T> harmonize(const gen::Generator<T>& g, const Tensor<T>& composite, const Tensor<T>& background,
                        const Tensor<T>& mask, bool strict_size = false) {
  const Shape cs = composite.shape();
  if (mask.h() != cs.h || mask.w() != cs.w)
    throw ShapeError("mask is " + std::to_string(mask.h()) + "x" + std::to_string(mask.w()) + " but composite is " +
                     std::to_string(cs.h) + "x" + std::to_string(cs.w));
  if (background.h() != cs.h || background.w() != cs.w)
    throw ShapeError("background is " + std::to_string(background.h()) + "x" + std::to_string(background.w()) +
                     " but composite is " + std::to_string(cs.h) + "x" + std::to_string(cs.w));
  Harmonized<T> out;
  out.pad_bottom = (8 - cs.h % 8) % 8;
  out.pad_right = (8 - cs.w % 8) % 8;
  if ((out.pad_bottom || out.pad_right) && strict_size)
    throw ShapeError("image sides must be divisible by 8, got " + std::to_string(cs.h) + "x" + std::to_string(cs.w));
  auto pad = [&](const Tensor<T>& t) { return out.pad_bottom || out.pad_right ? reflect_pad(t, out.pad_bottom, out.pad_right) : t; };
  if (out.pad_bottom || out.pad_right)
    std::clog << "note: padding " << cs.h << "x" << cs.w << " to " << cs.h + out.pad_bottom << "x" << cs.w + out.pad_right
              << " and cropping the result\n";

  NoGradGuard no_grad;
  auto result = g.forward(pad(composite), pad(background), pad(mask));
  out.image = crop(result.harmonized->value, 0, 0, cs.h, cs.w);
  out.soft_mask = crop(result.soft_mask->value, 0, 0, cs.h, cs.w);
  for (auto& v : out.image) v = std::clamp(v, T(0), T(1));
  return out;
}

}  // namespace dualharm::infer
