#pragma once

// Procedural stand-ins for photographs and paintings, used for desk-scale
// training and tests. Paintings are periodic textures; photos hold one
// smooth-shaded shape whose mask is returned alongside.

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dualharm/composite_data.hpp"
#include "dualharm/image.hpp"

namespace dualharm::synthetic {

using Rgb = std::array<double, 3>;

inline Rgb random_color(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 0.95);
  return {u(rng), u(rng), u(rng)};
}

/// Two oriented gratings mixed into a three-colour palette.
template <typename T = float>
Tensor<T> painting(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::array<int, 5> periods{8, 12, 16, 24, 32};
  std::uniform_int_distribution<int> pick(0, static_cast<int>(periods.size()) - 1);
  std::uniform_real_distribution<double> angle(0, std::numbers::pi);
  std::uniform_real_distribution<double> phase(0, 2 * std::numbers::pi);
  const double p1 = periods[pick(rng)], p2 = periods[pick(rng)];
  const double a1 = angle(rng), a2 = angle(rng), ph1 = phase(rng), ph2 = phase(rng);
  const Rgb c0 = random_color(rng), c1 = random_color(rng), c2 = random_color(rng);
  Tensor<T> img(1, 3, size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double g1 = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * (x * std::cos(a1) + y * std::sin(a1)) / p1 + ph1);
      const double g2 = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * (x * std::cos(a2) + y * std::sin(a2)) / p2 + ph2);
      for (int c = 0; c < 3; ++c) {
        const double v = c0[c] * (1 - g1) * (1 - g2) + c1[c] * g1 + c2[c] * g2 * (1 - g1);
        img(0, c, y, x) = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
    }
  return img;
}

template <typename T = float>
struct Photo {
  Tensor<T> image;
  Tensor<T> mask;
};

/// A gradient backdrop with one ellipse or rectangle. The shape's area is
/// drawn so its ratio to the frame spans roughly [0.02, 0.4].
template <typename T = float>
Photo<T> photo(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  const double target_ratio = 0.02 + 0.38 * u(rng);
  const double aspect = 0.6 + 0.8 * u(rng);
  const bool ellipse = u(rng) < 0.5;
  const double area = target_ratio * size * size;
  // Ellipse area = pi a b; rectangle area = 4 a b.
  const double ab = ellipse ? area / std::numbers::pi : area / 4;
  const double ry = std::min(std::sqrt(ab * aspect), 0.49 * size);
  const double rx = std::min(std::sqrt(ab / aspect), 0.49 * size);
  const double cy = ry + (size - 2 * ry) * u(rng);
  const double cx = rx + (size - 2 * rx) * u(rng);
  const Rgb bg0 = random_color(rng), bg1 = random_color(rng), fg0 = random_color(rng), fg1 = random_color(rng);
  std::normal_distribution<double> noise(0, 0.02);

  Photo<T> out{Tensor<T>(1, 3, size, size), Tensor<T>(1, 1, size, size)};
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
      const bool inside = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
      out.mask(0, 0, y, x) = inside ? T(1) : T(0);
      const double t = static_cast<double>(y) / std::max(1, size - 1);
      const double shade = inside ? 0.5 + 0.5 * std::clamp(-dx * 0.5 - dy * 0.5, -1.0, 1.0) : t;
      for (int c = 0; c < 3; ++c) {
        const double v = inside ? fg0[c] * (1 - shade) + fg1[c] * shade : bg0[c] * (1 - t) + bg1[c] * t;
        out.image(0, c, y, x) = static_cast<T>(std::clamp(v + noise(rng), 0.0, 1.0));
      }
    }
  return out;
}

/// Writes `count` photos (with `_mask` partners) and `count` paintings under
/// dir/photos and dir/paintings.
inline void write_corpus(const std::filesystem::path& dir, int count, int size, std::uint64_t seed) {
  std::filesystem::create_directories(dir / "photos");
  std::filesystem::create_directories(dir / "paintings");
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05d", i);
    auto p = photo<float>(size, data::mix_seed(seed, 2 * static_cast<std::uint64_t>(i)));
    write_png(dir / "photos" / (std::string(name) + ".png"), p.image);
    write_png(dir / "photos" / (std::string(name) + "_mask.png"), p.mask);
    write_png(dir / "paintings" / (std::string(name) + ".png"),
              painting<float>(size, data::mix_seed(seed, 2 * static_cast<std::uint64_t>(i) + 1)));
  }
}

}  // namespace dualharm::synthetic
