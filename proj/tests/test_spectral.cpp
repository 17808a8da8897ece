#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "dualharm/naive_dft.hpp"
#include "dualharm/spectral.hpp"
#include "support_gradcheck.hpp"

using namespace dualharm;
using namespace dualharm::spectral;

namespace {

Tensor<double> cosine_along_width(int h, int w, int period) {
  Tensor<double> t(1, 1, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) t(0, 0, y, x) = std::cos(2 * std::numbers::pi * x / period);
  return t;
}

double max_diff(const HalfSpectrum<double>& a, const HalfSpectrum<double>& b) {
  return std::max(max_abs_diff(a.real, b.real), max_abs_diff(a.imag, b.imag));
}

}  // namespace

TEST_CASE("rfft2 of a constant map concentrates at DC", "[spectral]") {
  Tensor<double> x(1, 1, 4, 4, 5.0);
  auto s = rfft2(x);
  CHECK(s.real.w() == 3);
  CHECK(s.real(0, 0, 0, 0) == Catch::Approx(80.0));
  for (std::size_t i = 1; i < s.real.size(); ++i) {
    CHECK(std::abs(s.real[i]) < 1e-12);
    CHECK(std::abs(s.imag[i]) < 1e-12);
  }
}

TEST_CASE("rfft2 of zeros is zero", "[spectral]") {
  auto s = rfft2(Tensor<double>(1, 2, 8, 8));
  for (double v : s.real) CHECK(v == 0.0);
  for (double v : s.imag) CHECK(v == 0.0);
}

TEST_CASE("rfft2 of a width cosine has energy at bin (0, 1) only", "[spectral]") {
  auto s = rfft2(cosine_along_width(8, 8, 8));
  // 8 * 8 / 2 from the naive DFT of cos(2 pi x / 8).
  CHECK(std::hypot(s.real(0, 0, 0, 1), s.imag(0, 0, 0, 1)) == Catch::Approx(32.0).margin(1e-9));
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 5; ++v) {
      if (u == 0 && v == 1) continue;
      CHECK(std::hypot(s.real(0, 0, u, v), s.imag(0, 0, u, v)) < 1e-9);
    }
}

TEST_CASE("rfft2 rejects non-finite input", "[spectral]") {
  Tensor<double> x(1, 1, 4, 4);
  x(0, 0, 1, 2) = std::nan("");
  CHECK_THROWS_AS(rfft2(x), std::invalid_argument);
}

TEST_CASE("irfft2 inverts rfft2 for even and odd widths", "[spectral]") {
  std::mt19937_64 rng(7);
  for (int w : {1, 2, 7, 8, 12, 13, 31, 64}) {
    auto x = random_normal<double>(Shape{2, 4, 8, w}, rng);
    CHECK(max_abs_diff(irfft2(rfft2(x)), x) < 1e-12);
  }
  auto xf = random_normal<float>(Shape{1, 3, 16, 15}, rng);
  CHECK(max_abs_diff(irfft2(rfft2(xf)), xf) < 1e-4f);
}

TEST_CASE("irfft2 of a DC-only spectrum is constant", "[spectral]") {
  HalfSpectrum<double> s{Tensor<double>(1, 1, 4, 3), Tensor<double>(1, 1, 4, 3), 4};
  s.real(0, 0, 0, 0) = 4 * 4 * 2.5;
  auto x = irfft2(s);
  for (double v : x) CHECK(v == Catch::Approx(2.5));
  auto zero = irfft2(HalfSpectrum<double>{Tensor<double>(1, 1, 4, 3), Tensor<double>(1, 1, 4, 3), 4});
  for (double v : zero) CHECK(v == 0.0);
}

TEST_CASE("irfft2 rejects an inconsistent original width", "[spectral]") {
  HalfSpectrum<double> s{Tensor<double>(1, 1, 4, 3), Tensor<double>(1, 1, 4, 3), 8};
  CHECK_THROWS_AS(irfft2(s), std::invalid_argument);
  s.original_width = 0;
  CHECK_THROWS_AS(irfft2(s), std::invalid_argument);
}

TEST_CASE("pack and unpack", "[spectral]") {
  std::mt19937_64 rng(3);
  HalfSpectrum<double> s{random_normal<double>(Shape{1, 3, 8, 5}, rng), Tensor<double>(1, 3, 8, 5), 8};
  auto p = pack(s);
  CHECK(p.data.shape() == Shape{1, 6, 8, 5});
  for (int c = 3; c < 6; ++c)
    for (int i = 0; i < 40; ++i) CHECK(p.data.plane(0, c)[i] == 0.0);

  PackedSpectrum<double> random{random_normal<double>(Shape{2, 6, 8, 5}, rng), 9};
  CHECK(pack(unpack(random)).data == random.data);

  PackedSpectrum<double> odd{Tensor<double>(1, 5, 8, 5), 8};
  CHECK_THROWS_AS(unpack(odd), ShapeError);
}

TEST_CASE("full_fft2_packed shape, DC and Parseval", "[spectral]") {
  std::mt19937_64 rng(11);
  auto patch = random_normal<double>(Shape{1, 256, 8, 8}, rng);
  auto f = full_fft2_packed(patch);
  CHECK(f.shape() == Shape{1, 512, 8, 8});

  double energy_x = 0, energy_f = 0;
  for (double v : patch) energy_x += v * v;
  for (double v : f) energy_f += v * v;
  CHECK(std::abs(energy_f / 64.0 - energy_x) < 1e-6 * energy_x);

  auto c = full_fft2_packed(Tensor<double>(1, 1, 8, 8, 1.5));
  CHECK(c(0, 0, 0, 0) == Catch::Approx(96.0));
  for (int i = 1; i < 64; ++i) CHECK(std::abs(c.plane(0, 0)[i]) < 1e-12);
  for (int i = 0; i < 64; ++i) CHECK(std::abs(c.plane(0, 1)[i]) < 1e-12);

  CHECK_THROWS_AS(full_fft2_packed(Tensor<double>(1, 1, 8, 4)), ShapeError);
}

TEST_CASE("naive DFT agrees with the fast transforms", "[spectral][oracle]") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_normal<double>(Shape{1, 2, 8, 8}, rng);
    CHECK(max_diff(rfft2(x), naive_dft2(x)) < 1e-9);
  }
  for (int w : {12, 13}) {
    auto x = random_normal<double>(Shape{1, 1, 16, w}, rng);
    CHECK(max_diff(rfft2(x), naive_dft2(x)) < 1e-9);
  }
  auto sq = random_normal<double>(Shape{1, 3, 11, 11}, rng);
  CHECK(max_abs_diff(full_fft2_packed(sq), naive_dft2_full_packed(sq)) < 1e-9);

  auto zero = naive_dft2(Tensor<double>(1, 1, 4, 4));
  for (double v : zero.real) CHECK(v == 0.0);
  CHECK_THROWS_AS(naive_dft2(Tensor<double>(1, 1, 33, 8)), std::invalid_argument);
}

TEST_CASE("rfft2 is linear", "[spectral]") {
  std::mt19937_64 rng(5);
  auto f = random_normal<double>(Shape{1, 2, 8, 9}, rng);
  auto g = random_normal<double>(Shape{1, 2, 8, 9}, rng);
  Tensor<double> mix(f.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 2.5 * f[i] - 0.75 * g[i];
  auto sf = rfft2(f), sg = rfft2(g), sm = rfft2(mix);
  for (std::size_t i = 0; i < sm.real.size(); ++i) {
    CHECK(std::abs(sm.real[i] - (2.5 * sf.real[i] - 0.75 * sg.real[i])) < 1e-10);
    CHECK(std::abs(sm.imag[i] - (2.5 * sf.imag[i] - 0.75 * sg.imag[i])) < 1e-10);
  }
}

TEST_CASE("half spectrum of real input is conjugate symmetric on the DC column", "[spectral]") {
  std::mt19937_64 rng(9);
  auto s = rfft2(random_normal<double>(Shape{1, 1, 6, 8}, rng));
  for (int v : {0, 4})
    for (int u = 1; u < 6; ++u) {
      CHECK(s.real(0, 0, u, v) == Catch::Approx(s.real(0, 0, 6 - u, v)).margin(1e-12));
      CHECK(s.imag(0, 0, u, v) == Catch::Approx(-s.imag(0, 0, 6 - u, v)).margin(1e-12));
    }
}

TEST_CASE("log magnitude map", "[spectral]") {
  Tensor<double> gray(1, 3, 16, 16, 0.5);
  auto m = log_magnitude_map(gray);
  CHECK(m.data(0, 0, 8, 8) == Catch::Approx(std::log(1e-8 + 0.5 * 256)));
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      if (y != 8 || x != 8) CHECK(m.data(0, 0, y, x) < std::log(1e-8) + 1e-3);

  Tensor<double> stripes(1, 3, 32, 32);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) stripes(0, c, y, x) = 0.5 + 0.5 * std::cos(2 * std::numbers::pi * x / 8);
  auto sm = log_magnitude_map(stripes);
  // +-W/8 on the horizontal axis through the centre.
  CHECK(sm.data(0, 0, 16, 16 + 4) > 5.0);
  CHECK(sm.data(0, 0, 16, 16 - 4) > 5.0);
  CHECK(sm.data(0, 0, 20, 20) < 0.0);

  std::mt19937_64 rng(1);
  auto img = random_uniform<double>(Shape{1, 3, 10, 10}, rng);
  auto rm = log_magnitude_map(img);
  // 180 degree rotation about the centre bin maps (y, x) to (-y, -x) mod size.
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) {
      const int ry = (10 - y) % 10;
      const int rx = (10 - x) % 10;
      CHECK(rm.data(0, 0, y, x) == Catch::Approx(rm.data(0, 0, ry, rx)).margin(1e-9));
    }
}

TEST_CASE("spectral autograd ops match finite differences", "[spectral][grad]") {
  std::mt19937_64 rng(17);
  for (int w : {6, 7}) {
    auto x = leaf(random_normal<double>(Shape{1, 2, 5, w}, rng), true);
    auto proj = random_normal<double>(Shape{1, 4, 5, half_width(w)}, rng);
    auto proj_back = random_normal<double>(Shape{1, 2, 5, w}, rng);
    auto packed_in = leaf(random_normal<double>(Shape{1, 4, 5, half_width(w)}, rng), true);
    auto r1 = testing::grad_check([&] { return sum(mul(rfft2_packed(x), constant(proj))); }, {{"x", x}}, 100, 1);
    CHECK(r1.max_rel_error < 1e-6);
    auto r2 = testing::grad_check([&] { return sum(mul(irfft2_packed(packed_in, w), constant(proj_back))); },
                                  {{"packed", packed_in}}, 100, 2);
    CHECK(r2.max_rel_error < 1e-6);
  }
  auto p = leaf(random_normal<double>(Shape{2, 3, 4, 4}, rng), true);
  auto proj = random_normal<double>(Shape{2, 6, 4, 4}, rng);
  auto r3 = testing::grad_check([&] { return sum(mul(fft2_full_packed(p), constant(proj))); }, {{"p", p}}, 96, 3);
  CHECK(r3.max_rel_error < 1e-6);
}
