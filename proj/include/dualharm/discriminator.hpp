#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualharm/autograd.hpp"
#include "dualharm/composite_data.hpp"
#include "dualharm/generator.hpp"
#include "dualharm/nn.hpp"
#include "dualharm/spectral.hpp"

namespace dualharm::disc {

using gen::scaled;

inline constexpr double kLeakySlope = 0.2;
inline constexpr int kSpatialBlocks = 6;

// ---------------------------------------------------------------------------
// Patch tiling.

/// (N, C, m, m) -> (N*n*n, C, m/n, m/n). Patches are ordered sample-major,
/// then by row i, then by column j.
template <typename T>
Var<T> patchify(const Var<T>& x, int n) {
  const Shape s = x->shape();
  if (n < 1) throw std::invalid_argument("split_patches: n must be positive");
  if (s.h != s.w) throw ShapeError("split_patches: square map required, got " + s.str());
  if (s.h % n) throw ShapeError("split_patches: side " + std::to_string(s.h) + " not divisible by n=" + std::to_string(n));
  const int p = s.h / n;
  const Shape os{s.n * n * n, s.c, p, p};
  auto index = [=](int b, int i, int j, int c, int y, int xx, std::size_t& src, std::size_t& dst) {
    src = ((static_cast<std::size_t>(b) * s.c + c) * s.h + (i * p + y)) * s.w + (j * p + xx);
    dst = ((static_cast<std::size_t>((b * n + i) * n + j) * s.c + c) * p + y) * p + xx;
  };
  Tensor<T> out(os);
  for (int b = 0; b < s.n; ++b)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int c = 0; c < s.c; ++c)
          for (int y = 0; y < p; ++y)
            for (int xx = 0; xx < p; ++xx) {
              std::size_t src, dst;
              index(b, i, j, c, y, xx, src, dst);
              out[dst] = x->value[src];
            }
  return make_node<T>(std::move(out), {x}, [x, s, n, p, index](Node<T>& self) {
    Tensor<T>& g = x->ensure_grad();
    for (int b = 0; b < s.n; ++b)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < p; ++y)
              for (int xx = 0; xx < p; ++xx) {
                std::size_t src, dst;
                index(b, i, j, c, y, xx, src, dst);
                g[src] += self.grad[dst];
              }
  });
}

/// Inverse of patchify: (N*n*n, C, p, p) -> (N, C, n*p, n*p).
template <typename T>
Var<T> unpatchify(const Var<T>& x, int n) {
  const Shape s = x->shape();
  if (n < 1 || s.n % (n * n)) throw ShapeError("unpatchify: batch " + std::to_string(s.n) + " is not a multiple of n*n");
  if (s.h != s.w) throw ShapeError("unpatchify: square patches required, got " + s.str());
  const int batch = s.n / (n * n), p = s.h, side = n * p;
  Tensor<T> out(Shape{batch, s.c, side, side});
  auto dst_index = [=](int b, int c, int y, int xx) {
    return ((static_cast<std::size_t>(b) * s.c + c) * side + y) * side + xx;
  };
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int c = 0; c < s.c; ++c)
          for (int y = 0; y < p; ++y)
            for (int xx = 0; xx < p; ++xx)
              out[dst_index(b, c, i * p + y, j * p + xx)] = x->value((b * n + i) * n + j, c, y, xx);
  return make_node<T>(std::move(out), {x}, [x, n, p, batch, dst_index](Node<T>& self) {
    Tensor<T>& g = x->ensure_grad();
    const int C = x->shape().c;
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          for (int c = 0; c < C; ++c)
            for (int y = 0; y < p; ++y)
              for (int xx = 0; xx < p; ++xx)
                g((b * n + i) * n + j, c, y, xx) += self.grad[dst_index(b, c, i * p + y, j * p + xx)];
  });
}

/// Value-level tiling of a single-sample map into an n x n grid (row-major).
template <typename T>
std::vector<Tensor<T>> split_patches(const Tensor<T>& map, int n) {
  if (map.n() != 1) throw ShapeError("split_patches: single sample expected, got " + map.shape().str());
  NoGradGuard guard;
  auto tiles = patchify(constant(map), n)->value;
  std::vector<Tensor<T>> out;
  const Shape ts{1, tiles.c(), tiles.h(), tiles.w()};
  for (int k = 0; k < n * n; ++k) {
    Tensor<T> t(ts);
    std::copy_n(tiles.plane(k, 0), ts.size(), t.data());
    out.push_back(std::move(t));
  }
  return out;
}

/// Inverse of split_patches; every cell must be present with a common shape.
template <typename T>
Tensor<T> reassemble_patches(const std::vector<Tensor<T>>& grid, int n) {
  if (static_cast<int>(grid.size()) != n * n)
    throw std::invalid_argument("assemble: expected " + std::to_string(n * n) + " cells, got " + std::to_string(grid.size()));
  Shape cell{};
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (grid[k].empty())
      throw std::invalid_argument("assemble: missing cell (" + std::to_string(k / n) + ", " + std::to_string(k % n) + ")");
    if (k == 0) cell = grid[k].shape();
    if (!(grid[k].shape() == cell)) throw ShapeError("assemble: cell shape " + grid[k].shape().str() + " vs " + cell.str());
  }
  Tensor<T> stacked(Shape{n * n, cell.c, cell.h, cell.w});
  for (int k = 0; k < n * n; ++k) std::copy_n(grid[k].data(), cell.size(), stacked.plane(k, 0));
  NoGradGuard guard;
  return unpatchify(constant(stacked), n)->value;
}

/// Places descriptor (i, j), each (1, c, 1, 1), at cell (i, j) of a (1, c, n, n) map.
template <typename T>
Tensor<T> assemble_freq_map(const std::vector<Tensor<T>>& descriptors, int n) {
  for (const auto& d : descriptors)
    if (!d.empty() && (d.h() != 1 || d.w() != 1)) throw ShapeError("assemble_freq_map: descriptor must be (1, c, 1, 1), got " + d.shape().str());
  return reassemble_patches(descriptors, n);
}

// ---------------------------------------------------------------------------
// Building blocks.

/// conv k4 s2 p1 -> BatchNorm -> LeakyReLU(0.2); halves the resolution.
template <typename T>
struct DownBlock {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  DownBlock() = default;
  template <typename Rng>
  DownBlock(int cin, int cout, Rng& rng) : conv(cin, cout, 4, 2, 1, rng), bn(cout) {}

  Var<T> operator()(const Var<T>& x, bool training) { return leaky_relu(bn(conv(x), training), T(kLeakySlope)); }

  void collect(const std::string& prefix, ParamList<T>& out) {
    conv.collect(prefix + ".conv", out);
    bn.collect(prefix + ".bn", out);
  }
};

/// conv3x3 s1 -> BatchNorm -> LeakyReLU(0.2) or ReLU; keeps the resolution.
template <typename T>
struct SameBlock {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;
  bool leaky = true;

  SameBlock() = default;
  template <typename Rng>
  SameBlock(int cin, int cout, bool leaky_, Rng& rng) : conv(cin, cout, 3, 1, 1, rng), bn(cout), leaky(leaky_) {}

  Var<T> operator()(const Var<T>& x, bool training) {
    auto y = bn(conv(x), training);
    return leaky ? leaky_relu(y, T(kLeakySlope)) : relu(y);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    conv.collect(prefix + ".conv", out);
    bn.collect(prefix + ".bn", out);
  }
};

// ---------------------------------------------------------------------------
// Discriminator.

struct DiscriminatorConfig {
  int n = 4;
  double width = 1.0;
  bool use_freq_branch = true;
  int tap_index = 3;
  std::uint64_t seed = 0;
};

template <typename T>
struct SpatialFeatures {
  Var<T> bottleneck;  // F_ds, (N, c_ds, n, n)
  Var<T> tapped;      // F_dm, (N, c_dm, m, m)
};

template <typename T>
class Discriminator {
 public:
  static constexpr std::array<int, kSpatialBlocks> kSpatialWidths{64, 128, 256, 512, 512, 512};
  static constexpr std::array<int, 3> kFreqWidths{256, 512, 512};

  Discriminator() = default;
  explicit Discriminator(const DiscriminatorConfig& config) : config_(config) {
    if (config.n != 2 && config.n != 4 && config.n != 8)
      throw std::invalid_argument("discriminator: n must be 2, 4 or 8, got " + std::to_string(config.n));
    if (config.tap_index < 1 || config.tap_index > 3)
      throw std::invalid_argument("discriminator: tap_index must be in 1..3, got " + std::to_string(config.tap_index));
    std::mt19937_64 rng(data::mix_seed(config.seed, 3));
    int cin = 3;
    for (int b = 0; b < kSpatialBlocks; ++b) {
      const int cout = scaled(kSpatialWidths[b], config.width);
      spatial_[b] = DownBlock<T>(cin, cout, rng);
      cin = cout;
    }
    const int c_ds = cin;
    const int c_dm = scaled(kSpatialWidths[config.tap_index - 1], config.width);
    c_df_ = scaled(256, config.width);
    int fin = 2 * c_dm;
    for (int b = 0; b < 3; ++b) {
      const int cout = scaled(kFreqWidths[b], config.width);
      freq_[b] = DownBlock<T>(fin, cout, rng);
      fin = cout;
    }
    // Fully connected layer over the flattened remaining spatial extent.
    const int remaining = patch_side() / 8;
    fc_ = Conv2d<T>(fin, c_df_, remaining, 1, 0, rng, T(1));
    const int hidden = scaled(256, config.width);
    const int head_in = c_ds + (config.use_freq_branch ? c_df_ : 0);
    head_[0] = SameBlock<T>(head_in, hidden, true, rng);
    head_[1] = SameBlock<T>(hidden, hidden, true, rng);
    head_[2] = SameBlock<T>(hidden, hidden, false, rng);
    head_[3] = SameBlock<T>(hidden, hidden, false, rng);
    out_ = Conv2d<T>(hidden, 1, 3, 1, 1, rng, T(1));
  }

  const DiscriminatorConfig& config() const { return config_; }
  int input_side() const { return 64 * config_.n; }
  int tapped_side() const { return input_side() >> config_.tap_index; }
  int patch_side() const { return tapped_side() / config_.n; }
  int descriptor_channels() const { return c_df_; }

  SpatialFeatures<T> spatial_branch(const Var<T>& image, bool training) {
    const Shape s = image->shape();
    if (s.c != 3 || s.h != input_side() || s.w != input_side())
      throw ShapeError("discriminator: input must be 3x" + std::to_string(input_side()) + "x" + std::to_string(input_side()) +
                       " (side = 64*n with n=" + std::to_string(config_.n) + "), got " + s.str());
    SpatialFeatures<T> out;
    Var<T> x = image;
    for (int b = 0; b < kSpatialBlocks; ++b) {
      x = spatial_[b](x, training);
      if (b + 1 == config_.tap_index) out.tapped = x;
    }
    out.bottleneck = x;
    return out;
  }

  /// Descriptors for a batch of square patches: (P, c_dm, p, p) -> (P, c_df, 1, 1).
  Var<T> freq_descriptor(const Var<T>& patches, bool training) {
    const Shape s = patches->shape();
    if (s.h != s.w) throw ShapeError("freq_descriptor: square patch required, got " + s.str());
    if (s.h % 8) throw ShapeError("freq_descriptor: patch side must be divisible by 8, got " + std::to_string(s.h));
    Var<T> x = spectral::fft2_full_packed(patches);
    for (auto& b : freq_) x = b(x, training);
    return fc_(x);
  }

  /// F_hat_df: (N, c_df, n, n).
  Var<T> freq_branch(const Var<T>& tapped, bool training) {
    const int n = config_.n;
    return unpatchify(freq_descriptor(patchify(tapped, n), training), n);
  }

  /// (N, 3, 64n, 64n) -> (N, 1, n, n) unbounded inharmony scores.
  Var<T> operator()(const Var<T>& image, bool training) {
    auto sp = spatial_branch(image, training);
    Var<T> x = sp.bottleneck;
    if (config_.use_freq_branch) x = concat_channels<T>({x, freq_branch(sp.tapped, training)});
    for (auto& b : head_) x = b(x, training);
    return out_(x);
  }

  ParamList<T> params() {
    ParamList<T> out;
    for (int b = 0; b < kSpatialBlocks; ++b) spatial_[b].collect("d.spatial." + std::to_string(b), out);
    if (config_.use_freq_branch) {
      for (int b = 0; b < 3; ++b) freq_[b].collect("d.freq." + std::to_string(b), out);
      fc_.collect("d.freq.fc", out);
    }
    for (int b = 0; b < 4; ++b) head_[b].collect("d.head." + std::to_string(b), out);
    out_.collect("d.head.out", out);
    return out;
  }

  /// Parameter groups for per-branch inspection.
  ParamList<T> spatial_params() {
    ParamList<T> out;
    for (int b = 0; b < kSpatialBlocks; ++b) spatial_[b].collect("d.spatial." + std::to_string(b), out);
    return out;
  }
  ParamList<T> freq_params() {
    ParamList<T> out;
    for (int b = 0; b < 3; ++b) freq_[b].collect("d.freq." + std::to_string(b), out);
    fc_.collect("d.freq.fc", out);
    return out;
  }
  ParamList<T> head_params() {
    ParamList<T> out;
    for (int b = 0; b < 4; ++b) head_[b].collect("d.head." + std::to_string(b), out);
    out_.collect("d.head.out", out);
    return out;
  }

 private:
  DiscriminatorConfig config_;
  std::array<DownBlock<T>, kSpatialBlocks> spatial_;
  std::array<DownBlock<T>, 3> freq_;
  Conv2d<T> fc_;
  std::array<SameBlock<T>, 4> head_;
  Conv2d<T> out_;
  int c_df_ = 0;
};

}  // namespace dualharm::disc
