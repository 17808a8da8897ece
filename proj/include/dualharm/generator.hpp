#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "dualharm/autograd.hpp"
#include "dualharm/composite_data.hpp"
#include "dualharm/nn.hpp"
#include "dualharm/spectral.hpp"

namespace dualharm::gen {

inline constexpr int kLevels = 4;
inline constexpr std::array<int, kLevels> kBaseWidths{64, 128, 256, 512};

/// Channel count `base` scaled by the width multiplier (at least 1).
inline int scaled(int base, double width) {
  return std::max(1, static_cast<int>(std::lround(base * width)));
}

/// Encoder features at relu1_1, relu2_1, relu3_1 and relu4_1 (the bottleneck).
template <typename T>
struct FeaturePyramid {
  std::array<Var<T>, kLevels> levels;

  const Var<T>& operator[](int l) const { return levels.at(l); }
  Var<T>& operator[](int l) { return levels.at(l); }
};

// ---------------------------------------------------------------------------
// Masked channel statistics.

template <typename T>
struct MaskedStats {
  Var<T> mean;  // (N, C, 1, 1)
  Var<T> std;   // (N, C, 1, 1)
  std::vector<bool> empty;

  bool any_empty() const {
    for (bool e : empty)
      if (e) return true;
    return false;
  }
};

inline constexpr double kStatEpsilon = 1e-5;

/// Per-sample, per-channel mean and sqrt(var + 1e-5) over positions where
/// mask == 1 (the whole map when `mask` is empty). An empty mask yields the
/// fallback (mean 0, std 1) for that sample and sets its `empty` flag.
template <typename T>
MaskedStats<T> masked_mean_std(const Var<T>& feature, const Tensor<T>& mask = {}, T eps = T(kStatEpsilon)) {
  const Shape s = feature->shape();
  const bool full = mask.empty();
  if (!full) {
    const Shape ms = mask.shape();
    if (ms.c != 1 || ms.h != s.h || ms.w != s.w || (ms.n != s.n && ms.n != 1))
      throw ShapeError("masked_mean_std: mask " + ms.str() + " incompatible with feature " + s.str());
  }
  auto mask_at = [&](int n) -> const T* { return full ? nullptr : mask.plane(mask.n() == 1 ? 0 : n, 0); };

  Tensor<T> mean(Shape{s.n, s.c, 1, 1}), stdev(Shape{s.n, s.c, 1, 1});
  std::vector<T> counts(s.n);
  MaskedStats<T> out;
  out.empty.assign(s.n, false);
  for (int n = 0; n < s.n; ++n) {
    const T* m = mask_at(n);
    T count = 0;
    if (m) {
      for (std::size_t i = 0; i < s.plane(); ++i) count += m[i];
    } else {
      count = static_cast<T>(s.plane());
    }
    counts[n] = count;
    if (count <= T(0)) {
      out.empty[n] = true;
      for (int c = 0; c < s.c; ++c) {
        mean(n, c, 0, 0) = T(0);
        stdev(n, c, 0, 0) = T(1);
      }
      continue;
    }
    for (int c = 0; c < s.c; ++c) {
      const T* f = feature->value.plane(n, c);
      T acc = 0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += m ? m[i] * f[i] : f[i];
      const T mu = acc / count;
      T var = 0;
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const T d = f[i] - mu;
        var += m ? m[i] * d * d : d * d;
      }
      mean(n, c, 0, 0) = mu;
      stdev(n, c, 0, 0) = std::sqrt(var / count + eps);
    }
  }

  out.mean = make_node<T>(mean, {feature}, [feature, mask, counts](Node<T>& self) {
    const Shape s = feature->shape();
    Tensor<T>& g = feature->ensure_grad();
    for (int n = 0; n < s.n; ++n) {
      if (counts[n] <= T(0)) continue;
      const T* m = mask.empty() ? nullptr : mask.plane(mask.n() == 1 ? 0 : n, 0);
      for (int c = 0; c < s.c; ++c) {
        const T k = self.grad(n, c, 0, 0) / counts[n];
        T* gf = g.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) gf[i] += m ? k * m[i] : k;
      }
    }
  });
  out.std = make_node<T>(stdev, {feature}, [feature, mask, counts, mean](Node<T>& self) {
    const Shape s = feature->shape();
    Tensor<T>& g = feature->ensure_grad();
    for (int n = 0; n < s.n; ++n) {
      if (counts[n] <= T(0)) continue;
      const T* m = mask.empty() ? nullptr : mask.plane(mask.n() == 1 ? 0 : n, 0);
      for (int c = 0; c < s.c; ++c) {
        // d sigma / d f_i = m_i (f_i - mu) / (count * sigma)
        const T k = self.grad(n, c, 0, 0) / (counts[n] * self.value(n, c, 0, 0));
        const T mu = mean(n, c, 0, 0);
        const T* f = feature->value.plane(n, c);
        T* gf = g.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) gf[i] += (m ? m[i] : T(1)) * k * (f[i] - mu);
      }
    }
  });
  return out;
}

/// Masked AdaIN: inside the mask the composite features are renormalized from
/// their foreground statistics to the whole-image statistics of the
/// background features; outside the mask they pass through unchanged.
template <typename T>
Var<T> adain(const Var<T>& composite_feat, const Var<T>& background_feat, const Tensor<T>& mask) {
  const Shape cs = composite_feat->shape(), bs = background_feat->shape();
  if (cs.n != bs.n || cs.c != bs.c) throw ShapeError("adain: composite " + cs.str() + " vs background " + bs.str());
  if (mask.h() != cs.h || mask.w() != cs.w) throw ShapeError("adain: mask " + mask.shape().str() + " vs feature " + cs.str());
  auto fg = masked_mean_std(composite_feat, mask);
  auto bg = masked_mean_std(background_feat);
  if (fg.any_empty()) std::clog << "warning: adain received an empty mask; using fallback statistics\n";
  auto normalized = div(sub(composite_feat, fg.mean), fg.std);
  auto stylized = add(mul(normalized, bg.std), bg.mean);
  return where_mask(mask, stylized, composite_feat);
}

// ---------------------------------------------------------------------------
// Frozen encoder: the VGG-19 convolution stack up to relu4_1.

template <typename T>
class Encoder {
 public:
  static constexpr std::array<const char*, 10> kLayerNames{"conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1",
                                                           "conv3_2", "conv3_3", "conv3_4", "conv4_1", nullptr};

  Encoder() = default;
  Encoder(double width, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const int c1 = scaled(64, width), c2 = scaled(128, width), c3 = scaled(256, width), c4 = scaled(512, width);
    const std::array<std::pair<int, int>, 9> io{{{3, c1}, {c1, c1}, {c1, c2}, {c2, c2}, {c2, c3}, {c3, c3}, {c3, c3}, {c3, c3}, {c3, c4}}};
    for (std::size_t i = 0; i < io.size(); ++i) {
      convs_[i] = Conv2d<T>(io[i].first, io[i].second, 3, 1, 1, rng);
      convs_[i].weight->requires_grad = false;
      convs_[i].bias->requires_grad = false;
    }
  }

  /// Applies ImageNet mean/std normalization before the first layer; set when
  /// pretrained weights are loaded.
  bool imagenet_normalization = false;

  FeaturePyramid<T> operator()(const Var<T>& image) const {
    const Shape s = image->shape();
    if (s.c != 3) throw ShapeError("encode: expected an RGB image, got " + s.str());
    if (s.h % 8 || s.w % 8)
      throw ShapeError("encode: image sides must be divisible by 8, got " + std::to_string(s.h) + "x" + std::to_string(s.w));
    Var<T> x = image;
    if (imagenet_normalization) {
      Tensor<T> mean(Shape{1, 3, 1, 1}), stdev(Shape{1, 3, 1, 1});
      const std::array<T, 3> m{T(0.485), T(0.456), T(0.406)}, d{T(0.229), T(0.224), T(0.225)};
      for (int c = 0; c < 3; ++c) {
        mean[c] = m[c];
        stdev[c] = d[c];
      }
      x = div(sub(x, constant(mean)), constant(stdev));
    }
    FeaturePyramid<T> out;
    auto layer = [&](int i, const Var<T>& in) { return relu(convs_[i](in)); };
    x = layer(0, x);
    out[0] = x;
    x = max_pool2(layer(1, x));
    x = layer(2, x);
    out[1] = x;
    x = max_pool2(layer(3, x));
    x = layer(4, x);
    out[2] = x;
    x = layer(5, x);
    x = layer(6, x);
    x = max_pool2(layer(7, x));
    out[3] = layer(8, x);
    return out;
  }

  ParamList<T> params() const {
    ParamList<T> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(std::string("enc.") + kLayerNames[i], out);
    return out;
  }

  int channels(int level) const {
    static constexpr std::array<int, kLevels> last_conv{0, 2, 4, 8};
    return convs_[last_conv.at(level)].out_channels();
  }

 private:
  std::array<Conv2d<T>, 9> convs_;
};

// ---------------------------------------------------------------------------
// ResFFT: residual learning on the packed half spectrum.

template <typename T>
struct ResFftBlock {
  Conv2d<T> conv1;
  Conv2d<T> conv2;

  ResFftBlock() = default;
  template <typename Rng>
  ResFftBlock(int channels, Rng& rng)
      : conv1(2 * channels, 2 * channels, 3, 1, 1, rng), conv2(2 * channels, 2 * channels, 3, 1, 1, rng) {}

  /// packed + conv2(relu(instance_norm(conv1(packed)))).
  Var<T> operator()(const Var<T>& packed) const {
    return add(packed, conv2(relu(instance_norm(conv1(packed)))));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    conv1.collect(prefix + ".conv1", out);
    conv2.collect(prefix + ".conv2", out);
  }
};

/// rfft2 -> pack -> residual blocks -> unpack -> irfft2.
template <typename T>
Var<T> resfft(const Var<T>& feature, const std::vector<ResFftBlock<T>>& blocks) {
  Var<T> spec = spectral::rfft2_packed(feature);
  for (const auto& b : blocks) spec = b(spec);
  return spectral::irfft2_packed(spec, feature->shape().w);
}

// ---------------------------------------------------------------------------
// Decoder and blending layer.

template <typename T>
struct DecoderOutput {
  Var<T> image;     // I_o, (N, 3, H, W) in (0, 1)
  Var<T> features;  // last decoder feature map at full resolution
};

/// Bottleneck features enter at 1/8 scale; each stage upsamples by 2,
/// concatenates the matching skip features and applies conv3x3 + ReLU.
template <typename T>
class Decoder {
 public:
  Decoder() = default;
  template <typename Rng>
  Decoder(const std::array<int, kLevels>& c, Rng& rng)
      : bottleneck_(c[3], c[2], 3, 1, 1, rng),
        up3_(2 * c[2], c[1], 3, 1, 1, rng),
        up2_(2 * c[1], c[0], 3, 1, 1, rng),
        up1_(2 * c[0], c[0], 3, 1, 1, rng),
        out_(c[0], 3, 3, 1, 1, rng, T(1)) {}

  DecoderOutput<T> operator()(const FeaturePyramid<T>& f) const {
    for (int l = 0; l < kLevels; ++l)
      if (!f[l]) throw std::invalid_argument("decode: missing pyramid level " + std::to_string(l + 1));
    Var<T> x = relu(bottleneck_(f[3]));
    x = relu(up3_(concat_channels<T>({upsample_nearest(x), f[2]})));
    x = relu(up2_(concat_channels<T>({upsample_nearest(x), f[1]})));
    x = relu(up1_(concat_channels<T>({upsample_nearest(x), f[0]})));
    return {sigmoid(out_(x)), x};
  }

  Conv2d<T>& output_layer() { return out_; }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    bottleneck_.collect(prefix + ".bottleneck", out);
    up3_.collect(prefix + ".up3", out);
    up2_.collect(prefix + ".up2", out);
    up1_.collect(prefix + ".up1", out);
    out_.collect(prefix + ".out", out);
  }

 private:
  Conv2d<T> bottleneck_, up3_, up2_, up1_, out_;
};

/// conv3x3 over [decoder features, M] then sigmoid. Starts from zero weights
/// and bias +2 so the initial soft mask is sigmoid(2) everywhere.
template <typename T>
class BlendLayer {
 public:
  static constexpr double kInitialBias = 2.0;

  BlendLayer() = default;
  template <typename Rng>
  BlendLayer(int feature_channels, Rng& rng) : conv_(feature_channels + 1, 1, 3, 1, 1, rng) {
    conv_.weight->value.fill(T(0));
    conv_.bias->value.fill(T(kInitialBias));
  }

  Var<T> operator()(const Var<T>& decoder_features, const Tensor<T>& mask) const {
    const Shape fs = decoder_features->shape();
    if (mask.h() != fs.h || mask.w() != fs.w || mask.n() != fs.n)
      throw ShapeError("blend_mask: mask " + mask.shape().str() + " vs features " + fs.str());
    return sigmoid(conv_(concat_channels<T>({decoder_features, constant(mask)})));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const { conv_.collect(prefix, out); }

 private:
  Conv2d<T> conv_;
};

/// I_o * M~ + I_c * (1 - M~).
template <typename T>
Var<T> blend(const Var<T>& coarse, const Var<T>& composite, const Var<T>& soft_mask) {
  if (!(coarse->shape() == composite->shape()))
    throw ShapeError("blend: coarse " + coarse->shape().str() + " vs composite " + composite->shape().str());
  const Shape ms = soft_mask->shape();
  if (ms.n != coarse->shape().n || ms.c != 1 || ms.h != coarse->shape().h || ms.w != coarse->shape().w)
    throw ShapeError("blend: soft mask " + ms.str() + " vs image " + coarse->shape().str());
  return add(mul(coarse, soft_mask), mul(composite, rsub_scalar(T(1), soft_mask)));
}

// ---------------------------------------------------------------------------
// Full generator.

struct GeneratorConfig {
  double width = 1.0;
  int resfft_blocks = 1;
  bool use_resfft = true;
  std::uint64_t seed = 0;
};

template <typename T>
struct GeneratorOutput {
  Var<T> harmonized;  // blended result
  Var<T> soft_mask;
  Var<T> coarse;      // decoder output before blending
  FeaturePyramid<T> composite_features;
  FeaturePyramid<T> background_features;
  FeaturePyramid<T> harmonized_features;  // per-level AdaIN (+ ResFFT) outputs
  std::array<Tensor<T>, kLevels> masks;   // downsampled masks per level
};

template <typename T>
class Generator {
 public:
  Generator() = default;
  explicit Generator(const GeneratorConfig& config) : config_(config) {
    encoder_ = Encoder<T>(config.width, data::mix_seed(config.seed, 1));
    std::mt19937_64 rng(data::mix_seed(config.seed, 2));
    std::array<int, kLevels> c{};
    for (int l = 0; l < kLevels; ++l) c[l] = scaled(kBaseWidths[l], config.width);
    for (int l = 0; l < kLevels; ++l)
      for (int b = 0; b < config.resfft_blocks; ++b) resfft_[l].emplace_back(c[l], rng);
    decoder_ = Decoder<T>(c, rng);
    blend_ = BlendLayer<T>(c[0], rng);
  }

  const GeneratorConfig& config() const { return config_; }
  Encoder<T>& encoder() { return encoder_; }
  const Encoder<T>& encoder() const { return encoder_; }
  Decoder<T>& decoder() { return decoder_; }
  const std::vector<ResFftBlock<T>>& resfft_blocks(int level) const { return resfft_.at(level); }
  std::vector<ResFftBlock<T>>& resfft_blocks(int level) { return resfft_.at(level); }
  const BlendLayer<T>& blend_layer() const { return blend_; }

  FeaturePyramid<T> encode(const Tensor<T>& image) const { return encoder_(constant(image)); }

  /// AdaIN then (unless ablated) ResFFT at every level.
  FeaturePyramid<T> harmonize_features(const FeaturePyramid<T>& composite, const FeaturePyramid<T>& background,
                                       const std::array<Tensor<T>, kLevels>& masks) const {
    FeaturePyramid<T> out;
    for (int l = 0; l < kLevels; ++l) {
      out[l] = adain(composite[l], background[l], masks[l]);
      if (config_.use_resfft) out[l] = resfft(out[l], resfft_[l]);
    }
    return out;
  }

  GeneratorOutput<T> forward(const Tensor<T>& composite, const Tensor<T>& background, const Tensor<T>& mask) const {
    const Shape s = composite.shape();
    if (!(background.shape() == s)) throw ShapeError("harmonize: background " + background.shape().str() + " vs composite " + s.str());
    if (mask.n() != s.n || mask.c() != 1 || mask.h() != s.h || mask.w() != s.w)
      throw ShapeError("harmonize: mask " + mask.shape().str() + " vs composite " + s.str());
    GeneratorOutput<T> out;
    out.composite_features = encode(composite);
    out.background_features = encode(background);
    for (int l = 0; l < kLevels; ++l) out.masks[l] = data::downsample_mask(mask, l + 1);
    out.harmonized_features = harmonize_features(out.composite_features, out.background_features, out.masks);
    auto decoded = decoder_(out.harmonized_features);
    out.coarse = decoded.image;
    out.soft_mask = blend_(decoded.features, mask);
    out.harmonized = blend(out.coarse, constant(composite), out.soft_mask);
    return out;
  }

  /// Learnable parameters (the encoder is excluded; ResFFT only when enabled).
  ParamList<T> trainable() const {
    ParamList<T> out;
    if (config_.use_resfft)
      for (int l = 0; l < kLevels; ++l)
        for (std::size_t b = 0; b < resfft_[l].size(); ++b)
          resfft_[l][b].collect("g.resfft.l" + std::to_string(l + 1) + ".b" + std::to_string(b), out);
    decoder_.collect("g.decoder", out);
    blend_.collect("g.blend", out);
    return out;
  }

  /// Everything persisted in a checkpoint, including the frozen encoder.
  ParamList<T> all() const {
    ParamList<T> out = encoder_.params();
    out.append(trainable());
    return out;
  }

 private:
  GeneratorConfig config_;
  Encoder<T> encoder_;
  std::array<std::vector<ResFftBlock<T>>, kLevels> resfft_;
  Decoder<T> decoder_;
  BlendLayer<T> blend_;
};

}  // namespace dualharm::gen
