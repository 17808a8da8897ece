#pragma once

#include <cmath>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dualharm/autograd.hpp"
#include "dualharm/composite_data.hpp"
#include "dualharm/generator.hpp"

namespace dualharm::loss {

struct LossWeights {
  double lambda_c = 2.0;
  double lambda_adv = 10.0;

  void validate() const {
    if (!(lambda_c >= 0) || !(lambda_adv >= 0)) throw std::invalid_argument("loss weights must be non-negative");
  }
};

/// Scalar values of one training step. `d_adv` is absent when the
/// discriminator is disabled.
struct LossReport {
  double style = 0;
  double content = 0;
  double g_adv = 0;
  std::optional<double> d_adv;
  double total_g = 0;
};

namespace detail {

template <typename T>
Var<T> per_sample(const Var<T>& v, int batch) {
  return scale(v, T(1) / static_cast<T>(batch));
}

}  // namespace detail

/// Sum over levels of the squared distance between masked statistics of the
/// harmonized features and whole-image statistics of the background features.
/// Works with any number of levels; averaged over the batch.
template <typename T>
Var<T> style_loss(const std::vector<Var<T>>& harmonized_feats, const std::vector<Var<T>>& background_feats,
                  const std::vector<Tensor<T>>& masks) {
  if (harmonized_feats.size() != background_feats.size() || harmonized_feats.size() != masks.size() || masks.empty())
    throw std::invalid_argument("style_loss: level counts differ");
  Var<T> total;
  for (std::size_t l = 0; l < masks.size(); ++l) {
    auto h = gen::masked_mean_std(harmonized_feats[l], masks[l]);
    if (h.any_empty()) std::clog << "warning: style loss level " << l + 1 << " has an empty mask; using fallback statistics\n";
    auto b = gen::masked_mean_std(background_feats[l]);
    auto term = add(squared_distance(h.mean, b.mean), squared_distance(h.std, b.std));
    total = total ? add(total, term) : term;
  }
  return detail::per_sample(total, harmonized_feats[0]->shape().n);
}

template <typename T>
Var<T> pyramid_style_loss(const gen::FeaturePyramid<T>& harmonized, const gen::FeaturePyramid<T>& background,
                  const std::array<Tensor<T>, gen::kLevels>& masks) {
  return style_loss<T>(std::vector<Var<T>>(harmonized.levels.begin(), harmonized.levels.end()),
                       std::vector<Var<T>>(background.levels.begin(), background.levels.end()),
                       std::vector<Tensor<T>>(masks.begin(), masks.end()));
}

/// Squared distance between bottleneck features; averaged over the batch.
template <typename T>
Var<T> content_loss(const Var<T>& harmonized_bottleneck, const Var<T>& composite_bottleneck) {
  return detail::per_sample(squared_distance(harmonized_bottleneck, composite_bottleneck), harmonized_bottleneck->shape().n);
}

/// Least-squares discriminator objective: harmonized and composite
/// predictions regress to the grid mask, background predictions to zero.
template <typename T>
Var<T> d_loss(const Var<T>& pred_harmonized, const Var<T>& pred_composite, const Var<T>& pred_background,
              const Tensor<T>& grid_mask) {
  const Shape s = pred_harmonized->shape();
  if (!(pred_composite->shape() == s) || !(pred_background->shape() == s) || !(grid_mask.shape() == s))
    throw ShapeError("d_loss: predictions " + s.str() + ", " + pred_composite->shape().str() + ", " +
                     pred_background->shape().str() + " vs mask " + grid_mask.shape().str());
  auto target = constant(grid_mask);
  auto total = add(add(squared_distance(pred_harmonized, target), squared_distance(pred_composite, target)),
                   sum_squares(pred_background));
  return detail::per_sample(total, s.n);
}

/// ||D(harmonized)||^2 averaged over the batch.
template <typename T>
Var<T> g_adv_loss(const Var<T>& pred_harmonized) {
  return detail::per_sample(sum_squares(pred_harmonized), pred_harmonized->shape().n);
}

template <typename T>
Var<T> total_g_loss(const Var<T>& style, const Var<T>& content, const Var<T>& g_adv, const LossWeights& w) {
  Var<T> total = add(style, scale(content, static_cast<T>(w.lambda_c)));
  if (g_adv) total = add(total, scale(g_adv, static_cast<T>(w.lambda_adv)));
  return total;
}

inline double total_g_loss(double style, double content, double g_adv, const LossWeights& w = {}) {
  return style + w.lambda_c * content + w.lambda_adv * g_adv;
}

}  // namespace dualharm::loss
