#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualharm/nn.hpp"

namespace dualharm {

struct AdamOptions {
  double learning_rate = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("learning rate must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("Adam betas must lie in [0, 1)");
    if (!(eps > 0)) throw std::invalid_argument("Adam eps must be positive");
  }
};

/// Adam with bias correction. Moments are keyed by position in the parameter
/// list, which is stable for a given network configuration.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(ParamList<T> params, AdamOptions options) : params_(std::move(params)), options_(options) {
    options_.validate();
    for (auto& p : params_.params) {
      m_.emplace_back(p.var->shape());
      v_.emplace_back(p.var->shape());
    }
  }

  /// Applies one update from the accumulated gradients. Parameters without a
  /// gradient are left untouched but still advance with the shared step count.
  void step() {
    ++steps_;
    const double b1 = options_.beta1, b2 = options_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    const double lr = options_.learning_rate;
    for (std::size_t k = 0; k < params_.params.size(); ++k) {
      auto& var = params_.params[k].var;
      if (!var->has_grad()) continue;
      T* w = var->value.data();
      const T* g = var->grad.data();
      T* m = m_[k].data();
      T* v = v_[k].data();
      for (std::size_t i = 0; i < var->value.size(); ++i) {
        m[i] = static_cast<T>(b1 * m[i] + (1 - b1) * g[i]);
        v[i] = static_cast<T>(b2 * v[i] + (1 - b2) * g[i] * g[i]);
        const double mh = m[i] / c1, vh = v[i] / c2;
        w[i] = static_cast<T>(w[i] - lr * mh / (std::sqrt(vh) + options_.eps));
      }
    }
  }

  void zero_grad() { params_.zero_grad(); }

  const ParamList<T>& params() const { return params_; }
  const AdamOptions& options() const { return options_; }
  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

 private:
  ParamList<T> params_;
  AdamOptions options_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t steps_ = 0;
};

}  // namespace dualharm
