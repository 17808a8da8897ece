#pragma once

// Central finite-difference comparison for the autograd graph (tests only).

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dualharm/autograd.hpp"

namespace dualharm::testing {

struct GradCheckResult {
  double max_rel_error = 0;
  int checked = 0;
  std::string worst;
};

/// Compares analytic and numeric gradients of scalar `loss()` with respect to
/// up to `samples` randomly chosen entries of each listed variable. The
/// relative error is |a - n| / max(|a|, |n|); pairs where both are below
/// `abs_floor` count as agreeing.
inline GradCheckResult grad_check(const std::function<Var<double>()>& loss,
                                  const std::vector<std::pair<std::string, Var<double>>>& vars, int samples,
                                  std::uint64_t seed, double step = 1e-6, double abs_floor = 1e-7) {
  for (auto& [name, v] : vars) {
    v->requires_grad = true;
    v->zero_grad();
  }
  Var<double> root = loss();
  backward(root);
  std::vector<Tensor<double>> analytic;
  for (auto& [name, v] : vars) analytic.push_back(v->has_grad() ? v->grad : Tensor<double>(v->shape()));
  root.reset();

  GradCheckResult result;
  std::mt19937_64 rng(seed);
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < vars.size(); ++k) {
    auto& v = vars[k].second;
    std::uniform_int_distribution<std::size_t> pick(0, v->value.size() - 1);
    const int count = std::min<int>(samples, static_cast<int>(v->value.size()));
    for (int s = 0; s < count; ++s) {
      const std::size_t i = count == static_cast<int>(v->value.size()) ? static_cast<std::size_t>(s) : pick(rng);
      const double saved = v->value[i];
      v->value[i] = saved + step;
      const double up = loss()->value.item();
      v->value[i] = saved - step;
      const double down = loss()->value.item();
      v->value[i] = saved;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[k][i];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double rel = scale < abs_floor ? 0.0 : std::abs(a - numeric) / scale;
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = vars[k].first + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  return result;
}

}  // namespace dualharm::testing
