// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "convstyle/param_store.hpp"

namespace convstyle {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moments per parameter and the shared step counter.
struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update over every parameter in `params`, then
/// zeroes the gradients.
inline void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg) {
  if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate))
    throw ConfigError("adam: learning rate must be a positive finite number");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
    throw ConfigError("adam: betas must lie in [0, 1)");
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, e] : params) {
    auto mit = state.m.try_emplace(name, e.value.shape()).first;
    auto vit = state.v.try_emplace(name, e.value.shape()).first;
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    require_same_shape(m, e.value, "adam moment");
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      e.value[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
  params.zero_grad();
}

}  // namespace convstyle
