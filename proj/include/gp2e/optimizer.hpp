// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>

#include "gp2e/layers.hpp"

namespace gp2e {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  ParamStore m;
  ParamStore v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const ParamStore& params) {
    AdamState s;
    for (const auto& [name, p] : params) {
      s.m.emplace(name, Tensor(p.shape()));
      s.v.emplace(name, Tensor(p.shape()));
    }
    return s;
  }
};

/// One bias-corrected Adam update of every parameter in place.
inline void adam_step(ParamStore& params, const GradMap& grads, AdamState& state, const AdamConfig& cfg) {
  for (const auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) throw ContractError("adam_step: no gradient for parameter '" + name + "'");
    if (g->second.shape() != p.shape())
      throw DimensionError("adam_step: gradient for '" + name + "' has shape " + shape_str(g->second.shape()) +
                           ", parameter has " + shape_str(p.shape()));
  }
  if (state.m.empty() && state.v.empty()) state = AdamState::zeros_like(params);
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      p[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
  }
}

}  // namespace gp2e
