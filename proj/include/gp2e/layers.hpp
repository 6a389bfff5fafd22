// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "gp2e/autodiff.hpp"

namespace gp2e {

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Standard normal via Box-Muller on uniform01.
inline double normal01(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

/// Named parameter tensors, ordered by name.
using ParamStore = std::map<std::string, Tensor>;

struct PointwiseLinearParams {
  Tensor weight;  // c_in x c_out
  Tensor bias;    // c_out
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
  double epsilon = kLayerNormEpsilon;
};

/// One entry of an initialization plan.
struct ParamSpec {
  enum class Init { FanInUniform, Zeros, Ones };
  std::string name;
  Shape shape;
  Init init = Init::FanInUniform;
  std::size_t fan_in = 1;
};

using ParamPlan = std::vector<ParamSpec>;

/// Draws every parameter in plan order: fan-in uniform weights with bound
/// sqrt(1/fan_in), zero biases/betas, unit gammas.
inline ParamStore init_params(std::uint64_t seed, const ParamPlan& plan) {
  std::mt19937_64 rng(seed);
  ParamStore store;
  for (const auto& spec : plan) {
    Tensor t(spec.shape);
    switch (spec.init) {
      case ParamSpec::Init::Zeros:
        break;
      case ParamSpec::Init::Ones:
        for (double& v : t.data()) v = 1.0;
        break;
      case ParamSpec::Init::FanInUniform: {
        const double bound = std::sqrt(1.0 / static_cast<double>(spec.fan_in));
        for (double& v : t.data()) v = uniform(rng, -bound, bound);
        break;
      }
    }
    if (!store.emplace(spec.name, std::move(t)).second) throw ContractError("duplicate parameter " + spec.name);
  }
  return store;
}

/// Per-point affine map x.W + b.
inline Var pointwise_linear(Var x, Var weight, Var bias) {
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  require_rank2(X, "pointwise_linear");
  require_rank2(W, "pointwise_linear");
  if (X.dim(1) != W.dim(0)) {
    throw DimensionError("pointwise_linear: input has " + std::to_string(X.dim(1)) + " channels, layer expects " +
                         std::to_string(W.dim(0)));
  }
  return add_row(matmul(x, weight), bias);
}

/// Normalizes each row (point) across its channels, then scales and shifts.
inline Var layer_norm(Var x, Var gamma, Var beta, double epsilon = kLayerNormEpsilon) {
  const Tensor& X = x.value();
  require_rank2(X, "layer_norm");
  const std::size_t n = X.dim(0), c = X.dim(1);
  if (c == 0) throw DimensionError("layer_norm: zero channels");
  if (gamma.value().shape() != Shape{c} || beta.value().shape() != Shape{c}) {
    throw DimensionError("layer_norm: gamma/beta must have " + std::to_string(c) + " entries");
  }
  if (!(epsilon > 0.0)) throw ContractError("layer_norm: epsilon must be positive");
  const Tensor& G = gamma.value();
  const Tensor& Bt = beta.value();

  Tensor xhat(X.shape());
  std::vector<double> inv_sigma(n);
  Tensor out(X.shape());
  for (std::size_t r = 0; r < n; ++r) {
    auto row = X.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    inv_sigma[r] = 1.0 / std::sqrt(var + epsilon);
    for (std::size_t k = 0; k < c; ++k) {
      xhat(r, k) = (row[k] - mean) * inv_sigma[r];
      out(r, k) = G[k] * xhat(r, k) + Bt[k];
    }
  }
  Tape* tape = x.tape;
  return tape->record(
      "layer_norm", {x, gamma, beta}, std::move(out),
      [tape, ig = gamma.id, n, c, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](
          const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
        const Tensor& G = tape->value(ig);
        std::vector<double> dxhat(c);
        for (std::size_t r = 0; r < n; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t k = 0; k < c; ++k) {
            dxhat[k] = g(r, k) * G[k];
            mean_d += dxhat[k];
            mean_dx += dxhat[k] * xhat(r, k);
            if (in[1]) (*in[1])[k] += g(r, k) * xhat(r, k);
            if (in[2]) (*in[2])[k] += g(r, k);
          }
          mean_d /= static_cast<double>(c);
          mean_dx /= static_cast<double>(c);
          if (in[0]) {
            for (std::size_t k = 0; k < c; ++k)
              (*in[0])(r, k) += inv_sigma[r] * (dxhat[k] - mean_d - xhat(r, k) * mean_dx);
          }
        }
      });
}

}  // namespace gp2e
