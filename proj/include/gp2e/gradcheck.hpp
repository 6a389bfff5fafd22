// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "gp2e/autodiff.hpp"
#include "gp2e/layers.hpp"
#include "gp2e/policy.hpp"

namespace gp2e {

struct GradCheckOptions {
  std::size_t instances = 20;
  double h = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 7;
  PolicyConfig network;            // n_points is overridden by network_points
  std::size_t network_points = 8;
  std::size_t samples_per_tensor = 12;  // probed entries per parameter tensor in the full-network check
};

struct GradCheckResult {
  std::string op;
  std::string input;
  double max_rel_error = 0.0;
  std::size_t instances = 0;
  std::size_t probes = 0;      // finite-difference comparisons actually made
  std::size_t kink_skips = 0;
  std::size_t resolution_skips = 0;  // entries too small for a 1e-4 relative check at this h  // probes whose +h and -h evaluations took different relu/max branches
};

struct GradCheckReport {
  std::vector<GradCheckResult> results;
  std::size_t similarity_matrices_per_forward = 0;

  double worst() const {
    double w = 0.0;
    for (const auto& r : results) w = std::max(w, r.max_rel_error);
    return w;
  }
  std::vector<GradCheckResult> offenders(double tol) const {
    std::vector<GradCheckResult> out;
    for (const auto& r : results)
      if (!(r.max_rel_error < tol)) out.push_back(r);
    return out;
  }
};

namespace detail {

/// Random tensor with entries bounded away from zero by `gap` (keeps relu and
/// max kinks outside the finite-difference stencil).
inline Tensor random_tensor(const Shape& s, std::mt19937_64& rng, double gap = 0.0) {
  Tensor t(s);
  for (double& v : t.data()) {
    do {
      v = normal01(rng);
    } while (std::abs(v) < gap);
  }
  return t;
}

using OpBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;
using InputMaker = std::function<std::vector<Tensor>(std::mt19937_64&)>;

/// Checks d/d(inputs) of sum(op(inputs) * R) against central differences.
inline void check_op(GradCheckReport& report, const std::string& name, const InputMaker& make,
                     const OpBuilder& build, const GradCheckOptions& opt, std::mt19937_64& rng) {
  std::vector<GradCheckResult> per_input;
  for (std::size_t inst = 0; inst < opt.instances; ++inst) {
    std::vector<Tensor> inputs = make(rng);
    Tensor weights;
    {
      Tape probe(false);
      std::vector<Var> vs;
      for (std::size_t i = 0; i < inputs.size(); ++i) vs.push_back(probe.constant(inputs[i]));
      weights = random_tensor(build(probe, vs).value().shape(), rng);
    }
    auto loss_of = [&](Tape& tape, const std::vector<Var>& vs) {
      Var out = build(tape, vs);
      return sum(mul(out, tape.constant(weights)));
    };
    Tape tape;
    std::vector<Var> vs;
    for (std::size_t i = 0; i < inputs.size(); ++i) vs.push_back(tape.parameter("in" + std::to_string(i), inputs[i]));
    GradMap grads = tape.backward(loss_of(tape, vs));
    if (per_input.empty()) per_input.resize(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      auto f = [&](const Tensor& xi) {
        Tape t(false);
        std::vector<Var> v;
        for (std::size_t j = 0; j < inputs.size(); ++j) v.push_back(t.constant(j == i ? xi : inputs[j]));
        return loss_of(t, v).value().item();
      };
      const Tensor numeric = finite_diff_grad(f, inputs[i], opt.h);
      const double err = max_relative_error(grads.at("in" + std::to_string(i)), numeric);
      per_input[i].op = name;
      per_input[i].input = "in" + std::to_string(i);
      per_input[i].max_rel_error = std::max(per_input[i].max_rel_error, err);
      per_input[i].instances = inst + 1;
      per_input[i].probes += numeric.size();
    }
  }
  report.results.insert(report.results.end(), per_input.begin(), per_input.end());
}

/// Random cloud whose rows are distinct and well separated in every column.
inline PointCloudObservation random_observation(std::size_t n, std::size_t robot_dim, std::mt19937_64& rng) {
  PointCloudObservation obs;
  obs.points = Tensor(Shape{n, kPointChannels});
  for (double& v : obs.points.data()) v = uniform(rng, -0.5, 0.5);
  obs.robot_state = Tensor(Shape{robot_dim});
  for (double& v : obs.robot_state.data()) v = uniform(rng, -0.5, 0.5);
  return obs;
}

}  // namespace detail

/// Full-network gradient check: MSE(forward(obs), target) against central
/// differences on a sample of entries from every parameter tensor.
inline void check_network(GradCheckReport& report, const GradCheckOptions& opt, std::mt19937_64& rng) {
  PolicyConfig cfg = opt.network;
  cfg.n_points = opt.network_points;
  std::map<std::string, GradCheckResult> per_param;
  for (std::size_t inst = 0; inst < opt.instances; ++inst) {
    ParamStore params = init_policy_params(rng(), cfg);
    // Perturb zero-initialised entries so every path carries signal.
    for (auto& [name, t] : params)
      for (double& v : t.data()) v += 0.05 * normal01(rng);
    const PointCloudObservation obs = detail::random_observation(cfg.n_points, cfg.robot_state_dim, rng);
    const Tensor target = detail::random_tensor(Shape{cfg.action_dim}, rng);

    auto loss_of = [&](Tape& tape, const BoundParams& bp) {
      Var a = forward(tape, obs, bp, cfg);
      Var diff = sub(a, tape.constant(target));
      return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(cfg.action_dim));
    };
    Tape tape;
    BoundParams bp(tape, params);
    Var loss = loss_of(tape, bp);
    const std::uint64_t base_sig = tape.branch_signature();
    report.similarity_matrices_per_forward = tape.count_pairwise_products(cfg.n_points);
    GradMap grads = tape.backward(loss);

    for (auto& [name, tensor] : params) {
      std::vector<std::size_t> order(tensor.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      // A probe whose stencil straddles a relu or max-pool switch measures a
      // jump, not a slope; such entries are skipped and the next one taken.
      std::vector<double> an, nu;
      std::size_t skips = 0, small = 0;
      for (std::size_t i : order) {
        if (an.size() == opt.samples_per_tensor) break;
        const double orig = tensor[i];
        auto eval = [&](double v, std::uint64_t& sig) {
          tensor[i] = v;
          Tape t(false);
          BoundParams b(t, params);
          const double out = loss_of(t, b).value().item();
          sig = t.branch_signature();
          return out;
        };
        std::uint64_t sp = 0, sm = 0;
        const double fp = eval(orig + opt.h, sp);
        const double fm = eval(orig - opt.h, sm);
        tensor[i] = orig;
        if (sp != sm || sp != base_sig) {
          ++skips;
          continue;
        }
        // Rounding noise of the central difference is about eps * |f| / h;
        // below 1e4 times that, a 1e-4 relative comparison measures noise.
        const double a = grads.at(name)[i], n = (fp - fm) / (2.0 * opt.h);
        const double floor = 1e4 * std::numeric_limits<double>::epsilon() * std::max(std::abs(fp), std::abs(fm)) / opt.h;
        if (std::max(std::abs(a), std::abs(n)) < floor) {
          ++small;
          continue;
        }
        an.push_back(a);
        nu.push_back(n);
      }
      Tensor analytic(Shape{an.size()}), numeric(Shape{nu.size()});
      std::copy(an.begin(), an.end(), analytic.data().begin());
      std::copy(nu.begin(), nu.end(), numeric.data().begin());
      auto& r = per_param[name];
      r.op = "network";
      r.input = name;
      if (!an.empty()) r.max_rel_error = std::max(r.max_rel_error, max_relative_error(analytic, numeric));
      r.kink_skips += skips;
      r.resolution_skips += small;
      r.probes += an.size();
      r.instances = inst + 1;
    }
  }
  for (auto& [name, r] : per_param) report.results.push_back(r);
}

/// Every differentiable op plus the full network.
inline GradCheckReport run_gradient_suite(const GradCheckOptions& opt = {}) {
  using detail::random_tensor;
  GradCheckReport report;
  std::mt19937_64 rng(opt.seed);
  auto shapes = [](std::vector<Shape> s, double gap = 0.0) {
    return [s, gap](std::mt19937_64& r) {
      std::vector<Tensor> out;
      for (const auto& sh : s) out.push_back(random_tensor(sh, r, gap));
      return out;
    };
  };
  auto& R = report;
  detail::check_op(R, "matmul", shapes({{5, 7}, {7, 4}}),
                   [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); }, opt, rng);
  detail::check_op(R, "matmul_nt", shapes({{5, 7}, {6, 7}}),
                   [](Tape&, const std::vector<Var>& v) { return matmul_nt(v[0], v[1]); }, opt, rng);
  detail::check_op(R, "add", shapes({{4, 3}, {4, 3}}),
                   [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); }, opt, rng);
  detail::check_op(R, "add_row", shapes({{4, 3}, {3}}),
                   [](Tape&, const std::vector<Var>& v) { return add_row(v[0], v[1]); }, opt, rng);
  detail::check_op(R, "mul", shapes({{4, 3}, {4, 3}}),
                   [](Tape&, const std::vector<Var>& v) { return mul(v[0], v[1]); }, opt, rng);
  detail::check_op(R, "scale", shapes({{4, 3}}),
                   [](Tape&, const std::vector<Var>& v) { return scale(v[0], -0.7); }, opt, rng);
  detail::check_op(R, "sum", shapes({{4, 3}}), [](Tape&, const std::vector<Var>& v) { return sum(v[0]); }, opt, rng);
  detail::check_op(R, "reshape", shapes({{4, 3}}),
                   [](Tape&, const std::vector<Var>& v) { return reshape(v[0], Shape{12}); }, opt, rng);
  detail::check_op(R, "concat_channels", shapes({{5, 2}, {5, 3}, {5, 1}}),
                   [](Tape&, const std::vector<Var>& v) { return concat_channels(v); }, opt, rng);
  detail::check_op(R, "concat_vectors", shapes({{3}, {2}}),
                   [](Tape&, const std::vector<Var>& v) { return concat_vectors(v); }, opt, rng);
  detail::check_op(R, "stack_rows", shapes({{3}, {3}, {3}}),
                   [](Tape&, const std::vector<Var>& v) { return stack_rows(v); }, opt, rng);
  detail::check_op(
      R, "reduce_max_points",
      [](std::mt19937_64& r) {
        // Distinct values per column, separated by far more than the stencil.
        Tensor t(Shape{6, 4});
        for (std::size_t k = 0; k < 4; ++k) {
          std::vector<double> col(6);
          for (std::size_t i = 0; i < 6; ++i) col[i] = 0.1 * static_cast<double>(i) + 0.01 * uniform01(r);
          std::shuffle(col.begin(), col.end(), r);
          for (std::size_t i = 0; i < 6; ++i) t(i, k) = col[i];
        }
        return std::vector<Tensor>{t};
      },
      [](Tape&, const std::vector<Var>& v) { return reduce_max_points(v[0]); }, opt, rng);
  detail::check_op(R, "relu", shapes({{5, 4}}, 1e-3), [](Tape&, const std::vector<Var>& v) { return relu(v[0]); },
                   opt, rng);
  detail::check_op(R, "softmax_rows", shapes({{4, 5}}),
                   [](Tape&, const std::vector<Var>& v) { return softmax_rows(v[0]); }, opt, rng);
  detail::check_op(
      R, "gather", shapes({{5}}),
      [](Tape&, const std::vector<Var>& v) { return gather(v[0], Shape{2, 3}, {0, 4, 4, 1, 2, 0}); }, opt, rng);
  detail::check_op(R, "pointwise_linear", shapes({{6, 5}, {5, 3}, {3}}),
                   [](Tape&, const std::vector<Var>& v) { return pointwise_linear(v[0], v[1], v[2]); }, opt, rng);
  detail::check_op(R, "layer_norm", shapes({{6, 5}, {5}, {5}}),
                   [](Tape&, const std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); }, opt, rng);
  check_network(R, opt, rng);
  return report;
}

}  // namespace gp2e
