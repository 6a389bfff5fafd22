// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gp2e/autodiff.hpp"
#include "gp2e/layers.hpp"
#include "gp2e/observation.hpp"

namespace gp2e {

/// Which encoder levels form the condensed feature C.
enum class CondensedMode {
  PaperText704,   // concat(P2, P3, P4): 64 + 128 + 512
  Eq2Literal198,  // concat(P1, P2, P3): 6 + 64 + 128
};

inline const char* to_string(CondensedMode m) {
  return m == CondensedMode::PaperText704 ? "PAPER_TEXT_704" : "EQ2_LITERAL_198";
}

inline CondensedMode condensed_mode_from_string(const std::string& s) {
  if (s == "PAPER_TEXT_704") return CondensedMode::PaperText704;
  if (s == "EQ2_LITERAL_198") return CondensedMode::Eq2Literal198;
  throw ContractError("unknown condensed_mode '" + s + "'");
}

struct PolicyConfig {
  std::size_t n_points = 1200;
  std::array<std::size_t, 3> channels{64, 128, 512};  // outputs of the three 1x1 stacks; input is 6
  CondensedMode condensed_mode = CondensedMode::PaperText704;
  std::size_t d_k = 512;
  std::size_t bias_buckets = 16;
  double bias_max_dist = 2.0;
  std::size_t robot_state_dim = kRobotStateDim;
  std::size_t action_dim = kActionDim;
  std::size_t head_hidden = 256;
  bool attention = true;  // false: ablation baseline, G is a pointwise projection of P4

  std::size_t condensed_channels() const {
    return condensed_mode == CondensedMode::PaperText704 ? channels[0] + channels[1] + channels[2]
                                                         : kPointChannels + channels[0] + channels[1];
  }
  std::size_t key_channels() const { return channels[2]; }
  std::size_t pooled_dim() const { return condensed_channels() + channels[2]; }

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) throw ContractError(std::string("policy config: ") + what + " must be positive");
    };
    positive(n_points, "n_points");
    for (auto c : channels) positive(c, "channel extent");
    positive(d_k, "d_k");
    positive(bias_buckets, "bias_buckets");
    positive(robot_state_dim, "robot_state_dim");
    positive(action_dim, "action_dim");
    positive(head_hidden, "head_hidden");
    if (!(bias_max_dist > 0.0)) throw ContractError("policy config: bias_max_dist must be positive");
  }

  /// Line-oriented key=value text, used inside checkpoints.
  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "n_points=" << n_points << '\n'
       << "channels=" << channels[0] << ',' << channels[1] << ',' << channels[2] << '\n'
       << "condensed_mode=" << to_string(condensed_mode) << '\n'
       << "d_k=" << d_k << '\n'
       << "bias_buckets=" << bias_buckets << '\n'
       << "bias_max_dist=" << bias_max_dist << '\n'
       << "robot_state_dim=" << robot_state_dim << '\n'
       << "action_dim=" << action_dim << '\n'
       << "head_hidden=" << head_hidden << '\n'
       << "attention=" << (attention ? 1 : 0) << '\n';
    return os.str();
  }

  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

/// Names of every trainable tensor, with initialization rules.
inline ParamPlan policy_param_plan(const PolicyConfig& cfg) {
  using Init = ParamSpec::Init;
  ParamPlan plan;
  std::size_t c_in = kPointChannels;
  for (int i = 0; i < 3; ++i) {
    const std::size_t c_out = cfg.channels[static_cast<std::size_t>(i)];
    const std::string l = std::to_string(i + 1);
    plan.push_back({"enc.phi" + l + ".weight", {c_in, c_out}, Init::FanInUniform, c_in});
    plan.push_back({"enc.phi" + l + ".bias", {c_out}, Init::Zeros, 1});
    plan.push_back({"enc.ln" + l + ".gamma", {c_out}, Init::Ones, 1});
    plan.push_back({"enc.ln" + l + ".beta", {c_out}, Init::Zeros, 1});
    c_in = c_out;
  }
  const std::size_t cc = cfg.condensed_channels();
  const std::size_t ck = cfg.key_channels();
  if (cfg.attention) {
    plan.push_back({"attn.w_q", {cc, cfg.d_k}, Init::FanInUniform, cc});
    if (ck != cfg.d_k) plan.push_back({"attn.w_k", {ck, cfg.d_k}, Init::FanInUniform, ck});
    plan.push_back({"attn.bias_table", {cfg.bias_buckets}, Init::Zeros, 1});
  } else {
    plan.push_back({"attn.w_g", {ck, cc}, Init::FanInUniform, ck});
  }
  const std::size_t head_in = cfg.pooled_dim() + cfg.robot_state_dim;
  plan.push_back({"head.fc1.weight", {head_in, cfg.head_hidden}, Init::FanInUniform, head_in});
  plan.push_back({"head.fc1.bias", {cfg.head_hidden}, Init::Zeros, 1});
  plan.push_back({"head.fc2.weight", {cfg.head_hidden, cfg.action_dim}, Init::FanInUniform, cfg.head_hidden});
  plan.push_back({"head.fc2.bias", {cfg.action_dim}, Init::Zeros, 1});
  return plan;
}

inline ParamStore init_policy_params(std::uint64_t seed, const PolicyConfig& cfg) {
  cfg.validate();
  return init_params(seed, policy_param_plan(cfg));
}

/// Parameters bound as leaves on one tape.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamStore& store) {
    for (const auto& [name, t] : store) vars_.emplace(name, tape.parameter(name, t));
  }
  Var operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ContractError("missing parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

 private:
  std::map<std::string, Var> vars_;
};

struct EncoderOutputs {
  Var p1, p2, p3, p4, c;
};

struct AttentionArtifacts {
  Var q, k, v, b, weights, g;
};

/// P_{i+1} = relu(layer_norm(phi_i(P_i))) for the three stacks, then C per condensed mode.
inline EncoderOutputs encode(Var cloud, const BoundParams& p, const PolicyConfig& cfg) {
  const Tensor& x = cloud.value();
  require_rank2(x, "encode");
  if (x.dim(1) != kPointChannels) {
    throw DimensionError("encode: cloud has " + std::to_string(x.dim(1)) + " channels, expected 6");
  }
  if (x.dim(0) != cfg.n_points) {
    throw DimensionError("encode: cloud has " + std::to_string(x.dim(0)) + " points, config expects " +
                         std::to_string(cfg.n_points));
  }
  EncoderOutputs e;
  e.p1 = cloud;
  Var* outs[3] = {&e.p2, &e.p3, &e.p4};
  Var cur = cloud;
  for (int i = 0; i < 3; ++i) {
    const std::string l = std::to_string(i + 1);
    cur = relu(layer_norm(pointwise_linear(cur, p["enc.phi" + l + ".weight"], p["enc.phi" + l + ".bias"]),
                          p["enc.ln" + l + ".gamma"], p["enc.ln" + l + ".beta"]));
    *outs[i] = cur;
  }
  e.c = cfg.condensed_mode == CondensedMode::PaperText704 ? concat_channels({e.p2, e.p3, e.p4})
                                                          : concat_channels({e.p1, e.p2, e.p3});
  return e;
}

/// Bucket index of every pairwise distance; row-major N x N.
inline std::vector<std::size_t> distance_buckets(const Tensor& xyz, const PolicyConfig& cfg) {
  require_rank2(xyz, "pairwise_bias");
  if (xyz.dim(1) < 3) throw DimensionError("pairwise_bias: positions need 3 columns");
  const std::size_t n = xyz.dim(0);
  std::vector<std::size_t> idx(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = xyz(i, 0) - xyz(j, 0);
      const double dy = xyz(i, 1) - xyz(j, 1);
      const double dz = xyz(i, 2) - xyz(j, 2);
      const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
      const double b = std::floor(d / cfg.bias_max_dist * static_cast<double>(cfg.bias_buckets));
      idx[i * n + j] = b >= static_cast<double>(cfg.bias_buckets - 1) ? cfg.bias_buckets - 1 : static_cast<std::size_t>(b);
    }
  }
  return idx;
}

/// B[i,j] = table[bucket(|xyz_i - xyz_j|)]; the table is learned.
inline Var pairwise_bias(const Tensor& xyz, Var bias_table, const PolicyConfig& cfg) {
  if (bias_table.value().shape() != Shape{cfg.bias_buckets}) {
    throw DimensionError("pairwise_bias: table has shape " + shape_str(bias_table.value().shape()));
  }
  const std::size_t n = xyz.dim(0);
  return gather(bias_table, Shape{n, n}, distance_buckets(xyz, cfg));
}

/// G = softmax(Q K^T / sqrt(d_k) + B) V with Q = C W_Q, K = P4 (projected only
/// when its width differs from d_k) and V = C.
inline AttentionArtifacts guided_attention(const EncoderOutputs& enc, const Tensor& xyz, const BoundParams& p,
                                           const PolicyConfig& cfg) {
  const std::size_t n = enc.c.value().dim(0);
  if (enc.c.value().dim(1) != cfg.condensed_channels() || enc.p4.value().dim(1) != cfg.key_channels()) {
    throw DimensionError("guided_attention: encoder outputs inconsistent with config");
  }
  if (xyz.rank() != 2 || xyz.dim(0) != n) throw DimensionError("guided_attention: positions do not match points");
  AttentionArtifacts a;
  a.q = matmul(enc.c, p["attn.w_q"]);
  a.k = cfg.key_channels() == cfg.d_k ? enc.p4 : matmul(enc.p4, p["attn.w_k"]);
  a.v = enc.c;
  a.b = pairwise_bias(xyz, p["attn.bias_table"], cfg);
  Var logits = add(scale(matmul_nt(a.q, a.k), 1.0 / std::sqrt(static_cast<double>(cfg.d_k))), a.b);
  a.weights = softmax_rows(logits);
  a.g = matmul(a.weights, a.v);
  return a;
}

/// Ablation stand-in for attention: G = P4 W_G, pointwise.
inline Var pointwise_baseline(const EncoderOutputs& enc, const BoundParams& p) {
  return matmul(enc.p4, p["attn.w_g"]);
}

/// Max over points of concat(G, P4).
inline Var pool_features(Var g, Var p4) {
  if (g.value().rank() != 2 || p4.value().rank() != 2 || g.value().dim(0) != p4.value().dim(0)) {
    throw DimensionError("pool_and_act: G " + shape_str(g.shape()) + " and P4 " + shape_str(p4.shape()) +
                         " must share point count");
  }
  return reduce_max_points(concat_channels({g, p4}));
}

/// Two-layer perceptron on concat(pooled, robot_state) with a linear output.
inline Var action_head(Var pooled, Var robot_state, const BoundParams& p, const PolicyConfig& cfg) {
  if (pooled.value().shape() != Shape{cfg.pooled_dim()}) {
    throw DimensionError("action head: pooled feature has shape " + shape_str(pooled.shape()) + ", expected [" +
                         std::to_string(cfg.pooled_dim()) + "]");
  }
  if (robot_state.value().shape() != Shape{cfg.robot_state_dim}) {
    throw DimensionError("action head: robot state has shape " + shape_str(robot_state.shape()));
  }
  Var x = reshape(concat_vectors({pooled, robot_state}), Shape{1, cfg.pooled_dim() + cfg.robot_state_dim});
  Var h = relu(pointwise_linear(x, p["head.fc1.weight"], p["head.fc1.bias"]));
  Var out = pointwise_linear(h, p["head.fc2.weight"], p["head.fc2.bias"]);
  return reshape(out, Shape{cfg.action_dim});
}

inline Var pool_and_act(Var g, Var p4, Var robot_state, const BoundParams& p, const PolicyConfig& cfg) {
  return action_head(pool_features(g, p4), robot_state, p, cfg);
}

/// Lexicographic row order of the cloud. Evaluating the network on this
/// ordering makes the output independent of input order bit for bit.
inline std::vector<std::size_t> canonical_order(const Tensor& points) {
  std::vector<std::size_t> order(points.dim(0));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    auto ra = points.row(a), rb = points.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  });
  return order;
}

inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& order) {
  Tensor out(Shape{order.size(), t.dim(1)});
  for (std::size_t r = 0; r < order.size(); ++r) std::copy(t.row(order[r]).begin(), t.row(order[r]).end(), out.row(r).begin());
  return out;
}

struct ForwardTrace {
  EncoderOutputs enc;
  AttentionArtifacts attn;  // with attention off only g is set
  Var pooled;
  Var action;
};

/// Full pass encode -> attention -> pool_and_act on one observation.
inline ForwardTrace forward_trace(Tape& tape, const PointCloudObservation& obs, const BoundParams& p,
                                  const PolicyConfig& cfg) {
  if (obs.points.rank() != 2 || obs.points.dim(1) != kPointChannels) {
    throw DimensionError("forward: observation points have shape " + shape_str(obs.points.shape()));
  }
  const Tensor cloud = gather_rows(obs.points, canonical_order(obs.points));
  Tensor xyz(Shape{cloud.dim(0), 3});
  for (std::size_t r = 0; r < cloud.dim(0); ++r)
    for (std::size_t k = 0; k < 3; ++k) xyz(r, k) = cloud(r, k);

  ForwardTrace tr;
  tr.enc = encode(tape.constant(cloud), p, cfg);
  if (cfg.attention) {
    tr.attn = guided_attention(tr.enc, xyz, p, cfg);
  } else {
    tr.attn.g = pointwise_baseline(tr.enc, p);
  }
  tr.pooled = pool_features(tr.attn.g, tr.enc.p4);
  tr.action = action_head(tr.pooled, tape.constant(obs.robot_state), p, cfg);
  return tr;
}

inline Var forward(Tape& tape, const PointCloudObservation& obs, const BoundParams& p, const PolicyConfig& cfg) {
  return forward_trace(tape, obs, p, cfg).action;
}

/// Inference without gradient bookkeeping.
inline Tensor act(const PointCloudObservation& obs, const ParamStore& params, const PolicyConfig& cfg) {
  Tape tape(false);
  BoundParams p(tape, params);
  return forward(tape, obs, p, cfg).value();
}

}  // namespace gp2e
