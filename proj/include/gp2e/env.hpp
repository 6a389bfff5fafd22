// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "gp2e/layers.hpp"
#include "gp2e/observation.hpp"

namespace gp2e {

using Vec3 = std::array<double, 3>;

enum class Task : std::uint32_t { ToyFill = 1, ToyPour = 2 };

inline const char* to_string(Task t) { return t == Task::ToyFill ? "fill" : "pour"; }

inline Task task_from_string(const std::string& s) {
  if (s == "fill") return Task::ToyFill;
  if (s == "pour") return Task::ToyPour;
  throw ContractError("unknown task '" + s + "' (expected fill or pour)");
}

struct TaskSpec {
  Task task = Task::ToyFill;
  std::size_t particles = 256;
  double fill_threshold = 0.90;
  double velocity_threshold = 0.05;
  double pour_tolerance = 0.004;
  std::size_t spill_limit = 100;
  std::size_t max_steps = 200;
};

/// Physical constants of the toy world.
struct EnvParams {
  double dt = 1e-3;
  double gravity = -9.8;
  double damping = 0.98;
  double grasp_radius = 0.06;
  double action_clamp = 0.05;
  double layer_height = 0.004;  // vertical pitch of a particle stack
  double cell = 0.0125;         // horizontal pitch of a particle stack
  double container_floor = 0.01;
  double clip_height = 0.002;
  double camera_noise = 0.0005;
};

/// Open-top box: inner square of half-width `half_width` around (cx, cy),
/// floor at `floor`, walls up to `rim`. Particles inside are binned into
/// `cells` x `cells` stacking columns.
struct Container {
  double cx = 0, cy = 0;
  double half_width = 0;
  double floor = 0, rim = 0;
  std::size_t cells = 1;

  bool contains_xy(double x, double y) const {
    return std::abs(x - cx) <= half_width && std::abs(y - cy) <= half_width;
  }
  bool contains(const Vec3& p) const { return contains_xy(p[0], p[1]) && p[2] >= floor - 1e-9 && p[2] <= rim; }
  std::size_t cell_of(double x, double y, double pitch) const {
    auto idx = [&](double v, double c) {
      const double f = std::floor((v - (c - half_width)) / pitch);
      return static_cast<std::size_t>(std::clamp(f, 0.0, static_cast<double>(cells - 1)));
    };
    return idx(x, cx) * cells + idx(y, cy);
  }
};

struct EnvState {
  TaskSpec spec;
  EnvParams params;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::vector<Vec3> pos;
  std::vector<Vec3> vel;
  std::vector<char> attached;
  std::vector<Vec3> offset;  // attached particle position relative to the gripper
  Vec3 gripper{0, 0, 0};
  Vec3 gripper_vel{0, 0, 0};
  bool grip = false;
  std::size_t grip_cycles = 0;  // completed close -> open transitions
  Container source, beaker;
  double target_line = 0.0;  // absolute z of the pour line
};

struct EpisodeResult {
  bool success = false;
  std::size_t steps = 0;
  double fill_fraction = 0.0;
  double level_error = 0.0;
  std::size_t spilled = 0;
  double max_speed = 0.0;
};

inline constexpr double kSourceHalfWidth = 0.025;
inline constexpr double kBeakerHalfWidth = 0.05;
inline constexpr double kSourceRimAboveFloor = 0.07;
inline constexpr double kBeakerRimAboveFloor = 0.08;
inline constexpr double kTravelHeight = 0.2;
inline constexpr double kReleaseHeight = 0.17;
inline constexpr double kFillGraspAboveFloor = 0.032;
inline constexpr double kPourLineMin = 0.012;  // above beaker floor
inline constexpr double kPourLineMax = 0.036;

/// Generator keyed on several 64-bit values; each is split into two 32-bit
/// words because seed_seq keeps only the low 32 bits of its inputs.
inline std::mt19937_64 derived_rng(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

inline double norm3(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

/// Seeded initial state: particles packed in source columns at exact rest
/// heights, container poses and the pour line drawn from fixed ranges.
inline EnvState reset(const TaskSpec& spec, std::uint64_t seed, const EnvParams& params = {}) {
  if (spec.particles == 0) throw ContractError("reset: particle count must be positive");
  EnvState s;
  s.spec = spec;
  s.params = params;
  s.seed = seed;
  auto rng = derived_rng({seed, 0x9e3779b9, static_cast<std::uint64_t>(spec.task)});
  const double zf = params.container_floor;
  s.source = {uniform(rng, -0.35, -0.15), uniform(rng, -0.15, 0.15), kSourceHalfWidth, zf, zf + kSourceRimAboveFloor, 4};
  s.beaker = {uniform(rng, 0.15, 0.35), uniform(rng, -0.15, 0.15), kBeakerHalfWidth, zf, zf + kBeakerRimAboveFloor, 8};
  s.target_line = zf + uniform(rng, kPourLineMin, kPourLineMax);
  s.gripper = {uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05), uniform(rng, 0.23, 0.27)};

  const std::size_t cols = s.source.cells * s.source.cells;
  s.pos.resize(spec.particles);
  for (std::size_t i = 0; i < spec.particles; ++i) {
    const std::size_t col = i % cols, layer = i / cols;
    const std::size_t cx = col / s.source.cells, cy = col % s.source.cells;
    s.pos[i] = {s.source.cx - s.source.half_width + (static_cast<double>(cx) + 0.5) * params.cell,
                s.source.cy - s.source.half_width + (static_cast<double>(cy) + 0.5) * params.cell,
                zf + static_cast<double>(layer) * params.layer_height};
  }
  s.vel.assign(spec.particles, Vec3{0, 0, 0});
  s.attached.assign(spec.particles, 0);
  s.offset.assign(spec.particles, Vec3{0, 0, 0});
  return s;
}

namespace detail {

/// Side walls below the rim: particles inside stay inside, particles outside
/// stay outside. Entry over the rim is free.
inline void apply_walls(const Container& c, const Vec3& prev, Vec3& p, Vec3& v) {
  if (p[2] >= c.rim) return;
  const bool was_in = c.contains_xy(prev[0], prev[1]);
  const bool now_in = c.contains_xy(p[0], p[1]);
  if (was_in && prev[2] < c.rim && !now_in) {
    for (std::size_t k = 0; k < 2; ++k) {
      const double centre = k == 0 ? c.cx : c.cy;
      const double lo = centre - c.half_width, hi = centre + c.half_width;
      if (p[k] < lo || p[k] > hi) {
        p[k] = std::clamp(p[k], lo, hi);
        v[k] = 0.0;
      }
    }
  } else if (!was_in && now_in && prev[2] < c.rim) {
    p[0] = prev[0];
    p[1] = prev[1];
    v[0] = v[1] = 0.0;
  }
}

/// Inelastic stacking: the k-th lowest free particle in a container column
/// rests no lower than floor + k * layer_height.
inline void apply_stacks(const Container& c, const EnvState& s, std::vector<Vec3>& pos, std::vector<Vec3>& vel) {
  struct Entry {
    std::size_t cell;
    double z;
    std::size_t idx;
  };
  std::vector<Entry> in;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    if (s.attached[i] || !c.contains_xy(pos[i][0], pos[i][1])) continue;
    in.push_back({c.cell_of(pos[i][0], pos[i][1], s.params.cell), pos[i][2], i});
  }
  std::sort(in.begin(), in.end(), [](const Entry& a, const Entry& b) {
    if (a.cell != b.cell) return a.cell < b.cell;
    if (a.z != b.z) return a.z < b.z;
    return a.idx < b.idx;
  });
  std::size_t rank = 0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    rank = (j > 0 && in[j].cell == in[j - 1].cell) ? rank + 1 : 0;
    const double support = c.floor + static_cast<double>(rank) * s.params.layer_height;
    Vec3& p = pos[in[j].idx];
    if (p[2] < support) {
      p[2] = support;
      vel[in[j].idx][2] = 0.0;
    }
  }
}

}  // namespace detail

/// One physics substep of the free particles: v <- (v + g dt) * damping,
/// x <- x + v dt, then walls, stacks, ground and workspace bounds.
/// Returns true if any free particle changed.
inline bool substep_particles(EnvState& s) {
  const EnvParams& P = s.params;
  std::vector<Vec3> pos = s.pos, vel = s.vel;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    if (s.attached[i]) continue;
    Vec3& v = vel[i];
    Vec3& p = pos[i];
    v[2] += P.gravity * P.dt;
    for (std::size_t k = 0; k < 3; ++k) v[k] *= P.damping;
    for (std::size_t k = 0; k < 3; ++k) p[k] += v[k] * P.dt;
    detail::apply_walls(s.source, s.pos[i], p, v);
    detail::apply_walls(s.beaker, s.pos[i], p, v);
  }
  detail::apply_stacks(s.source, s, pos, vel);
  detail::apply_stacks(s.beaker, s, pos, vel);
  bool changed = false;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    if (s.attached[i]) continue;
    Vec3& p = pos[i];
    Vec3& v = vel[i];
    if (p[2] < 0.0) {
      p[2] = 0.0;
      v[2] = 0.0;
    }
    for (std::size_t k = 0; k < 3; ++k) {
      if (p[k] < -1.0 || p[k] > 1.0) {
        p[k] = std::clamp(p[k], -1.0, 1.0);
        v[k] = 0.0;
      }
    }
    changed = changed || p != s.pos[i] || v != s.vel[i];
  }
  s.pos = std::move(pos);
  s.vel = std::move(vel);
  return changed;
}

inline Vec3 clamp_delta(const Tensor& action, double limit) {
  return {std::clamp(action[0], -limit, limit), std::clamp(action[1], -limit, limit),
          std::clamp(action[2], -limit, limit)};
}

/// Applies one policy action over `sim_substeps` physics substeps.
inline void env_step(EnvState& s, const Tensor& action, std::size_t sim_substeps) {
  if (action.shape() != Shape{kActionDim})
    throw DimensionError("env_step: action must have shape [4], got " + shape_str(action.shape()));
  if (!action.all_finite()) throw NumericError("env_step: non-finite action");
  if (sim_substeps == 0) throw ContractError("env_step: sim_substeps must be positive");
  const EnvParams& P = s.params;
  const Vec3 delta = clamp_delta(action, P.action_clamp);
  const bool close = action[3] > 0.0;

  if (close && !s.grip) {
    const double r2 = P.grasp_radius * P.grasp_radius;
    for (std::size_t i = 0; i < s.pos.size(); ++i) {
      Vec3 d{s.pos[i][0] - s.gripper[0], s.pos[i][1] - s.gripper[1], s.pos[i][2] - s.gripper[2]};
      if (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r2) {
        s.attached[i] = 1;
        s.offset[i] = d;
      }
    }
  } else if (!close && s.grip) {
    for (std::size_t i = 0; i < s.pos.size(); ++i) {
      if (!s.attached[i]) continue;
      s.attached[i] = 0;
      s.vel[i] = {0, 0, 0};
    }
    s.grip_cycles += 1;
  }
  s.grip = close;

  const Vec3 g0 = s.gripper;
  Vec3 target;
  for (std::size_t k = 0; k < 3; ++k) target[k] = std::clamp(g0[k] + delta[k], -1.0, 1.0);
  const double duration = static_cast<double>(sim_substeps) * P.dt;
  for (std::size_t k = 0; k < 3; ++k) s.gripper_vel[k] = (target[k] - g0[k]) / duration;

  bool settled = false;
  for (std::size_t n = 1; n <= sim_substeps; ++n) {
    const double frac = static_cast<double>(n) / static_cast<double>(sim_substeps);
    for (std::size_t k = 0; k < 3; ++k) s.gripper[k] = g0[k] + (target[k] - g0[k]) * frac;
    for (std::size_t i = 0; i < s.pos.size(); ++i) {
      if (!s.attached[i]) continue;
      for (std::size_t k = 0; k < 3; ++k) s.pos[i][k] = s.gripper[k] + s.offset[i][k];
      s.vel[i] = s.gripper_vel;
    }
    // Free particles do not see the gripper, so once they stop changing the
    // remaining substeps are a fixed point and only the gripper moves.
    if (!settled) settled = !substep_particles(s);
  }
  s.gripper = target;
  for (std::size_t i = 0; i < s.pos.size(); ++i)
    if (s.attached[i])
      for (std::size_t k = 0; k < 3; ++k) s.pos[i][k] = s.gripper[k] + s.offset[i][k];
  s.step += 1;
}

/// Mean z of the highest tenth (at least one) of the given heights.
inline double top_decile_mean(std::vector<double> z) {
  if (z.empty()) return 0.0;
  std::sort(z.begin(), z.end(), std::greater<>());
  const std::size_t k = std::max<std::size_t>(1, (z.size() + 9) / 10);
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += z[i];
  return s / static_cast<double>(k);
}

inline EpisodeResult check_success(const EnvState& s) {
  EpisodeResult r;
  r.steps = s.step;
  std::size_t in_beaker = 0;
  std::vector<double> levels;
  for (std::size_t i = 0; i < s.pos.size(); ++i) {
    r.max_speed = std::max(r.max_speed, norm3(s.vel[i]));
    if (s.attached[i]) continue;
    if (s.beaker.contains(s.pos[i])) {
      ++in_beaker;
      levels.push_back(s.pos[i][2]);
    } else if (!s.source.contains(s.pos[i])) {
      ++r.spilled;
    }
  }
  const TaskSpec& t = s.spec;
  r.fill_fraction = static_cast<double>(in_beaker) / static_cast<double>(s.pos.size());
  const bool still = r.max_speed < t.velocity_threshold;
  if (t.task == Task::ToyFill) {
    r.success = r.fill_fraction > t.fill_threshold && still;
  } else {
    r.level_error = levels.empty() ? std::abs(s.target_line - s.beaker.floor) : std::abs(top_decile_mean(levels) - s.target_line);
    r.success = !levels.empty() && r.level_error <= t.pour_tolerance && r.spilled < t.spill_limit && still;
  }
  return r;
}

// ---------------------------------------------------------------- expert

namespace detail {

/// Beaker level predicted for grasping the source at height gz and releasing
/// over the beaker centre, assuming the grasped columns keep their layout.
inline double predicted_pour_level(const EnvState& s, double gz) {
  const double r2 = s.params.grasp_radius * s.params.grasp_radius;
  std::vector<std::size_t> per_cell(s.beaker.cells * s.beaker.cells, 0);
  std::vector<double> z;
  for (const Vec3& p : s.pos) {
    const double dx = p[0] - s.source.cx, dy = p[1] - s.source.cy, dz = p[2] - gz;
    if (dx * dx + dy * dy + dz * dz > r2) continue;
    const std::size_t cell = s.beaker.cell_of(s.beaker.cx + dx, s.beaker.cy + dy, s.params.cell);
    z.push_back(s.beaker.floor + static_cast<double>(per_cell[cell]++) * s.params.layer_height);
  }
  return z.empty() ? s.beaker.floor : top_decile_mean(z);
}

inline Vec3 waypoint_delta(const Vec3& at, const Vec3& goal, double limit) {
  auto clampv = [&](double d) { return std::clamp(d, -limit, limit); };
  const double horiz = std::hypot(goal[0] - at[0], goal[1] - at[1]);
  if (horiz > 1e-9) {
    if (at[2] < kTravelHeight - 1e-9) return {0, 0, clampv(kTravelHeight - at[2])};
    // Scale the horizontal move so it stays on the straight line to the goal.
    const double dx = goal[0] - at[0], dy = goal[1] - at[1];
    const double k = std::min(1.0, limit / std::max(std::abs(dx), std::abs(dy)));
    return {dx * k, dy * k, 0.0};
  }
  return {0, 0, clampv(goal[2] - at[2])};
}

inline bool at_pose(const Vec3& a, const Vec3& b) {
  return std::abs(a[0] - b[0]) <= 1e-9 && std::abs(a[1] - b[1]) <= 1e-9 && std::abs(a[2] - b[2]) <= 1e-9;
}

}  // namespace detail

/// Grasp height over the source: the stack middle for Fill, and for Pour the
/// height whose grasped subset best matches the pour line.
inline double expert_grasp_height(const EnvState& s) {
  const double fill_z = s.source.floor + kFillGraspAboveFloor;
  if (s.spec.task == Task::ToyFill) return fill_z;
  double best = fill_z, best_err = std::abs(detail::predicted_pour_level(s, fill_z) - s.target_line);
  for (int i = 0; i <= 240; ++i) {
    const double gz = fill_z + 0.0005 * i;
    const double err = std::abs(detail::predicted_pour_level(s, gz) - s.target_line);
    if (err < best_err) {
      best = gz;
      best_err = err;
    }
  }
  return best;
}

/// Stateless waypoint controller: approach and grasp the source, carry above
/// the beaker, release, then retreat upwards.
inline Tensor scripted_expert(const EnvState& s) {
  const double lim = s.params.action_clamp;
  Tensor a(Shape{kActionDim});
  auto emit = [&](const Vec3& d, bool grip) {
    for (std::size_t k = 0; k < 3; ++k) a[k] = std::clamp(d[k], -lim, lim);
    a[3] = grip ? lim : -lim;
    return a;
  };
  if (s.grip) {
    const Vec3 release{s.beaker.cx, s.beaker.cy, kReleaseHeight};
    if (detail::at_pose(s.gripper, release)) return emit({0, 0, 0}, false);
    return emit(detail::waypoint_delta(s.gripper, release, lim), true);
  }
  if (s.grip_cycles == 0) {
    const Vec3 grasp{s.source.cx, s.source.cy, expert_grasp_height(s)};
    if (detail::at_pose(s.gripper, grasp)) return emit({0, 0, 0}, true);
    return emit(detail::waypoint_delta(s.gripper, grasp, lim), false);
  }
  return emit({0, 0, std::clamp(kTravelHeight + 0.05 - s.gripper[2], 0.0, lim)}, false);
}

// ---------------------------------------------------------- observations

inline constexpr std::array<double, 3> kLabelGripper{1, 0, 0};
inline constexpr std::array<double, 3> kLabelParticle{0, 1, 0};
inline constexpr std::array<double, 3> kLabelContainer{0, 0, 1};
inline constexpr std::array<double, 3> kLabelTarget{0, 0, 0.5};

struct LabeledPoint {
  Vec3 xyz;
  std::array<double, 3> label;
};

namespace detail {

inline void container_surface(const Container& c, std::vector<LabeledPoint>& out) {
  const int per_edge = 6;
  for (int i = 0; i <= per_edge; ++i)
    for (int j = 0; j <= per_edge; ++j) {
      const double u = -c.half_width + 2.0 * c.half_width * i / per_edge;
      const double w = -c.half_width + 2.0 * c.half_width * j / per_edge;
      out.push_back({{c.cx + u, c.cy + w, c.floor}, kLabelContainer});
    }
  const int levels = 4;
  for (int l = 1; l <= levels; ++l) {
    const double z = c.floor + (c.rim - c.floor) * l / levels;
    for (int i = 0; i < per_edge; ++i) {
      const double u = -c.half_width + 2.0 * c.half_width * i / per_edge;
      out.push_back({{c.cx + u, c.cy - c.half_width, z}, kLabelContainer});
      out.push_back({{c.cx + c.half_width, c.cy + u, z}, kLabelContainer});
      out.push_back({{c.cx - u, c.cy + c.half_width, z}, kLabelContainer});
      out.push_back({{c.cx - c.half_width, c.cy - u, z}, kLabelContainer});
    }
  }
}

}  // namespace detail

/// Every labelled scene point before any camera model, including ground.
inline std::vector<LabeledPoint> scene_points(const EnvState& s) {
  std::vector<LabeledPoint> pts;
  for (const Vec3& p : s.pos) pts.push_back({p, kLabelParticle});
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j)
      for (int k = 0; k <= 1; ++k)
        pts.push_back({{s.gripper[0] + 0.01 * i, s.gripper[1] + 0.01 * j, s.gripper[2] + 0.02 * k}, kLabelGripper});
  detail::container_surface(s.source, pts);
  detail::container_surface(s.beaker, pts);
  if (s.spec.task == Task::ToyPour) {
    const Container& b = s.beaker;
    for (int i = 0; i < 8; ++i) {
      const double u = -b.half_width + 2.0 * b.half_width * i / 8;
      pts.push_back({{b.cx + u, b.cy - b.half_width, s.target_line}, kLabelTarget});
      pts.push_back({{b.cx + b.half_width, b.cy + u, s.target_line}, kLabelTarget});
      pts.push_back({{b.cx - u, b.cy + b.half_width, s.target_line}, kLabelTarget});
      pts.push_back({{b.cx - b.half_width, b.cy - u, s.target_line}, kLabelTarget});
    }
  }
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j) pts.push_back({{-0.55 + 0.1 * i, -0.55 + 0.1 * j, 0.0}, kLabelContainer});
  return pts;
}

inline Tensor to_cloud(const std::vector<LabeledPoint>& pts) {
  Tensor t(Shape{pts.size(), kPointChannels});
  for (std::size_t r = 0; r < pts.size(); ++r)
    for (std::size_t k = 0; k < 3; ++k) {
      t(r, k) = pts[r].xyz[k];
      t(r, 3 + k) = pts[r].label[k];
    }
  return t;
}

/// Two synthetic views: a fixed base view keeping three in four scene points,
/// and a hand view keeping points within 0.3 m of the gripper. Each adds
/// truncated Gaussian noise to xyz.
inline std::array<Tensor, 2> camera_views(const EnvState& s) {
  const std::vector<LabeledPoint> scene = scene_points(s);
  std::array<Tensor, 2> views;
  for (std::size_t cam = 0; cam < 2; ++cam) {
    auto rng = derived_rng({s.seed, s.step, cam + 1});
    std::vector<LabeledPoint> kept;
    for (std::size_t i = 0; i < scene.size(); ++i) {
      const LabeledPoint& p = scene[i];
      const bool visible = cam == 0 ? i % 4 != 3
                                    : std::hypot(p.xyz[0] - s.gripper[0], p.xyz[1] - s.gripper[1],
                                                 p.xyz[2] - s.gripper[2]) <= 0.3;
      if (!visible) continue;
      LabeledPoint q = p;
      for (double& c : q.xyz) {
        const double n = std::clamp(normal01(rng), -3.0, 3.0) * s.params.camera_noise;
        c += n;
      }
      kept.push_back(q);
    }
    views[cam] = to_cloud(kept);
  }
  return views;
}

/// Concatenates two views and drops everything below `clip_height`.
inline Tensor fuse_and_clip(const Tensor& a, const Tensor& b, double clip_height = 0.002) {
  for (const Tensor* v : {&a, &b})
    if (v->rank() != 2 || v->dim(1) != kPointChannels)
      throw DimensionError("fuse_and_clip: views must be Nx6, got " + shape_str(v->shape()));
  std::vector<double> keep;
  std::size_t rows = 0;
  for (const Tensor* v : {&a, &b})
    for (std::size_t r = 0; r < v->dim(0); ++r) {
      if ((*v)(r, 2) < clip_height) continue;
      auto row = v->row(r);
      keep.insert(keep.end(), row.begin(), row.end());
      ++rows;
    }
  if (rows == 0) throw ContractError("fuse_and_clip: no points left after height clipping (degenerate scene)");
  return Tensor(Shape{rows, kPointChannels}, std::move(keep));
}

/// Uniform subsample to exactly n rows: without replacement when the input is
/// large enough, with replacement otherwise.
inline Tensor downsample(const Tensor& points, std::size_t n, std::mt19937_64& rng) {
  if (points.rank() != 2 || points.dim(0) == 0) throw ContractError("downsample: empty input");
  const std::size_t m = points.dim(0), c = points.dim(1);
  std::vector<std::size_t> idx;
  if (m >= n) {
    idx.resize(m);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // Partial Fisher-Yates with an explicit index draw; std::shuffle's
    // algorithm is implementation-defined.
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(m - i));
      std::swap(idx[i], idx[std::min(j, m - 1)]);
    }
    idx.resize(n);
  } else {
    idx.resize(n);
    for (auto& i : idx) i = std::min(m - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(m)));
  }
  Tensor out(Shape{n, c});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < c; ++k) out(r, k) = points(idx[r], k);
  return out;
}

/// Full preprocessing chain for the current state.
inline PointCloudObservation observe(const EnvState& s, std::size_t n_points) {
  const auto views = camera_views(s);
  auto rng = derived_rng({s.seed, s.step, 7});
  PointCloudObservation obs;
  obs.points = downsample(fuse_and_clip(views[0], views[1], s.params.clip_height), n_points, rng);
  for (std::size_t k = 0; k < 3; ++k) {
    obs.robot_state[k] = s.gripper[k];
    obs.robot_state[3 + k] = s.gripper_vel[k];
  }
  obs.robot_state[6] = s.grip ? 1.0 : 0.0;
  return obs;
}

// --------------------------------------------------------------- rollout

using PolicyFn = std::function<Tensor(const PointCloudObservation&, const EnvState&)>;

struct Rollout {
  EpisodeResult result;
  std::vector<PointCloudObservation> observations;
  std::vector<Tensor> actions;
};

/// Runs one episode until success or the step limit. Observations are only
/// built when the policy or the recording needs them.
inline Rollout run_episode(const TaskSpec& spec, std::uint64_t seed, std::size_t sim_substeps, std::size_t n_points,
                           const PolicyFn& policy, bool needs_observation, bool record,
                           const EnvParams& params = {}) {
  EnvState s = reset(spec, seed, params);
  Rollout out;
  out.result = check_success(s);
  while (!out.result.success && s.step < spec.max_steps) {
    PointCloudObservation obs;
    if (needs_observation || record) obs = observe(s, n_points);
    Tensor a = policy(obs, s);
    if (record) {
      out.observations.push_back(obs);
      out.actions.push_back(a);
    }
    env_step(s, a, sim_substeps);
    out.result = check_success(s);
  }
  return out;
}

inline PolicyFn expert_policy() {
  return [](const PointCloudObservation&, const EnvState& s) { return scripted_expert(s); };
}

}  // namespace gp2e
