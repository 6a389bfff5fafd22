// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gp2e/env.hpp"
#include "gp2e/io.hpp"

namespace gp2e {

inline constexpr char kDemoMagic[4] = {'G', 'P', '2', 'D'};
inline constexpr std::uint32_t kDemoVersion = 1;

struct DemoFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Demonstration {
  Task task = Task::ToyFill;
  std::uint64_t seed = 0;
  bool success = false;
  std::vector<PointCloudObservation> observations;
  std::vector<Tensor> actions;

  std::size_t size() const { return actions.size(); }
};

/// Successful demonstrations plus a flat (episode, step) index.
class DemoDataset {
 public:
  DemoDataset() = default;
  explicit DemoDataset(std::vector<Demonstration> demos) {
    for (auto& d : demos) add(std::move(d));
  }

  void add(Demonstration d) {
    if (!d.success) return;
    if (d.size() == 0) throw ContractError("demonstration for seed " + std::to_string(d.seed) + " has no steps");
    if (d.observations.size() != d.actions.size())
      throw ContractError("demonstration for seed " + std::to_string(d.seed) + " has mismatched step arrays");
    const std::size_t e = demos_.size();
    for (std::size_t s = 0; s < d.size(); ++s) index_.emplace_back(e, s);
    demos_.push_back(std::move(d));
  }

  bool empty() const { return index_.empty(); }
  std::size_t steps() const { return index_.size(); }
  const std::vector<Demonstration>& demos() const { return demos_; }
  const std::pair<std::size_t, std::size_t>& locate(std::size_t flat) const { return index_.at(flat); }
  const PointCloudObservation& observation(std::size_t flat) const {
    const auto& [e, s] = index_.at(flat);
    return demos_[e].observations[s];
  }
  const Tensor& action(std::size_t flat) const {
    const auto& [e, s] = index_.at(flat);
    return demos_[e].actions[s];
  }

 private:
  std::vector<Demonstration> demos_;
  std::vector<std::pair<std::size_t, std::size_t>> index_;
};

/// Flat step indices drawn uniformly with replacement.
inline std::vector<std::size_t> sample_batch(const DemoDataset& data, std::size_t batch_size, std::mt19937_64& rng) {
  if (data.empty()) throw ContractError("sample_batch: dataset is empty");
  std::vector<std::size_t> idx(batch_size);
  const double n = static_cast<double>(data.steps());
  for (auto& i : idx) i = std::min(data.steps() - 1, static_cast<std::size_t>(uniform01(rng) * n));
  return idx;
}

struct DemoFileHeader {
  Task task = Task::ToyFill;
  std::uint32_t n_points = 0;
  std::uint32_t channels = kPointChannels;
  std::uint32_t robot_state_dim = kRobotStateDim;
  std::uint32_t action_dim = kActionDim;
};

inline std::string encode_demos(Task task, std::size_t n_points, const std::vector<Demonstration>& demos) {
  ByteWriter w;
  w.put_bytes(std::string_view(kDemoMagic, 4));
  w.put<std::uint32_t>(kDemoVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(task));
  w.put<std::uint64_t>(demos.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(n_points));
  w.put<std::uint32_t>(kPointChannels);
  w.put<std::uint32_t>(kRobotStateDim);
  w.put<std::uint32_t>(kActionDim);
  for (const auto& d : demos) {
    w.put<std::uint64_t>(d.seed);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(d.size()));
    w.put<std::uint8_t>(d.success ? 1 : 0);
  }
  for (const auto& d : demos) {
    for (std::size_t s = 0; s < d.size(); ++s) {
      const auto& obs = d.observations[s];
      if (obs.points.shape() != Shape{n_points, kPointChannels})
        throw DimensionError("encode_demos: seed " + std::to_string(d.seed) + " step " + std::to_string(s) +
                             " has cloud " + shape_str(obs.points.shape()));
      for (double v : obs.points.data()) w.put<float>(static_cast<float>(v));
      for (double v : obs.robot_state.data()) w.put<float>(static_cast<float>(v));
      for (double v : d.actions[s].data()) w.put<float>(static_cast<float>(v));
    }
  }
  return w.bytes();
}

inline std::pair<DemoFileHeader, std::vector<Demonstration>> decode_demos(std::string_view bytes) {
  ByteReader<DemoFormatError> r(bytes);
  if (r.get_bytes(4) != std::string_view(kDemoMagic, 4)) throw DemoFormatError("not a demonstration file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kDemoVersion) throw DemoFormatError("demonstration file version " + std::to_string(version));
  DemoFileHeader h;
  const auto task = r.get<std::uint32_t>();
  if (task != 1 && task != 2) throw DemoFormatError("unknown task id " + std::to_string(task));
  h.task = static_cast<Task>(task);
  const auto count = r.get<std::uint64_t>();
  h.n_points = r.get<std::uint32_t>();
  h.channels = r.get<std::uint32_t>();
  h.robot_state_dim = r.get<std::uint32_t>();
  h.action_dim = r.get<std::uint32_t>();
  if (h.channels != kPointChannels || h.robot_state_dim != kRobotStateDim || h.action_dim != kActionDim)
    throw DemoFormatError("unsupported extents in manifest");
  std::vector<Demonstration> demos(count);
  std::uint64_t total_steps = 0;
  for (auto& d : demos) {
    d.task = h.task;
    d.seed = r.get<std::uint64_t>();
    d.observations.resize(r.get<std::uint32_t>());
    d.success = r.get<std::uint8_t>() != 0;
    total_steps += d.observations.size();
  }
  const std::uint64_t per_step = (std::uint64_t{h.n_points} * h.channels + h.robot_state_dim + h.action_dim) * 4;
  if (r.remaining() != total_steps * per_step)
    throw DemoFormatError("payload is " + std::to_string(r.remaining()) + " bytes, manifest implies " +
                          std::to_string(total_steps * per_step));
  for (auto& d : demos) {
    for (auto& obs : d.observations) {
      obs.points = Tensor(Shape{h.n_points, kPointChannels});
      for (double& v : obs.points.data()) v = r.get<float>();
      for (double& v : obs.robot_state.data()) v = r.get<float>();
      Tensor a(Shape{kActionDim});
      for (double& v : a.data()) v = r.get<float>();
      d.actions.push_back(std::move(a));
    }
  }
  return {h, std::move(demos)};
}

inline void write_demos(const std::filesystem::path& path, Task task, std::size_t n_points,
                        const std::vector<Demonstration>& demos) {
  atomic_write(path, encode_demos(task, n_points, demos));
}

inline std::pair<DemoFileHeader, std::vector<Demonstration>> read_demos(const std::filesystem::path& path) {
  return decode_demos(read_file(path));
}

/// Expert rollouts on seeds seed_base, seed_base + 1, ... keeping successes
/// until `count` are collected or 5 * count seeds have been tried.
inline std::vector<Demonstration> generate_demos(const TaskSpec& spec, std::size_t count, std::uint64_t seed_base,
                                                 std::size_t sim_substeps, std::size_t n_points,
                                                 const EnvParams& params = {}) {
  std::vector<Demonstration> out;
  for (std::uint64_t k = 0; out.size() < count; ++k) {
    if (k >= 5 * count)
      throw ContractError("generate_demos: only " + std::to_string(out.size()) + " of " + std::to_string(count) +
                          " successes within " + std::to_string(5 * count) + " seeds");
    Rollout r = run_episode(spec, seed_base + k, sim_substeps, n_points, expert_policy(), false, true, params);
    if (!r.result.success) continue;
    Demonstration d;
    d.task = spec.task;
    d.seed = seed_base + k;
    d.success = true;
    d.observations = std::move(r.observations);
    d.actions = std::move(r.actions);
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace gp2e
