// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gp2e/checkpoint.hpp"
#include "gp2e/demos.hpp"
#include "gp2e/env.hpp"
#include "gp2e/optimizer.hpp"
#include "gp2e/policy.hpp"

namespace gp2e {

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t batch_size = 256;
  std::size_t sim_steps = 500;
  std::size_t max_train_steps = 20000;
  std::size_t eval_interval = 1000;
  std::size_t eval_episodes = 100;
  std::uint64_t seed = 0;
  std::uint64_t eval_seed_base = 1'000'000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool record_wall_clock = false;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ContractError("train config: learning_rate must be positive");
    if (batch_size == 0) throw ContractError("train config: batch_size must be positive");
    if (sim_steps == 0) throw ContractError("train config: sim_steps must be positive");
    if (max_train_steps == 0) throw ContractError("train config: max_train_steps must be positive");
    if (eval_interval == 0) throw ContractError("train config: eval_interval must be positive");
    if (eval_episodes == 0) throw ContractError("train config: eval_episodes must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
      throw ContractError("train config: adam betas must lie in (0, 1)");
    if (!(adam_epsilon > 0.0)) throw ContractError("train config: adam epsilon must be positive");
  }
  AdamConfig adam() const { return {learning_rate, beta1, beta2, adam_epsilon}; }
};

struct StageSchedule {
  double batch_scale = 0.8;
  double sim_scale = 0.9;

  void validate() const {
    if (!(batch_scale > 0.0 && batch_scale <= 1.0)) throw ContractError("schedule: batch_scale must lie in (0, 1]");
    if (!(sim_scale > 0.0 && sim_scale <= 1.0)) throw ContractError("schedule: sim_scale must lie in (0, 1]");
  }
};

/// Nearest integer, halves away from zero, never below 1.
inline std::size_t scaled_extent(std::size_t v, double scale, const char* what) {
  const double r = std::round(static_cast<double>(v) * scale);
  if (r < 1.0) {
    std::cerr << "warning: scaled " << what << " rounds to " << r << ", clamped to 1\n";
    return 1;
  }
  return static_cast<std::size_t>(r);
}

inline TrainConfig finetune_schedule(const TrainConfig& stage1, const StageSchedule& sched) {
  stage1.validate();
  sched.validate();
  TrainConfig out = stage1;
  out.batch_size = scaled_extent(stage1.batch_size, sched.batch_scale, "batch_size");
  out.sim_steps = scaled_extent(stage1.sim_steps, sched.sim_scale, "sim_steps");
  return out;
}

/// Mean squared error over batch and action dimensions.
inline Var bc_loss(Var predicted, Var target) {
  if (predicted.shape() != target.shape())
    throw DimensionError("bc_loss: predicted " + shape_str(predicted.shape()) + " vs target " +
                         shape_str(target.shape()));
  Var diff = sub(predicted, target);
  return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(predicted.value().size()));
}

struct MetricsRow {
  int stage = 1;
  std::size_t step = 0;
  double loss = 0.0;
  double success_rate = 0.0;
  double wall_seconds = 0.0;
  std::size_t batch_size = 0;
  std::size_t sim_steps = 0;
  double grad_norm = 0.0;
};

inline constexpr const char* kMetricsHeader = "stage,step,loss,success_rate,wall_seconds,batch_size,sim_steps,grad_norm";

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%zu,%.9g,%.4f,%.3f,%zu,%zu,%.9g", r.stage, r.step, r.loss, r.success_rate,
                r.wall_seconds, r.batch_size, r.sim_steps, r.grad_norm);
  return buf;
}

/// Append-only metrics file; the whole file is rewritten through a rename on
/// every append so readers never see a torn row.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(std::filesystem::path path) : path_(std::move(path)) { flush(); }

  void append(const MetricsRow& r) {
    if (!rows_.empty()) {
      const auto& last = rows_.back();
      if (r.stage < last.stage || (r.stage == last.stage && r.step < last.step))
        throw ContractError("metrics rows must be appended in nondecreasing (stage, step) order");
    }
    rows_.push_back(r);
    flush();
  }
  const std::vector<MetricsRow>& rows() const { return rows_; }
  std::string text() const {
    std::string s = std::string(kMetricsHeader) + '\n';
    for (const auto& r : rows_) s += format_metrics_row(r) + '\n';
    return s;
  }

 private:
  void flush() const {
    if (!path_.empty()) atomic_write(path_, text());
  }
  std::filesystem::path path_;
  std::vector<MetricsRow> rows_;
};

/// Closed-loop success rate over seeds seed_base .. seed_base + episodes - 1.
inline double evaluate(const PolicyFn& policy, bool needs_observation, const TaskSpec& spec, std::size_t episodes,
                       std::uint64_t seed_base, std::size_t sim_steps, std::size_t n_points) {
  if (episodes == 0) throw ContractError("evaluate: episodes must be positive");
  std::size_t ok = 0;
  for (std::size_t e = 0; e < episodes; ++e) {
    const std::uint64_t seed = seed_base + e;
    try {
      ok += run_episode(spec, seed, sim_steps, n_points, policy, needs_observation, false).result.success ? 1 : 0;
    } catch (const std::exception& ex) {
      throw std::runtime_error("evaluation episode with seed " + std::to_string(seed) + " failed: " + ex.what());
    }
  }
  return static_cast<double>(ok) / static_cast<double>(episodes);
}

inline PolicyFn network_policy(const ParamStore& params, const PolicyConfig& cfg) {
  return [&params, cfg](const PointCloudObservation& obs, const EnvState&) { return act(obs, params, cfg); };
}

inline double evaluate_params(const ParamStore& params, const PolicyConfig& pcfg, const TaskSpec& spec,
                              std::size_t episodes, std::uint64_t seed_base, std::size_t sim_steps) {
  return evaluate(network_policy(params, pcfg), true, spec, episodes, seed_base, sim_steps, pcfg.n_points);
}

struct StageResult {
  Checkpoint best;
  ParamStore final_params;
  std::vector<MetricsRow> rows;
};

/// Hooks for the caller: metrics sink and checkpoint sink (both optional).
struct TrainHooks {
  std::function<void(int stage, const ParamStore& initial)> on_stage_start;
  std::function<void(const MetricsRow&)> on_metrics;
  std::function<void(const Checkpoint&)> on_best;
};

/// Batch forward + BC loss on one tape; returns the loss and fills `grads`.
inline double bc_gradient(const ParamStore& params, const PolicyConfig& pcfg, const DemoDataset& data,
                          const std::vector<std::size_t>& batch, GradMap& grads) {
  Tape tape;
  BoundParams bp(tape, params);
  std::vector<Var> preds, targets;
  for (std::size_t i : batch) {
    preds.push_back(forward(tape, data.observation(i), bp, pcfg));
    targets.push_back(tape.constant(data.action(i)));
  }
  Var loss = bc_loss(stack_rows(preds), stack_rows(targets));
  const double value = loss.value().item();
  grads = tape.backward(loss);
  return value;
}

/// Mean BC loss over every step of the dataset, in chunks of `chunk`.
inline double dataset_loss(const ParamStore& params, const PolicyConfig& pcfg, const DemoDataset& data,
                           std::size_t chunk = 64) {
  double total = 0.0;
  for (std::size_t start = 0; start < data.steps(); start += chunk) {
    Tape tape(false);
    BoundParams bp(tape, params);
    std::vector<Var> preds, targets;
    for (std::size_t i = start; i < std::min(data.steps(), start + chunk); ++i) {
      preds.push_back(forward(tape, data.observation(i), bp, pcfg));
      targets.push_back(tape.constant(data.action(i)));
    }
    total += bc_loss(stack_rows(preds), stack_rows(targets)).value().item() * static_cast<double>(preds.size());
  }
  return total / static_cast<double>(data.steps());
}

/// sample -> forward -> loss -> backward -> Adam, evaluating every
/// eval_interval steps and at the last step. `step_offset` shifts the step
/// numbers written to metrics rows.
inline StageResult train_stage(const TrainConfig& cfg, const PolicyConfig& pcfg, const TaskSpec& spec,
                               const DemoDataset& data, const Checkpoint& init, int stage,
                               std::size_t step_offset = 0, const TrainHooks& hooks = {}) {
  cfg.validate();
  pcfg.validate();
  if (data.empty()) throw ContractError("train_stage: dataset is empty");
  if (!(init.config == pcfg)) throw ContractError("train_stage: initial checkpoint was built for another config");

  ParamStore params = init.params;
  if (hooks.on_stage_start) hooks.on_stage_start(stage, params);
  AdamState adam = AdamState::zeros_like(params);
  auto rng = derived_rng({cfg.seed, static_cast<std::uint64_t>(stage), 0xb47c4});
  const auto t0 = std::chrono::steady_clock::now();

  StageResult out;
  bool have_best = false;
  double loss_acc = 0.0, grad_acc = 0.0;
  std::size_t acc_n = 0;
  for (std::size_t step = 1; step <= cfg.max_train_steps; ++step) {
    const std::vector<std::size_t> batch = sample_batch(data, cfg.batch_size, rng);
    GradMap grads;
    double loss = 0.0;
    try {
      loss = bc_gradient(params, pcfg, data, batch, grads);
    } catch (const NumericError& e) {
      std::string idx;
      for (std::size_t k = 0; k < batch.size() && k < 16; ++k) idx += (k ? "," : "") + std::to_string(batch[k]);
      throw NumericError("non-finite training value at stage " + std::to_string(stage) + " step " +
                         std::to_string(step) + " (batch indices " + idx + (batch.size() > 16 ? ",..." : "") +
                         "): " + e.what());
    }
    double gn = 0.0;
    for (const auto& [name, g] : grads)
      for (double v : g.data()) gn += v * v;
    adam_step(params, grads, adam, cfg.adam());
    loss_acc += loss;
    grad_acc += std::sqrt(gn);
    ++acc_n;

    if (step % cfg.eval_interval == 0 || step == cfg.max_train_steps) {
      MetricsRow row;
      row.stage = stage;
      row.step = step_offset + step;
      row.loss = loss_acc / static_cast<double>(acc_n);
      row.grad_norm = grad_acc / static_cast<double>(acc_n);
      row.batch_size = cfg.batch_size;
      row.sim_steps = cfg.sim_steps;
      row.success_rate = evaluate_params(params, pcfg, spec, cfg.eval_episodes, cfg.eval_seed_base, cfg.sim_steps);
      if (cfg.record_wall_clock)
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      loss_acc = grad_acc = 0.0;
      acc_n = 0;
      out.rows.push_back(row);
      if (hooks.on_metrics) hooks.on_metrics(row);
      if (!have_best || row.success_rate > out.best.best_score) {
        have_best = true;
        out.best.config = pcfg;
        out.best.params = params;
        out.best.adam = adam;
        out.best.step = row.step;
        out.best.best_score = row.success_rate;
        out.best.init_seed = init.init_seed;
        if (hooks.on_best) hooks.on_best(out.best);
      }
    }
  }
  out.final_params = std::move(params);
  return out;
}

struct TwoStageResult {
  Checkpoint best;
  Checkpoint stage1_best;
  std::vector<MetricsRow> rows;
  TrainConfig stage2_cfg;
};

/// Stage 1, then stage 2 from the stage-1 best under the scaled batch and
/// substep counts; returns the best checkpoint over both stages.
inline TwoStageResult run_two_stage(const TrainConfig& cfg1, const StageSchedule& sched, const PolicyConfig& pcfg,
                                    const TaskSpec& spec, const DemoDataset& data, const Checkpoint& init,
                                    const TrainHooks& hooks = {}) {
  TwoStageResult out;
  StageResult s1 = train_stage(cfg1, pcfg, spec, data, init, 1, 0, hooks);
  out.stage1_best = s1.best;
  out.stage2_cfg = finetune_schedule(cfg1, sched);
  Checkpoint reload = s1.best;
  reload.adam.reset();
  StageResult s2 = train_stage(out.stage2_cfg, pcfg, spec, data, reload, 2, cfg1.max_train_steps, hooks);
  out.rows = s1.rows;
  out.rows.insert(out.rows.end(), s2.rows.begin(), s2.rows.end());
  out.best = s2.best.best_score > s1.best.best_score ? s2.best : s1.best;
  return out;
}

inline Checkpoint fresh_checkpoint(const PolicyConfig& pcfg, std::uint64_t seed) {
  Checkpoint ck;
  ck.config = pcfg;
  ck.init_seed = seed;
  ck.params = init_policy_params(seed, pcfg);
  return ck;
}

}  // namespace gp2e
