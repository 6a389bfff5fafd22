// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>

#include "gp2e/checkpoint.hpp"
#include "gp2e/config.hpp"
#include "gp2e/demos.hpp"
#include "gp2e/gradcheck.hpp"
#include "gp2e/plot.hpp"
#include "gp2e/training.hpp"

namespace gp2e {

struct CommandError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string rate3(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", r);
  return buf;
}

inline void require_parent_dir(const std::filesystem::path& p) {
  const auto parent = p.parent_path();
  if (!parent.empty() && !std::filesystem::is_directory(parent))
    throw CommandError("directory " + parent.string() + " does not exist");
}

}  // namespace detail

inline int cmd_gen_demos(const RunConfig& cfg, std::ostream& out) {
  detail::require_parent_dir(cfg.paths.demos);
  const auto demos =
      generate_demos(cfg.task, cfg.demo_count, cfg.demo_seed_base, cfg.train.sim_steps, cfg.policy.n_points);
  write_demos(cfg.paths.demos, cfg.task.task, cfg.policy.n_points, demos);
  out << "wrote " << cfg.paths.demos.string() << " (" << demos.size() << " episodes)\n";
  return 0;
}

struct TrainOutcome {
  Checkpoint best;
  std::vector<MetricsRow> rows;
};

/// Checkpoints land in paths.checkpoints as best.ckpt (best over the whole
/// run, rewritten whenever it improves) and stage1_best.ckpt.
inline TrainOutcome train_from_config(const RunConfig& cfg) {
  const auto [header, demos] = read_demos(cfg.paths.demos);
  if (header.task != cfg.task.task)
    throw CommandError(cfg.paths.demos.string() + " holds " + to_string(header.task) + " demonstrations, config asks for " +
                       to_string(cfg.task.task));
  if (header.n_points != cfg.policy.n_points)
    throw CommandError(cfg.paths.demos.string() + " was generated with n_points " + std::to_string(header.n_points) +
                       ", config has " + std::to_string(cfg.policy.n_points));
  const DemoDataset data(demos);
  if (data.empty()) throw CommandError(cfg.paths.demos.string() + " contains no successful demonstrations");

  detail::require_parent_dir(cfg.paths.metrics);
  std::filesystem::create_directories(cfg.paths.checkpoints);
  MetricsLog log(cfg.paths.metrics);

  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  const Checkpoint init = fresh_checkpoint(cfg.policy, cfg.seed);

  std::optional<double> best_so_far;
  TrainHooks hooks;
  hooks.on_metrics = [&](const MetricsRow& r) { log.append(r); };
  hooks.on_best = [&](const Checkpoint& ck) {
    if (best_so_far && !(ck.best_score > *best_so_far)) return;
    best_so_far = ck.best_score;
    save_checkpoint(cfg.paths.checkpoints / "best.ckpt", ck);
  };

  TrainOutcome out;
  if (!cfg.two_stage) {
    StageResult r = train_stage(tc, cfg.policy, cfg.task, data, init, 1, 0, hooks);
    out.best = std::move(r.best);
    out.rows = std::move(r.rows);
  } else {
    const StageSchedule sched = cfg.finetune ? cfg.schedule : StageSchedule{1.0, 1.0};
    TwoStageResult r = run_two_stage(tc, sched, cfg.policy, cfg.task, data, init, hooks);
    save_checkpoint(cfg.paths.checkpoints / "stage1_best.ckpt", r.stage1_best);
    out.best = std::move(r.best);
    out.rows = std::move(r.rows);
  }
  return out;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const TrainOutcome r = train_from_config(cfg);
  int stage = 1;
  for (const auto& row : r.rows)
    if (row.step == r.best.step) stage = row.stage;
  out << "best success_rate " << detail::rate3(r.best.best_score) << " at step " << r.best.step << " (stage " << stage
      << "), metrics " << cfg.paths.metrics.string() << "\n";
  return 0;
}

inline double eval_from_config(const RunConfig& cfg, const std::optional<std::filesystem::path>& checkpoint,
                               bool expert) {
  if (expert)
    return evaluate(expert_policy(), false, cfg.task, cfg.eval_episodes, cfg.eval_seed_base, cfg.train.sim_steps,
                    cfg.policy.n_points);
  const auto path = checkpoint.value_or(cfg.paths.checkpoints / "best.ckpt");
  const Checkpoint ck = load_checkpoint(path);
  return evaluate_params(ck.params, ck.config, cfg.task, cfg.eval_episodes, cfg.eval_seed_base, cfg.train.sim_steps);
}

inline int cmd_eval(const RunConfig& cfg, const std::optional<std::filesystem::path>& checkpoint, bool expert,
                    std::ostream& out) {
  const double rate = eval_from_config(cfg, checkpoint, expert);
  out << "success_rate " << detail::rate3(rate) << " over " << cfg.eval_episodes << " episodes (seeds "
      << cfg.eval_seed_base << ".." << cfg.eval_seed_base + cfg.eval_episodes - 1 << ")\n";
  return 0;
}

inline int cmd_gradcheck(const GradCheckOptions& opt, std::ostream& out) {
  const GradCheckReport report = run_gradient_suite(opt);
  std::string offenders;
  char buf[256];
  for (const auto& r : report.results) {
    std::snprintf(buf, sizeof buf, "%-24s %-28s max_rel_error %.3e (%zu instances, %zu probes, skipped %zu kink %zu tiny)\n",
                  r.op.c_str(), r.input.c_str(), r.max_rel_error, r.instances, r.probes, r.kink_skips,
                  r.resolution_skips);
    out << buf;
    if (!(r.max_rel_error < opt.tolerance)) offenders += (offenders.empty() ? "" : ", ") + r.op + "/" + r.input;
  }
  out << "similarity matrices per forward: " << report.similarity_matrices_per_forward << "\n";
  if (report.similarity_matrices_per_forward != 1)
    offenders += std::string(offenders.empty() ? "" : ", ") + "similarity matrix count " +
                 std::to_string(report.similarity_matrices_per_forward);
  if (!offenders.empty()) throw CommandError("gradient check failed: " + offenders);
  return 0;
}

inline int cmd_plot(const std::filesystem::path& metrics_path, const std::filesystem::path& out_path,
                    std::ostream& out) {
  detail::require_parent_dir(out_path);
  const CurvePlot plot = plot_curve(parse_metrics(read_file(metrics_path), metrics_path.string()));
  atomic_write(out_path, plot.svg);
  out << plot.summary << ", plot " << out_path.string() << "\n";
  return 0;
}

}  // namespace gp2e
