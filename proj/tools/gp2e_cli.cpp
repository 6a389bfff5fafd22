// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gp2e/cli.hpp"

namespace {

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GP2E point-cloud policy: demos, training, evaluation"};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  bool single_stage = false, no_attention = false, no_finetune = false, expert = false;
  app.add_option("--config", config_path, "INI run configuration (defaults when omitted)");
  app.add_option("--seed", seed, "overrides [run] seed");
  app.add_option("--checkpoint", checkpoint, "checkpoint for eval (default <checkpoints>/best.ckpt)");
  app.add_flag("--single-stage", single_stage, "train stage 1 only");
  app.add_flag("--no-attention", no_attention, "pointwise projection of P4 instead of guided attention");
  app.add_flag("--no-finetune", no_finetune, "stage 2 keeps the stage-1 batch size and substeps");
  app.add_flag("--expert", expert, "eval: score the scripted expert instead of a checkpoint");

  auto* gen = app.add_subcommand("gen-demos", "generate expert demonstrations");
  auto* train = app.add_subcommand("train", "behaviour cloning, one or two stages");
  auto* eval = app.add_subcommand("eval", "closed-loop success rate on held-out seeds");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  auto* plot = app.add_subcommand("plot", "SVG training curve from a metrics file");
  std::string metrics_in, svg_out;
  plot->add_option("metrics", metrics_in, "metrics CSV (default [paths] metrics)");
  plot->add_option("out", svg_out, "output SVG (default [paths] plot)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    gp2e::RunConfig cfg = config_path.empty() ? gp2e::RunConfig{} : gp2e::parse_config(config_path);
    if (seed) cfg.seed = *seed;
    if (single_stage) cfg.two_stage = false;
    if (no_attention) cfg.policy.attention = false;
    if (no_finetune) cfg.finetune = false;

    if (*gen) return gp2e::cmd_gen_demos(cfg, std::cout);
    if (*train) return gp2e::cmd_train(cfg, std::cout);
    if (*eval)
      return gp2e::cmd_eval(cfg, checkpoint.empty() ? std::nullopt : std::optional<std::filesystem::path>(checkpoint),
                            expert, std::cout);
    if (*grad) {
      gp2e::GradCheckOptions opt;
      if (seed) opt.seed = *seed;
      return gp2e::cmd_gradcheck(opt, std::cout);
    }
    if (*plot)
      return gp2e::cmd_plot(metrics_in.empty() ? cfg.paths.metrics : std::filesystem::path(metrics_in),
                            svg_out.empty() ? cfg.paths.plot : std::filesystem::path(svg_out), std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 1;
}
