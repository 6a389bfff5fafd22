#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "gp2e/training.hpp"

using namespace gp2e;

namespace {

std::filesystem::path tmp_path(const std::string& name) { return std::filesystem::path(GP2E_TEST_TMP) / name; }

PolicyConfig tiny_policy() {
  PolicyConfig cfg;
  cfg.n_points = 16;
  cfg.channels = {8, 12, 16};
  cfg.d_k = 16;
  cfg.head_hidden = 16;
  return cfg;
}

TaskSpec short_fill() {
  TaskSpec t;
  t.max_steps = 40;
  return t;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.batch_size = 4;
  c.sim_steps = 500;
  c.max_train_steps = 6;
  c.eval_interval = 3;
  c.eval_episodes = 2;
  c.seed = 11;
  return c;
}

const DemoDataset& tiny_dataset() {
  static const DemoDataset data(generate_demos(short_fill(), 3, 0, 500, tiny_policy().n_points));
  return data;
}

std::uint64_t param_hash(const ParamStore& p) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, t] : p)
    for (double v : t.data()) h = (h ^ std::bit_cast<std::uint64_t>(v)) * 1099511628211ull;
  return h;
}

double bc_loss_value(const Tensor& pred, const Tensor& target) {
  Tape tape(false);
  return bc_loss(tape.constant(pred), tape.constant(target)).value().item();
}

}  // namespace

TEST(BcLoss, Examples) {
  const Tensor a = Tensor::matrix({{0.3, -0.2}, {1.0, 0.5}});
  EXPECT_EQ(bc_loss_value(a, a), 0.0);
  EXPECT_DOUBLE_EQ(bc_loss_value(Tensor::matrix({{1, 0}}), Tensor::matrix({{0, 0}})), 0.5);
  EXPECT_DOUBLE_EQ(bc_loss_value(Tensor::matrix({{1}, {3}}), Tensor::matrix({{0}, {0}})), 5.0);
  EXPECT_THROW(bc_loss_value(Tensor::matrix({{1, 2}}), Tensor::matrix({{1}, {2}})), DimensionError);
}

TEST(BcLoss, GradientPointsTowardTarget) {
  Tape tape;
  Var p = tape.parameter("p", Tensor::matrix({{2.0, -1.0}}));
  GradMap g = tape.backward(bc_loss(p, tape.constant(Tensor::matrix({{0.0, 0.0}}))));
  EXPECT_DOUBLE_EQ(g.at("p")(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(g.at("p")(0, 1), -1.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParamStore p{{"x", Tensor::scalar(0.7)}};
  AdamState s;
  adam_step(p, {{"x", Tensor::scalar(1.0)}}, s, AdamConfig{});
  EXPECT_NEAR(p.at("x").item() - 0.7, -0.0003, 1e-10);
  EXPECT_EQ(s.t, 1u);
}

TEST(Adam, ZeroGradientLeavesParametersButAdvancesStep) {
  ParamStore p{{"w", Tensor::vector({1, 2, 3})}};
  AdamState s;
  adam_step(p, {{"w", Tensor(Shape{3})}}, s, AdamConfig{});
  adam_step(p, {{"w", Tensor(Shape{3})}}, s, AdamConfig{});
  EXPECT_TRUE(p.at("w").bit_equal(Tensor::vector({1, 2, 3})));
  EXPECT_EQ(s.t, 2u);
}

TEST(Adam, MinimisesParabola) {
  // Scalar reference run on f(x) = x^2 from x = 1 with lr 0.1.
  ParamStore p{{"x", Tensor::scalar(1.0)}};
  AdamState s;
  AdamConfig cfg;
  cfg.lr = 0.1;
  double prev = 1.0;
  for (int k = 1; k <= 50; ++k) {
    adam_step(p, {{"x", Tensor::scalar(2.0 * p.at("x").item())}}, s, cfg);
    const double x = std::abs(p.at("x").item());
    if (k <= 8) {
      EXPECT_LT(x, prev) << "step " << k;
    }
    prev = x;
  }
  EXPECT_LT(prev, 0.5);
}

TEST(Adam, MissingGradientIsContractError) {
  ParamStore p{{"a", Tensor::scalar(1)}, {"b", Tensor::scalar(2)}};
  AdamState s;
  EXPECT_THROW(adam_step(p, {{"a", Tensor::scalar(1)}}, s, AdamConfig{}), ContractError);
  EXPECT_EQ(s.t, 0u);
}

TEST(SampleBatch, DeterministicAndUniform) {
  Demonstration d;
  d.success = true;
  for (int k = 0; k < 10; ++k) {
    d.observations.emplace_back();
    d.actions.push_back(Tensor(Shape{4}, k));
  }
  DemoDataset data({d});
  ASSERT_EQ(data.steps(), 10u);
  std::mt19937_64 r1(3), r2(3);
  EXPECT_EQ(sample_batch(data, 50, r1), sample_batch(data, 50, r2));

  std::mt19937_64 rng(4);
  std::vector<std::size_t> counts(10, 0);
  for (std::size_t i : sample_batch(data, 100000, rng)) ++counts[i];
  for (std::size_t c : counts) EXPECT_NEAR(static_cast<double>(c), 10000.0, 500.0);
  EXPECT_THROW(sample_batch(DemoDataset{}, 4, rng), ContractError);
}

TEST(Dataset, OnlySuccessfulDemosEnter) {
  Demonstration ok, bad;
  ok.success = true;
  bad.success = false;
  for (auto* d : {&ok, &bad}) {
    d->observations.resize(3);
    d->actions.assign(3, Tensor(Shape{4}));
  }
  DemoDataset data({ok, bad});
  EXPECT_EQ(data.demos().size(), 1u);
  EXPECT_EQ(data.steps(), 3u);
  Demonstration empty;
  empty.success = true;
  EXPECT_THROW(DemoDataset({empty}), ContractError);
}

TEST(FinetuneSchedule, ScalesAndRounding) {
  TrainConfig c;
  const TrainConfig s2 = finetune_schedule(c, {});
  EXPECT_EQ(s2.batch_size, 205u);
  EXPECT_EQ(s2.sim_steps, 450u);
  EXPECT_EQ(s2.learning_rate, c.learning_rate);
  const TrainConfig s3 = finetune_schedule(s2, {});
  EXPECT_EQ(s3.batch_size, 164u);
  EXPECT_EQ(s3.sim_steps, 405u);
  TrainConfig one;
  one.batch_size = 1;
  one.sim_steps = 1;
  const TrainConfig clamped = finetune_schedule(one, {});
  EXPECT_EQ(clamped.batch_size, 1u);
  EXPECT_EQ(clamped.sim_steps, 1u);
  EXPECT_THROW(finetune_schedule(c, StageSchedule{0.0, 0.9}), ContractError);
}

TEST(DemoFile, RoundTripAndDeterminism) {
  const auto demos = generate_demos(short_fill(), 2, 0, 500, 16);
  ASSERT_EQ(demos.size(), 2u);
  const std::string bytes = encode_demos(Task::ToyFill, 16, demos);
  EXPECT_EQ(bytes, encode_demos(Task::ToyFill, 16, generate_demos(short_fill(), 2, 0, 500, 16)));
  const auto [header, back] = decode_demos(bytes);
  EXPECT_EQ(header.task, Task::ToyFill);
  EXPECT_EQ(header.n_points, 16u);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(back[e].seed, demos[e].seed);
    ASSERT_EQ(back[e].size(), demos[e].size());
    for (std::size_t s = 0; s < demos[e].size(); ++s) {
      EXPECT_LT(back[e].observations[s].points.max_abs_diff(demos[e].observations[s].points), 1e-6);
      EXPECT_LT(back[e].actions[s].max_abs_diff(demos[e].actions[s]), 1e-7);
    }
  }
  EXPECT_THROW(decode_demos(std::string_view(bytes).substr(0, bytes.size() - 3)), DemoFormatError);
  std::string bad = bytes;
  bad[0] = 'Q';
  EXPECT_THROW(decode_demos(bad), DemoFormatError);
}

TEST(DemoFile, EmptyFileIsValidButUntrainable) {
  const auto path = tmp_path("empty.demos");
  write_demos(path, Task::ToyPour, 16, {});
  const auto [header, demos] = read_demos(path);
  EXPECT_EQ(header.task, Task::ToyPour);
  EXPECT_TRUE(demos.empty());
  DemoDataset data(demos);
  EXPECT_THROW(train_stage(tiny_train(), tiny_policy(), short_fill(), data, fresh_checkpoint(tiny_policy(), 1), 1),
               ContractError);
}

TEST(DemoFile, GenerationFailsWhenSeedsRunOut) {
  TaskSpec impossible = short_fill();
  impossible.max_steps = 2;
  EXPECT_THROW(generate_demos(impossible, 2, 0, 500, 16), ContractError);
}

TEST(Evaluate, ExpertSucceedsNullPolicyFails) {
  const TaskSpec spec = short_fill();
  EXPECT_EQ(evaluate(expert_policy(), false, spec, 20, 500, 500, 16), 1.0);
  const PolicyFn null = [](const PointCloudObservation&, const EnvState&) { return Tensor(Shape{4}); };
  EXPECT_EQ(evaluate(null, false, spec, 20, 500, 500, 16), 0.0);
}

TEST(Evaluate, DeterministicAndPure) {
  const PolicyConfig pcfg = tiny_policy();
  const ParamStore params = init_policy_params(5, pcfg);
  const std::uint64_t before = param_hash(params);
  TaskSpec spec = short_fill();
  spec.max_steps = 10;
  const double a = evaluate_params(params, pcfg, spec, 3, 77, 500);
  const double b = evaluate_params(params, pcfg, spec, 3, 77, 500);
  EXPECT_EQ(a, b);
  EXPECT_EQ(param_hash(params), before);
}

TEST(TrainStage, SingleFinalEvaluationWhenIntervalExceedsSteps) {
  TrainConfig c = tiny_train();
  c.eval_interval = 100;
  const StageResult r =
      train_stage(c, tiny_policy(), short_fill(), tiny_dataset(), fresh_checkpoint(tiny_policy(), 1), 1);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].step, c.max_train_steps);
}

TEST(TrainStage, DeterministicMetricsAndBestSelection) {
  const auto run = [] {
    return train_stage(tiny_train(), tiny_policy(), short_fill(), tiny_dataset(), fresh_checkpoint(tiny_policy(), 2),
                       1);
  };
  const StageResult a = run(), b = run();
  ASSERT_EQ(a.rows.size(), 2u);
  for (std::size_t i = 0; i < a.rows.size(); ++i)
    EXPECT_EQ(format_metrics_row(a.rows[i]), format_metrics_row(b.rows[i]));
  double best = 0.0;
  for (const auto& r : a.rows) best = std::max(best, r.success_rate);
  EXPECT_EQ(a.best.best_score, best);
  for (const auto& [name, t] : a.final_params) EXPECT_TRUE(t.bit_equal(b.final_params.at(name)));
}

TEST(TrainStage, LossDecreasesOnTinyDataset) {
  TrainConfig c = tiny_train();
  c.learning_rate = 1e-3;
  c.max_train_steps = 200;
  c.eval_interval = 100;
  c.eval_episodes = 1;
  const PolicyConfig pcfg = tiny_policy();
  const Checkpoint init = fresh_checkpoint(pcfg, 3);
  const double before = dataset_loss(init.params, pcfg, tiny_dataset());
  const StageResult r = train_stage(c, pcfg, short_fill(), tiny_dataset(), init, 1);
  EXPECT_LT(dataset_loss(r.final_params, pcfg, tiny_dataset()), 0.5 * before);
}

TEST(TwoStage, ReloadFidelityAndScheduledMetrics) {
  TrainConfig c = tiny_train();
  c.batch_size = 10;
  std::vector<ParamStore> starts;
  TrainHooks hooks;
  hooks.on_stage_start = [&](int, const ParamStore& p) { starts.push_back(p); };
  const PolicyConfig pcfg = tiny_policy();
  const TwoStageResult r = run_two_stage(c, {}, pcfg, short_fill(), tiny_dataset(), fresh_checkpoint(pcfg, 4), hooks);
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_EQ(r.rows[0].stage, 1);
  EXPECT_EQ(r.rows[2].stage, 2);
  EXPECT_EQ(r.rows[2].batch_size, 8u);
  EXPECT_EQ(r.rows[2].sim_steps, 450u);
  EXPECT_EQ(r.rows[3].step, 12u);

  ASSERT_EQ(starts.size(), 2u);
  const PointCloudObservation probe = tiny_dataset().observation(0);
  for (const auto& [name, t] : r.stage1_best.params) EXPECT_TRUE(starts[1].at(name).bit_equal(t)) << name;
  EXPECT_TRUE(act(probe, starts[1], pcfg).bit_equal(act(probe, r.stage1_best.params, pcfg)));

  double best = 0.0;
  for (const auto& row : r.rows) best = std::max(best, row.success_rate);
  EXPECT_EQ(r.best.best_score, best);
  EXPECT_GE(r.best.best_score, r.stage1_best.best_score);
}

TEST(MetricsLog, WritesHeaderAndRejectsOutOfOrderRows) {
  const auto path = tmp_path("metrics.csv");
  MetricsLog log(path);
  log.append({1, 10, 0.5, 0.25, 0.0, 256, 500, 1.5});
  log.append({2, 20, 0.25, 0.5, 0.0, 205, 450, 1.0});
  EXPECT_THROW(log.append({1, 30, 0.1, 0.1, 0.0, 1, 1, 1.0}), ContractError);
  EXPECT_EQ(read_file(path), std::string(kMetricsHeader) + "\n1,10,0.5,0.2500,0.000,256,500,1.5\n" +
                                 "2,20,0.25,0.5000,0.000,205,450,1\n");
}
