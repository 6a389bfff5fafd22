#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "gp2e/checkpoint.hpp"

using namespace gp2e;

namespace {

std::filesystem::path tmp_path(const std::string& name) { return std::filesystem::path(GP2E_TEST_TMP) / name; }

PolicyConfig tiny() {
  PolicyConfig cfg;
  cfg.n_points = 12;
  cfg.channels = {8, 12, 16};
  cfg.d_k = 10;
  cfg.head_hidden = 6;
  cfg.bias_max_dist = 1.7;
  return cfg;
}

Checkpoint sample_checkpoint(bool with_adam) {
  Checkpoint ck;
  ck.config = tiny();
  ck.init_seed = 99;
  ck.params = init_policy_params(ck.init_seed, ck.config);
  std::mt19937_64 rng(3);
  for (auto& [n, t] : ck.params)
    for (double& v : t.data()) v += normal01(rng);
  ck.step = 1234;
  ck.best_score = 0.1 + 0.2;
  if (with_adam) {
    ck.adam = AdamState::zeros_like(ck.params);
    ck.adam->t = 17;
    for (auto& [n, t] : ck.adam->m)
      for (double& v : t.data()) v = normal01(rng);
    for (auto& [n, t] : ck.adam->v)
      for (double& v : t.data()) v = uniform01(rng);
  }
  return ck;
}

PointCloudObservation probe(std::size_t n) {
  std::mt19937_64 rng(5);
  PointCloudObservation obs;
  obs.points = Tensor(Shape{n, 6});
  for (double& v : obs.points.data()) v = uniform(rng, -0.5, 0.5);
  for (double& v : obs.robot_state.data()) v = uniform(rng, -0.5, 0.5);
  return obs;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const Checkpoint ck = sample_checkpoint(true);
  const auto path = tmp_path("roundtrip.ckpt");
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.step, ck.step);
  EXPECT_EQ(back.init_seed, ck.init_seed);
  EXPECT_EQ(std::bit_cast<std::uint64_t>(back.best_score), std::bit_cast<std::uint64_t>(ck.best_score));
  ASSERT_EQ(back.params.size(), ck.params.size());
  for (const auto& [name, t] : ck.params) EXPECT_TRUE(back.params.at(name).bit_equal(t)) << name;
  ASSERT_TRUE(back.adam.has_value());
  EXPECT_EQ(back.adam->t, 17u);
  for (const auto& [name, t] : ck.adam->m) EXPECT_TRUE(back.adam->m.at(name).bit_equal(t));
  for (const auto& [name, t] : ck.adam->v) EXPECT_TRUE(back.adam->v.at(name).bit_equal(t));
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".tmp"));
}

TEST(Checkpoint, ForwardIdenticalAfterReload) {
  const Checkpoint ck = sample_checkpoint(false);
  save_checkpoint(tmp_path("fwd.ckpt"), ck);
  const Checkpoint back = load_checkpoint(tmp_path("fwd.ckpt"));
  EXPECT_FALSE(back.adam.has_value());
  const auto obs = probe(ck.config.n_points);
  EXPECT_TRUE(act(obs, back.params, back.config).bit_equal(act(obs, ck.params, ck.config)));
}

TEST(Checkpoint, AblationAndLiteralModeConfigsSurvive) {
  Checkpoint ck = sample_checkpoint(false);
  ck.config.attention = false;
  ck.config.condensed_mode = CondensedMode::Eq2Literal198;
  ck.params = init_policy_params(1, ck.config);
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back.config, ck.config);
  EXPECT_TRUE(back.params.count("attn.w_g"));
}

TEST(Checkpoint, WrongVersionRejected) {
  std::string bytes = encode_checkpoint(sample_checkpoint(false));
  bytes[4] = 2;
  EXPECT_THROW(decode_checkpoint(bytes), CheckpointVersionError);
}

TEST(Checkpoint, BadMagicRejected) {
  std::string bytes = encode_checkpoint(sample_checkpoint(false));
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, TruncationDetectedAtEveryCut) {
  const std::string bytes = encode_checkpoint(sample_checkpoint(true));
  for (std::size_t cut : {std::size_t{0}, std::size_t{6}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      decode_checkpoint(std::string_view(bytes).substr(0, cut));
      ADD_FAILURE() << "cut " << cut << " accepted";
    } catch (const CheckpointVersionError&) {
      ADD_FAILURE() << "cut " << cut << " misreported as version error";
    } catch (const CheckpointError&) {
    }
  }
  EXPECT_THROW(decode_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 1)), CheckpointTruncatedError);
}

TEST(Checkpoint, ManifestShapeMismatchRejected) {
  Checkpoint ck = sample_checkpoint(false);
  ck.params.at("head.fc2.bias") = Tensor(Shape{5});
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(ck)), CheckpointManifestError);
  Checkpoint missing = sample_checkpoint(false);
  missing.params.erase("attn.bias_table");
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(missing)), CheckpointManifestError);
}

TEST(Checkpoint, Float32PayloadIsSmallerAndClose) {
  const Checkpoint ck = sample_checkpoint(false);
  const std::string f64 = encode_checkpoint(ck), f32 = encode_checkpoint(ck, PayloadDType::F32);
  EXPECT_LT(f32.size(), f64.size());
  const Checkpoint back = decode_checkpoint(f32);
  for (const auto& [name, t] : ck.params) EXPECT_LT(back.params.at(name).max_abs_diff(t), 1e-6);
}

TEST(Checkpoint, MissingFileIsCheckpointError) {
  EXPECT_THROW(load_checkpoint(tmp_path("does_not_exist.ckpt")), CheckpointError);
}

TEST(Checkpoint, EncodingIsDeterministic) {
  EXPECT_EQ(encode_checkpoint(sample_checkpoint(true)), encode_checkpoint(sample_checkpoint(true)));
}
