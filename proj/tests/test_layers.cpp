#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "gp2e/layers.hpp"

using namespace gp2e;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(Shape{r, c});
  for (double& v : t.data()) v = scale * normal01(rng);
  return t;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& order) {
  Tensor out(x.shape());
  for (std::size_t r = 0; r < order.size(); ++r)
    for (std::size_t k = 0; k < x.dim(1); ++k) out(r, k) = x(order[r], k);
  return out;
}

}  // namespace

TEST(PointwiseLinear, IdentityWeightsReproduceInput) {
  std::mt19937_64 rng(1);
  const Tensor x = random_matrix(7, 6, rng);
  Tape tape;
  Var y = pointwise_linear(tape.constant(x), tape.constant(Tensor::identity(6)), tape.constant(Tensor(Shape{6})));
  EXPECT_TRUE(y.value().bit_equal(x));
}

TEST(PointwiseLinear, ZeroInputZeroBiasGivesZeros) {
  std::mt19937_64 rng(2);
  Tape tape;
  Var y = pointwise_linear(tape.constant(Tensor(Shape{5, 6})), tape.constant(random_matrix(6, 64, rng)),
                           tape.constant(Tensor(Shape{64})));
  EXPECT_TRUE(y.value().bit_equal(Tensor(Shape{5, 64})));
}

TEST(PointwiseLinear, FirstStageShape) {
  std::mt19937_64 rng(3);
  Tape tape;
  Var y = pointwise_linear(tape.constant(random_matrix(1200, 6, rng)), tape.constant(random_matrix(6, 64, rng)),
                           tape.constant(Tensor(Shape{64})));
  EXPECT_EQ(y.shape(), (Shape{1200, 64}));
}

TEST(PointwiseLinear, ChannelMismatchThrows) {
  Tape tape;
  EXPECT_THROW(pointwise_linear(tape.constant(Tensor(Shape{4, 5})), tape.constant(Tensor(Shape{6, 3})),
                                tape.constant(Tensor(Shape{3}))),
               DimensionError);
}

TEST(LayerNorm, ConstantRowMapsToZeros) {
  Tape tape;
  Var y = layer_norm(tape.constant(Tensor(Shape{2, 4}, 3.5)), tape.constant(Tensor(Shape{4}, 1.0)),
                     tape.constant(Tensor(Shape{4}, 0.0)));
  EXPECT_TRUE(y.value().bit_equal(Tensor(Shape{2, 4}, 0.0)));
}

TEST(LayerNorm, UnitVarianceRow) {
  Tape tape;
  Var y = layer_norm(tape.constant(Tensor::matrix({{1, -1}})), tape.constant(Tensor(Shape{2}, 1.0)),
                     tape.constant(Tensor(Shape{2}, 0.0)), 1e-12);
  EXPECT_NEAR(y.value()(0, 0), 1.0, 1e-9);
  EXPECT_NEAR(y.value()(0, 1), -1.0, 1e-9);
}

TEST(LayerNorm, NormalizesAcrossChannelsPerPoint) {
  std::mt19937_64 rng(4);
  Tape tape;
  Var y = layer_norm(tape.constant(random_matrix(6, 16, rng, 3.0)), tape.constant(Tensor(Shape{16}, 1.0)),
                     tape.constant(Tensor(Shape{16}, 0.0)));
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (double x : y.value().row(r)) m += x;
    m /= 16;
    for (double x : y.value().row(r)) v += (x - m) * (x - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-4);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const Tensor x = random_matrix(8, 16, rng);
  Tensor gamma(Shape{16}), beta(Shape{16});
  for (double& v : gamma.data()) v = 1.0 + 0.3 * normal01(rng);
  for (double& v : beta.data()) v = 0.3 * normal01(rng);
  const Tensor w = random_matrix(8, 16, rng);
  auto loss = [&](Tape& t, Var a, Var g, Var b) { return sum(mul(layer_norm(a, g, b), t.constant(w))); };
  Tape tape;
  Var vx = tape.parameter("x", x), vg = tape.parameter("g", gamma), vb = tape.parameter("b", beta);
  GradMap grads = tape.backward(loss(tape, vx, vg, vb));
  const std::vector<std::pair<std::string, const Tensor*>> inputs{{"x", &x}, {"g", &gamma}, {"b", &beta}};
  for (const auto& [name, t] : inputs) {
    auto f = [&, name = name](const Tensor& probe) {
      Tape tt(false);
      return loss(tt, tt.constant(name == "x" ? probe : x), tt.constant(name == "g" ? probe : gamma),
                  tt.constant(name == "b" ? probe : beta))
          .value()
          .item();
    };
    EXPECT_LT(max_relative_error(grads.at(name), finite_diff_grad(f, *t, 1e-5)), 1e-6) << name;
  }
}

TEST(Relu, Definition) {
  Tape tape;
  EXPECT_TRUE(relu(tape.constant(Tensor::vector({-1, 0, 2}))).value().bit_equal(Tensor::vector({0, 0, 2})));
  EXPECT_TRUE(relu(tape.constant(Tensor::vector({-1, -3, -0.5}))).value().bit_equal(Tensor::vector({0, 0, 0})));
}

TEST(Relu, SubgradientAtZeroIsZero) {
  Tape tape;
  Var x = tape.parameter("x", Tensor::vector({0.0, 1.0}));
  GradMap g = tape.backward(sum(relu(x)));
  EXPECT_TRUE(g.at("x").bit_equal(Tensor::vector({0.0, 1.0})));
}

TEST(Relu, Idempotent) {
  std::mt19937_64 rng(6);
  Tape tape;
  Var x = tape.constant(random_matrix(5, 5, rng));
  EXPECT_TRUE(relu(relu(x)).value().bit_equal(relu(x).value()));
}

TEST(Softmax, UniformRow) {
  Tape tape;
  Var y = softmax_rows(tape.constant(Tensor(Shape{1, 4}, 2.5)));
  for (double v : y.value().data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, SingleElement) {
  Tape tape;
  EXPECT_TRUE(softmax_rows(tape.constant(Tensor::matrix({{-7.0}}))).value().bit_equal(Tensor::matrix({{1.0}})));
}

TEST(Softmax, HandComputed) {
  Tape tape;
  Var y = softmax_rows(tape.constant(Tensor::matrix({{std::log(1.0), std::log(3.0)}})));
  EXPECT_NEAR(y.value()(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(y.value()(0, 1), 0.75, 1e-15);
}

TEST(Softmax, RowsAreDistributionsForLargeInputs) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    Var y = softmax_rows(tape.constant(random_matrix(6, 9, rng, 1e4 / 3.0)));
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0;
      for (double v : y.value().row(r)) {
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(InitParams, SameSeedBitIdentical) {
  ParamPlan plan{{"w", {6, 64}, ParamSpec::Init::FanInUniform, 6}, {"g", {64}, ParamSpec::Init::Ones, 1}};
  ParamStore a = init_params(42, plan), b = init_params(42, plan), c = init_params(43, plan);
  EXPECT_TRUE(a.at("w").bit_equal(b.at("w")));
  EXPECT_FALSE(a.at("w").bit_equal(c.at("w")));
}

TEST(InitParams, GammaOnesBetaZerosBiasZeros) {
  ParamPlan plan{{"ln.gamma", {8}, ParamSpec::Init::Ones, 1},
                 {"ln.beta", {8}, ParamSpec::Init::Zeros, 1},
                 {"fc.bias", {8}, ParamSpec::Init::Zeros, 1}};
  ParamStore s = init_params(1, plan);
  EXPECT_TRUE(s.at("ln.gamma").bit_equal(Tensor(Shape{8}, 1.0)));
  EXPECT_TRUE(s.at("ln.beta").bit_equal(Tensor(Shape{8}, 0.0)));
  EXPECT_TRUE(s.at("fc.bias").bit_equal(Tensor(Shape{8}, 0.0)));
}

TEST(InitParams, EmpiricalStdMatchesUniformMoments) {
  // U(-b, b) with b = sqrt(1/fan_in) has std b / sqrt(3).
  const std::size_t fan_in = 100;
  ParamPlan plan{{"w", {fan_in, 100}, ParamSpec::Init::FanInUniform, fan_in}};
  const Tensor w = init_params(9, plan).at("w");
  double mean = 0, var = 0;
  for (double v : w.data()) mean += v;
  mean /= static_cast<double>(w.size());
  for (double v : w.data()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(w.size()));
  const double expected = std::sqrt(1.0 / fan_in) / std::sqrt(3.0);
  EXPECT_NEAR(sd, expected, 0.2 * expected);
  const double bound = std::sqrt(1.0 / fan_in);
  for (double v : w.data()) EXPECT_LE(std::abs(v), bound);
}

TEST(Equivariance, PointwiseLayersCommuteWithPermutation) {
  std::mt19937_64 rng(8);
  const Tensor x = random_matrix(10, 6, rng);
  const Tensor w = random_matrix(6, 12, rng);
  const Tensor b = random_matrix(1, 12, rng).reshaped(Shape{12});
  auto stack = [&](const Tensor& in) {
    Tape t;
    Var h = pointwise_linear(t.constant(in), t.constant(w), t.constant(b));
    h = relu(layer_norm(h, t.constant(Tensor(Shape{12}, 1.0)), t.constant(Tensor(Shape{12}, 0.0))));
    return h.value();
  };
  const Tensor ref = stack(x);
  std::vector<std::size_t> order(10);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    EXPECT_TRUE(stack(permute_rows(x, order)).bit_equal(permute_rows(ref, order)));
  }
}
