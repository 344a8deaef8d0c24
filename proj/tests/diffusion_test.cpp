#include "mode/diffusion.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mode/error.hpp"

namespace mode {
namespace {

NoiseSchedule schedule_with(std::size_t steps) {
  NoiseSchedule s;
  s.num_sample_steps = steps;
  return s;
}

TEST(SigmaGrid, TwoStepsAreTheEndpoints) {
  auto g = make_sigma_grid(schedule_with(2));
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[0], 80.0);
  EXPECT_EQ(g[1], 0.001);
}

TEST(SigmaGrid, ThreeStepsMiddleIsGeometricMean) {
  auto g = make_sigma_grid(schedule_with(3));
  EXPECT_NEAR(g[1], std::sqrt(80.0 * 0.001), 1e-12);
  EXPECT_NEAR(g[1], 0.282842, 1e-6);
}

TEST(SigmaGrid, TenStepsHaveConstantRatio) {
  auto g = make_sigma_grid(schedule_with(10));
  const double ratio = g[1] / g[0];
  for (std::size_t i = 1; i < g.size(); ++i) {
    EXPECT_LT(g[i], g[i - 1]);
    EXPECT_NEAR(g[i] / g[i - 1], ratio, 1e-12);
  }
}

TEST(SigmaGrid, RejectsDegenerateSchedules) {
  EXPECT_THROW(make_sigma_grid(schedule_with(1)), ConfigError);
  NoiseSchedule bad;
  bad.sigma_min = 100.0;
  EXPECT_THROW(make_sigma_grid(bad), ConfigError);
}

TEST(Precondition, SigmaEqualsSigmaData) {
  auto c = precondition(0.5, 0.5);
  EXPECT_NEAR(c.c_skip, 0.5, 1e-12);
  EXPECT_NEAR(c.c_out, 0.353553, 1e-6);
  EXPECT_NEAR(c.c_in, 1.414214, 1e-6);
  EXPECT_NEAR(c.c_noise, -0.173287, 1e-6);
}

TEST(Precondition, SmallSigmaLimit) {
  auto c = precondition(1e-9, 0.5);
  EXPECT_NEAR(c.c_skip, 1.0, 1e-12);
  EXPECT_NEAR(c.c_out, 0.0, 1e-8);
  EXPECT_NEAR(c.c_in, 2.0, 1e-12);
}

TEST(Precondition, LargeSigma) {
  auto c = precondition(80.0, 0.5);
  EXPECT_NEAR(c.c_skip, 0.25 / 6400.25, 1e-15);
  EXPECT_NEAR(c.c_skip, 3.9061e-5, 1e-9);
}

TEST(Precondition, NonPositiveSigmaIsDomainError) {
  EXPECT_THROW(precondition(0.0, 0.5), DomainError);
  EXPECT_THROW(precondition(-1.0, 0.5), DomainError);
}

TEST(TrainingSigma, LowerEndpoint) {
  NoiseSchedule s;
  EXPECT_NEAR(training_sigma_from_unit(0.0, s), s.sigma_min, 1e-15);
  EXPECT_NEAR(training_sigma_from_unit(1.0, s), s.sigma_max, 1e-12);
}

TEST(TrainingSigma, LogMeanMatchesMidpoint) {
  NoiseSchedule s;
  Rng rng(2024);
  double acc = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double sigma = sample_training_sigma(rng, s);
    ASSERT_GE(sigma, s.sigma_min);
    ASSERT_LE(sigma, s.sigma_max);
    acc += std::log(sigma);
  }
  const double mid = 0.5 * (std::log(s.sigma_min) + std::log(s.sigma_max));
  EXPECT_LE(std::abs(acc / n - mid), 0.02 * std::abs(mid));
}

TEST(TrainingSigma, SameSeedSameSequence) {
  NoiseSchedule s;
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_training_sigma(a, s), sample_training_sigma(b, s));
}

Tensor random_actions(std::size_t batch, Rng& rng) {
  Tensor a({batch, 10, 2});
  for (double& v : a.flat()) v = rng.normal();
  return a;
}

TEST(SmLoss, OracleDenoiserHasZeroLoss) {
  NoiseSchedule s;
  Rng data(1);
  Tensor clean = random_actions(4, data);
  Rng rng(3);
  Tape tape;
  auto out = sm_loss(tape, [&](Tape& t, const Tensor&, const std::vector<double>&) {
    return t.constant(clean.reshaped({40, 2}));
  }, clean, s, rng);
  EXPECT_EQ(out.loss.value()[0], 0.0);
}

TEST(SmLoss, ZeroDenoiserOnZeroActionsIsZero) {
  NoiseSchedule s;
  Tensor clean({3, 10, 2});
  Rng rng(4);
  Tape tape;
  auto out = sm_loss(tape, [&](Tape& t, const Tensor& x, const std::vector<double>&) {
    return t.constant(Tensor({x.size() / 2, 2}));
  }, clean, s, rng);
  EXPECT_EQ(out.loss.value()[0], 0.0);
}

TEST(SmLoss, IdentityDenoiserOnZeroActionsGivesWeightedNoiseEnergy) {
  NoiseSchedule s;
  Tensor clean({3, 10, 2});
  Rng rng(4);
  Tape tape;
  auto out = sm_loss(tape, [&](Tape& t, const Tensor& x, const std::vector<double>&) {
    return t.constant(x.reshaped({x.size() / 2, 2}));
  }, clean, s, rng);

  // Replay the stream: one sigma then 20 noise draws per element.
  Rng replay(4);
  double expected = 0.0;
  for (int b = 0; b < 3; ++b) {
    const double sigma = sample_training_sigma(replay, s);
    double energy = 0.0;
    for (int i = 0; i < 20; ++i) {
      const double eps = sigma * replay.normal();
      energy += eps * eps;
    }
    expected += sm_loss_weight(sigma, s.sigma_data) * energy / 20.0;
  }
  expected /= 3.0;
  EXPECT_NEAR(out.loss.value()[0], expected, 1e-12 * expected);
}

TEST(SmLoss, FixedSeedIsBitwiseReproducible) {
  NoiseSchedule s;
  Rng data(8);
  Tensor clean = random_actions(5, data);
  auto run = [&] {
    Rng rng(21);
    Tape tape;
    return sm_loss(tape, [](Tape& t, const Tensor& x, const std::vector<double>&) {
      Tensor y = x.reshaped({x.size() / 2, 2});
      for (double& v : y.flat()) v = std::tanh(v);
      return t.constant(y);
    }, clean, s, rng).loss.value()[0];
  };
  EXPECT_EQ(run(), run());
}

// F(x, s) = tanh(x) as network; D = c_skip x + c_out F through the skip path.
TEST(SmLoss, NetworkFormMatchesDenoiserForm) {
  NoiseSchedule s;
  Rng data(8);
  Tensor clean = random_actions(7, data);
  auto network = [](const Tensor& x) {
    Tensor y = x.reshaped({x.size() / 2, 2});
    for (double& v : y.flat()) v = std::tanh(v);
    return y;
  };
  Rng r1(21), r2(21);
  Tape t1(false), t2(false);
  auto raw = sm_loss_network(t1, [&](Tape& t, const Tensor& x, const std::vector<double>&) {
    return t.constant(network(x));
  }, clean, s, r1);
  auto full = sm_loss(t2, [&](Tape& t, const Tensor& x, const std::vector<double>& sigmas) {
    Tensor y = network(x);
    const std::size_t per = y.rows() / sigmas.size();
    Tensor flat_x = x.reshaped(y.shape());
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const auto c = precondition(sigmas[r / per], s.sigma_data);
      for (std::size_t k = 0; k < 2; ++k) y.at(r, k) = c.c_skip * flat_x.at(r, k) + c.c_out * y.at(r, k);
    }
    return t.constant(y);
  }, clean, s, r2);
  EXPECT_EQ(raw.sigmas, full.sigmas);
  EXPECT_NEAR(raw.loss.value()[0], full.loss.value()[0], 1e-9 * full.loss.value()[0]);
}

TEST(SmLoss, WeightIsInverseSquaredOutputScale) {
  for (double sigma : {0.001, 0.5, 80.0}) {
    const double c_out = precondition(sigma, 0.5).c_out;
    EXPECT_NEAR(sm_loss_weight(sigma, 0.5) * c_out * c_out, 1.0, 1e-12);
  }
}

TEST(Ddim, ConstantDenoiserReturnsConstantExactly) {
  NoiseSchedule s;
  Tensor target = Tensor::matrix(2, 2, {0.125, -3.5, 7.0, 1e-3});
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    Tensor out = ddim_sample([&](const Tensor&, double, std::size_t) { return target; }, {2, 2}, s, rng);
    EXPECT_EQ(out, target);
  }
}

TEST(Ddim, SingleEulerStep) {
  Tensor x = Tensor::vector({2.0});
  ddim_step(x, Tensor::vector({0.0}), 1.0, 0.5);
  EXPECT_DOUBLE_EQ(x[0], 1.0);
}

// Closed-form probability-flow solution for data ~ N(0, sd^2):
// x(s) = x_T sqrt(sd^2 + s^2) / sqrt(sd^2 + s_max^2).
double linear_gaussian_exact(double x_t, double s_max, double sd) {
  return x_t * sd / std::sqrt(sd * sd + s_max * s_max);
}

TEST(Ddim, LinearGaussianErrorShrinksWithMoreSteps) {
  const double sd = 0.5;
  auto oracle = [sd](const Tensor& x, double sigma, std::size_t) {
    Tensor y = x;
    for (double& v : y.flat()) v *= sd * sd / (sd * sd + sigma * sigma);
    return y;
  };
  double previous = INFINITY;
  for (std::size_t steps : {5u, 10u, 20u, 40u, 80u}) {
    Tensor x = Tensor::vector({80.0});
    Tensor out = ddim_integrate(oracle, x, make_sigma_grid(schedule_with(steps)));
    const double err = std::abs(out[0] - linear_gaussian_exact(80.0, 80.0, sd));
    EXPECT_LT(err, previous) << steps;
    previous = err;
  }
}

TEST(Ddim, PureUnderFixedSeed) {
  NoiseSchedule s;
  auto d = [](const Tensor& x, double sigma, std::size_t) {
    Tensor y = x;
    for (double& v : y.flat()) v = std::sin(v) / (1.0 + sigma);
    return y;
  };
  Rng a(5), b(5);
  EXPECT_EQ(ddim_sample(d, {3, 2}, s, a), ddim_sample(d, {3, 2}, s, b));
}

TEST(Ddim, NonFiniteStateReportsStep) {
  NoiseSchedule s;
  Rng rng(1);
  try {
    ddim_sample([](const Tensor& x, double, std::size_t step) {
      Tensor y = x;
      if (step == 3) y[0] = NAN;
      return y;
    }, {2}, s, rng);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 3"), std::string::npos);
  }
}

}  // namespace
}  // namespace mode
