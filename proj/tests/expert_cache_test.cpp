#include "mode/expert_cache.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "mode/error.hpp"

namespace mode {
namespace {

ModelConfig small_config(std::size_t layers = 2, std::size_t experts = 4, std::size_t k = 2) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = layers;
  c.n_heads = 2;
  c.n_experts = experts;
  c.topk = k;
  return c;
}

// Router weights large enough that different noise levels pick different
// experts.
void sharpen_routers(MoDEModel& m) {
  for (std::size_t l = 0; l < m.config().n_layers; ++l) {
    const std::size_t idx = m.layer(l).w_router;
    if (idx == MoDEModel::npos) continue;
    for (double& v : m.param(idx).value.flat()) v *= 100.0;
  }
}

DenoiserInput random_input(const ModelConfig& c, std::size_t batch, Rng& rng) {
  DenoiserInput in;
  in.noisy_actions = Tensor({batch, c.chunk_len, c.action_dim});
  in.states = Tensor({batch, c.history_len, c.state_dim});
  in.goals = Tensor({batch, c.goal_dim});
  for (Tensor* t : {&in.noisy_actions, &in.states, &in.goals})
    for (double& v : t->flat()) v = rng.normal();
  return in;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(RouteTable, OneLayerTwoLevelsHasTwoEntries) {
  ModelConfig c = small_config(1, 2, 1);
  c.schedule.num_sample_steps = 2;
  MoDEModel m(c, 1);
  RouteTable t = precompute_routes(m);
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.grid().size(), 2u);
  EXPECT_EQ(t.grid().front(), 80.0);
  EXPECT_EQ(t.grid().back(), 0.001);
}

TEST(RouteTable, EntriesEqualForwardRouting) {
  ModelConfig c = small_config(3, 4, 2);
  MoDEModel m(c, 4);
  sharpen_routers(m);
  RouteTable t = precompute_routes(m);
  Rng rng(2);
  auto in = random_input(c, 1, rng);
  std::size_t distinct = 0;
  for (std::size_t i = 0; i < t.levels(); ++i) {
    Tape tape(false);
    auto r = m.forward(tape, in, {t.grid()[i]}, {});
    ASSERT_EQ(r.routes.size(), c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const auto& d = r.routes[l].decision;
      const auto& e = t.at(l, i);
      EXPECT_EQ(e.selected, d.selected[0]);
      ASSERT_EQ(e.weights.size(), d.weights.size());
      for (std::size_t k = 0; k < e.weights.size(); ++k) EXPECT_EQ(e.weights[k], d.weights[k]);
      if (e.selected != t.at(l, 0).selected) ++distinct;
    }
  }
  EXPECT_GT(distinct, 0u);  // the check is not vacuous
}

TEST(RouteTable, ZeroRouterPicksExpertZeroEverywhere) {
  ModelConfig c = small_config(2, 4, 1);
  MoDEModel m(c, 4);
  for (std::size_t l = 0; l < 2; ++l) m.param(m.layer(l).w_router).value.fill(0.0);
  RouteTable t = precompute_routes(m);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < t.levels(); ++i) {
      EXPECT_EQ(t.at(l, i).selected, std::vector<std::size_t>{0});
      EXPECT_EQ(t.at(l, i).weights[0], 1.0);
    }
}

TEST(RouteTable, TokenRoutingCannotBePrecomputed) {
  ModelConfig c = small_config();
  c.routing_mode = RoutingMode::token_only;
  MoDEModel m(c, 1);
  EXPECT_THROW(precompute_routes(m), ConfigError);
}

TEST(RouteTable, OutOfRangeLookupIsDomainError) {
  MoDEModel m(small_config(), 1);
  RouteTable t = precompute_routes(m);
  EXPECT_THROW(t.at(2, 0), DomainError);
  EXPECT_THROW(t.at(0, 10), DomainError);
}

TEST(Fusion, SingleExpertEqualsExpertForward) {
  ModelConfig c = small_config(1, 4, 1);
  MoDEModel m(c, 3);
  sharpen_routers(m);
  auto cache = build_expert_cache(m);
  Rng rng(5);
  Tensor x({7, c.d_model});
  for (double& v : x.flat()) v = rng.normal();
  for (std::size_t i = 0; i < cache.levels(); ++i) {
    const FusedExpert& f = cache.fused(0, i);
    ASSERT_EQ(f.experts.size(), 1u);
    EXPECT_EQ(f.weights[0], 1.0);
    Tape t(false);
    Tensor ref = expert_forward(m.expert_vars(t, 0)[f.experts[0]], t.constant(x)).value();
    EXPECT_LE(max_abs_diff(f.apply(x), ref), 1e-12);
  }
}

// E1 = 2 E0 by doubling W_down; equal weights then give 1.5 E0.
TEST(Fusion, LinearityOfTheMixture) {
  ModelConfig c = small_config(1, 2, 2);
  MoDEModel m(c, 3);
  const auto& e = m.layer(0).experts;
  m.param(e[1].w_gate).value = m.param(e[0].w_gate).value;
  m.param(e[1].w_up).value = m.param(e[0].w_up).value;
  m.param(e[1].w_down).value = m.param(e[0].w_down).value;
  for (double& v : m.param(e[1].w_down).value.flat()) v *= 2.0;
  m.param(m.layer(0).w_router).value.fill(0.0);  // uniform: weights 0.5, 0.5
  auto cache = build_expert_cache(m);
  Rng rng(5);
  Tensor x({9, c.d_model});
  for (double& v : x.flat()) v = rng.normal();
  Tape t(false);
  Tensor e0 = expert_forward(m.expert_vars(t, 0)[0], t.constant(x)).value();
  Tensor fused = cache.fused(0, 3).apply(x);
  EXPECT_EQ(cache.fused(0, 3).weights, (std::vector<double>{0.5, 0.5}));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(fused[i], 1.5 * e0[i], 1e-12);
}

TEST(Fusion, MatchesDynamicMixtureOnRandomInputs) {
  ModelConfig c = small_config(2, 4, 2);
  MoDEModel m(c, 8);
  sharpen_routers(m);
  auto cache = build_expert_cache(m);
  Rng rng(6);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t level = static_cast<std::size_t>(trial) % cache.levels();
    const std::size_t layer = static_cast<std::size_t>(trial) % 2;
    Tensor x({c.tokens(), c.d_model});
    for (double& v : x.flat()) v = rng.normal();
    Tape t(false);
    Var phi = m.noise_tokens(t, {cache.table().grid()[level]});
    RoutedLayer r = route(phi, t.constant(m.param(m.layer(layer).w_router).value), c.topk, Phase::infer, nullptr,
                          c.tokens());
    Tensor dyn = moe_forward(t.constant(x), &r, m.expert_vars(t, layer), false).value();
    worst = std::max(worst, max_abs_diff(cache.fused(layer, level).apply(x), dyn));
  }
  EXPECT_LE(worst, 1e-9);
}

class CachedModes : public ::testing::TestWithParam<RoutingMode> {};

TEST_P(CachedModes, CachedForwardEqualsDynamicAtEveryLevel) {
  ModelConfig c = small_config(2, 4, 2);
  c.routing_mode = GetParam();
  MoDEModel m(c, 12);
  sharpen_routers(m);
  auto cache = build_expert_cache(m);
  Rng rng(3);
  auto in = random_input(c, 5, rng);
  for (std::size_t i = 0; i < cache.levels(); ++i)
    EXPECT_LE(max_abs_diff(cached_forward(m, cache, in, i), m.denoise(in, cache.table().grid()[i])), 1e-9)
        << "level " << i;
}

TEST_P(CachedModes, RolloutsAgree) {
  ModelConfig c = small_config(2, 4, 2);
  c.routing_mode = GetParam();
  MoDEModel m(c, 12);
  sharpen_routers(m);
  auto cache = build_expert_cache(m);
  auto report = verify_equivalence(m, cache, 30, 9);
  EXPECT_EQ(report.trials, 30u);
  EXPECT_TRUE(report.passed()) << report.max_abs_diff;
}

INSTANTIATE_TEST_SUITE_P(Routing, CachedModes,
                         ::testing::Values(RoutingMode::noise_only, RoutingMode::shared_expert, RoutingMode::dense),
                         [](const auto& info) { return to_string(info.param); });

TEST(CachedForward, ZeroModelLeavesSkipPath) {
  ModelConfig c = small_config();
  MoDEModel m(c, 2);
  for (Parameter& p : m.parameters()) p.value.fill(0.0);
  auto cache = build_expert_cache(m);
  Rng rng(1);
  auto in = random_input(c, 3, rng);
  for (std::size_t i : {0u, 5u, 9u}) {
    const double c_skip = precondition(cache.table().grid()[i], c.schedule.sigma_data).c_skip;
    Tensor a = cached_forward(m, cache, in, i);
    Tensor b = m.denoise(in, cache.table().grid()[i]);
    for (std::size_t e = 0; e < a.size(); ++e) {
      EXPECT_NEAR(a[e], c_skip * in.noisy_actions[e], 1e-15);
      EXPECT_NEAR(b[e], c_skip * in.noisy_actions[e], 1e-15);
    }
  }
}

TEST(CachedForward, LevelOutOfRangeIsDomainError) {
  MoDEModel m(small_config(), 2);
  auto cache = build_expert_cache(m);
  Rng rng(1);
  EXPECT_THROW(cached_forward(m, cache, random_input(m.config(), 1, rng), 10), DomainError);
}

TEST(Staleness, PerturbedRouterInvalidatesCache) {
  MoDEModel m(small_config(), 2);
  auto cache = build_expert_cache(m);
  EXPECT_TRUE(verify_equivalence(m, cache, 2, 1).passed());
  m.param(m.layer(1).w_router).value[3] += 1e-3;
  Rng rng(1);
  EXPECT_THROW(cached_forward(m, cache, random_input(m.config(), 1, rng), 0), ValidationError);
  EXPECT_THROW(verify_equivalence(m, cache, 2, 1), ValidationError);
}

TEST(Staleness, PerturbedExpertFailsDeepCheck) {
  MoDEModel m(small_config(), 2);
  auto cache = build_expert_cache(m);
  m.param(m.layer(0).experts[2].w_up).value[0] += 1e-3;
  EXPECT_NO_THROW(cache.check(m));
  EXPECT_THROW(cache.check(m, true), ValidationError);
  EXPECT_THROW(verify_equivalence(m, cache, 1, 1), ValidationError);
}

TEST(Equivalence, ZeroTrialsIsArgumentError) {
  MoDEModel m(small_config(), 2);
  auto cache = build_expert_cache(m);
  EXPECT_THROW(verify_equivalence(m, cache, 0, 1), ArgumentError);
}

TEST(Flops, CountingRules) {
  EXPECT_EQ(matmul_flops(2, 2, 2), 16.0);
  EXPECT_EQ(linear_flops(1, 4, 8), 64.0);
}

TEST(Flops, RouterOnlyInDynamicMode) {
  ModelConfig c = small_config();
  auto r = count_flops(c, 64);
  EXPECT_EQ(r.component(FlopMode::moe_cached, "router"), 0.0);
  EXPECT_GT(r.component(FlopMode::moe_dynamic, "router"), 0.0);
  EXPECT_EQ(r.component(FlopMode::dense_equal_params, "router"), 0.0);
  EXPECT_EQ(r.overhead_reduction(), 1.0);
}

// Hand count, per layer: projection 2*3*8*4, softmax 5*3*4, top-k scan 3*4,
// renormalization 3*2.
TEST(Flops, RouterHandCount) {
  ModelConfig c = small_config(2, 4, 2);
  c.d_model = 8;
  EXPECT_EQ(count_flops(c, FlopMode::moe_dynamic, 3).component(FlopMode::moe_dynamic, "router"), 2 * 270.0);
}

// One SwiGLU of width w over n tokens costs 2*(2 n d w) + 2 n w + 2 n w d.
TEST(Flops, ExpertHandCount) {
  ModelConfig c = small_config(1, 4, 2);
  const double n = 2.0 * c.tokens(), d = 16, h = c.hidden();
  auto swiglu = [&](double w) { return 4 * n * d * w + 2 * n * w + 2 * n * w * d; };
  const double norm_and_residual = 7 * n * d + n * d;
  auto r = count_flops(c, 2);
  EXPECT_EQ(r.component(FlopMode::moe_cached, "experts"), norm_and_residual + swiglu(2 * h));
  EXPECT_EQ(r.component(FlopMode::moe_dynamic, "experts"), norm_and_residual + 2 * swiglu(h));
  EXPECT_EQ(r.component(FlopMode::dense_equal_params, "experts"), norm_and_residual + swiglu(4 * h));
  EXPECT_EQ(r.component(FlopMode::moe_dynamic, "dispatch"), 2 * n * d + n * d);
}

TEST(Flops, OrderingHoldsWheneverExpertsExceedK) {
  for (std::size_t n_exp : {2u, 4u, 8u})
    for (std::size_t k = 1; k < n_exp; ++k)
      for (RoutingMode mode : {RoutingMode::noise_only, RoutingMode::token_only, RoutingMode::shared_expert}) {
        ModelConfig c = small_config(2, n_exp, k);
        c.routing_mode = mode;
        if (mode == RoutingMode::shared_expert && k + 1 >= n_exp) continue;
        for (std::size_t batch : {1u, 64u}) {
          auto r = count_flops(c, batch);
          EXPECT_LT(r.total(FlopMode::moe_cached), r.total(FlopMode::moe_dynamic));
          EXPECT_LT(r.total(FlopMode::moe_dynamic), r.total(FlopMode::dense_equal_params))
              << to_string(mode) << " N=" << n_exp << " k=" << k;
        }
      }
}

TEST(Flops, CsvLayout) {
  ModelConfig c = small_config();
  auto r = count_flops(c, 4);
  r.set_wall_ns(FlopMode::moe_cached, 1234.4);
  const std::string csv = r.to_csv();
  EXPECT_EQ(csv.rfind("# flops", 0), 0u);
  EXPECT_NE(csv.find("\nmode,component,flops,tokens,batch,wall_ns\n"), std::string::npos);
  EXPECT_NE(csv.find("moe_cached,router,0,52,4,1234\n"), std::string::npos);
  EXPECT_NE(csv.find("moe_dynamic,total,"), std::string::npos);
}

TEST(Timing, FusionTimingIsMeasured) {
  MoDEModel m(small_config(), 2);
  auto cache = build_expert_cache(m);
  auto t = time_fusion(m, cache, 4, 2, 1);
  EXPECT_GT(t.looped_ns, 0.0);
  EXPECT_GT(t.fused_ns, 0.0);
  auto report = count_flops(m.config(), 4);
  measure_forward_wall(report, m, cache, 1, 3);
  for (FlopMode mode : {FlopMode::dense_equal_params, FlopMode::moe_dynamic, FlopMode::moe_cached})
    EXPECT_GT(report.wall(mode), 0.0);
}

}  // namespace
}  // namespace mode
