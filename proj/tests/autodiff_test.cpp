#include "mode/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "mode/error.hpp"
#include "mode/grad_check.hpp"

namespace mode {
namespace {

Parameter random_param(const std::string& name, Shape shape, Rng& rng, double scale = 1.0) {
  Parameter p;
  p.name = name;
  p.value = Tensor(std::move(shape));
  for (double& v : p.value.flat()) v = scale * rng.normal();
  return p;
}

// Reduces any tensor-valued expression to a scalar with fixed random
// weights so every output element contributes to the checked gradient.
Var project(Tape& tape, Var y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor c(y.shape());
  for (double& v : c.flat()) v = rng.normal();
  return ad::dot_const(y, std::move(c));
}

TEST(GradCheck, SumOfSquares) {
  Parameter theta{"theta", Tensor::vector({1.0, 2.0})};
  auto report = grad_check([&](Tape& t) {
    Var p = t.param(theta);
    return ad::sum(p * p);
  }, {&theta});
  EXPECT_NEAR(theta.grad[0], 2.0, 1e-12);
  EXPECT_NEAR(theta.grad[1], 4.0, 1e-12);
  EXPECT_LE(report.max_rel_error, 1e-7);
  EXPECT_EQ(report.checked, 2u);
}

TEST(GradCheck, ConstantLossHasZeroGradient) {
  Parameter theta{"theta", Tensor::vector({1.0, -3.0, 0.5})};
  auto report = grad_check([&](Tape& t) {
    t.param(theta);
    return t.constant(Tensor::scalar(4.2));
  }, {&theta});
  for (double g : theta.grad.flat()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(report.max_abs_error, 0.0);
}

TEST(GradCheck, NonFiniteLossIsNumericError) {
  Parameter theta{"theta", Tensor::vector({1.0})};
  EXPECT_THROW(grad_check([&](Tape& t) { return ad::scale(t.param(theta), INFINITY); }, {&theta}), NumericError);
}

TEST(GradCheck, FrozenParametersStillReceiveGradients) {
  Parameter theta{"theta", Tensor::vector({3.0})};
  theta.frozen = true;
  Tape t;
  Var p = t.param(theta);
  t.backward(ad::sum(p * p));
  EXPECT_DOUBLE_EQ(theta.grad[0], 6.0);
}

struct OpCase {
  const char* name;
  std::function<Var(Tape&, std::vector<Var>&)> build;
  std::vector<Shape> shapes;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const OpCase& c = GetParam();
  Rng rng(1234);
  std::vector<Parameter> params;
  for (std::size_t i = 0; i < c.shapes.size(); ++i)
    params.push_back(random_param("p" + std::to_string(i), c.shapes[i], rng));
  std::vector<Parameter*> ptrs;
  for (auto& p : params) ptrs.push_back(&p);
  auto report = grad_check([&](Tape& t) {
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(t.param(p));
    return project(t, c.build(t, vars), 99);
  }, ptrs);
  EXPECT_LE(report.max_rel_error, 1e-6) << c.name << " worst " << report.worst_parameter << "[" << report.worst_index
                                        << "]";
}

Tensor self_only_mask(std::size_t n) {
  Tensor m({n, n});
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

INSTANTIATE_TEST_SUITE_P(
    Ops, OpGradient,
    ::testing::Values(
        OpCase{"matmul", [](Tape&, auto& v) { return ad::matmul(v[0], v[1]); }, {{3, 4}, {4, 2}}},
        OpCase{"mul_sub", [](Tape&, auto& v) { return (v[0] - v[1]) * v[0]; }, {{2, 3}, {2, 3}}},
        OpCase{"add_bias", [](Tape&, auto& v) { return ad::add_bias(v[0], v[1]); }, {{3, 4}, {4}}},
        OpCase{"add_tiled", [](Tape&, auto& v) { return ad::add_tiled(v[0], v[1]); }, {{6, 2}, {3, 2}}},
        OpCase{"group_ops",
               [](Tape&, auto& v) { return ad::add_group(ad::mul_group(v[0], v[1], 3), v[1], 3); },
               {{6, 2}, {2, 2}}},
        OpCase{"scale_rows_var", [](Tape&, auto& v) { return ad::scale_rows(v[0], v[1]); }, {{4, 3}, {4, 1}}},
        OpCase{"silu", [](Tape&, auto& v) { return ad::silu(v[0]); }, {{3, 5}}},
        OpCase{"softmax", [](Tape&, auto& v) { return ad::softmax_rows(v[0]); }, {{3, 5}}},
        OpCase{"layer_norm", [](Tape&, auto& v) { return ad::layer_norm(v[0], v[1], v[2]); }, {{4, 6}, {6}, {6}}},
        OpCase{"attention_causal",
               [](Tape&, auto& v) { return ad::attention(v[0], v[1], v[2], 3, 2); },
               {{6, 4}, {6, 4}, {6, 4}}},
        OpCase{"attention_masked",
               [](Tape&, auto& v) { return ad::attention(v[0], v[1], v[2], 4, 1, self_only_mask(4)); },
               {{4, 2}, {4, 2}, {4, 2}}},
        OpCase{"gather_scatter",
               [](Tape&, auto& v) { return ad::scatter_rows(ad::gather_rows(v[0], {2, 0, 2}), {1, 1, 3}, 4); },
               {{3, 2}}},
        OpCase{"interleave",
               [](Tape&, auto& v) { return ad::interleave_groups({v[0], v[1]}, {1, 2}, 2); },
               {{2, 3}, {4, 3}}},
        OpCase{"gather_column", [](Tape&, auto& v) { return ad::gather_column(v[0], 1, {0, 2, 2}); }, {{3, 3}}},
        OpCase{"mean_rows", [](Tape&, auto& v) { return ad::mean_rows(v[0]); }, {{5, 3}}},
        OpCase{"renormalize",
               [](Tape& t, auto& v) {
                 Tensor mask = Tensor::matrix(2, 3, {1, 0, 1, 0, 1, 0});
                 return ad::renormalize_selected(ad::softmax_rows(v[0]), mask);
               },
               {{2, 3}}},
        OpCase{"weighted_sq_error",
               [](Tape&, auto& v) {
                 return ad::weighted_sq_error(v[0], Tensor({4, 2}, 0.25), {2.0, 0.5}, 2);
               },
               {{4, 2}}}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(Attention, DropoutGradientMatchesWithFixedMask) {
  Rng init(3);
  std::vector<Parameter> ps;
  for (int i = 0; i < 3; ++i) ps.push_back(random_param("qkv" + std::to_string(i), {6, 4}, init));
  auto report = grad_check([&](Tape& t) {
    Rng rng(77);
    Var y = ad::attention(t.param(ps[0]), t.param(ps[1]), t.param(ps[2]), 3, 2, {}, 0.3, &rng);
    y = ad::dropout(y, 0.2, rng);
    return project(t, y, 5);
  }, {&ps[0], &ps[1], &ps[2]});
  EXPECT_LE(report.max_rel_error, 1e-6);
}

TEST(Attention, SelfOnlyMaskIgnoresOtherRows) {
  Tape t(false);
  Rng rng(2);
  Tensor q({3, 2}), k({3, 2}), v({3, 2});
  for (Tensor* x : {&q, &k, &v})
    for (double& e : x->flat()) e = rng.normal();
  Tensor out = ad::attention(t.constant(q), t.constant(k), t.constant(v), 3, 1, self_only_mask(3)).value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(out.at(r, c), v.at(r, c));
}

TEST(Tape, NonRecordingTapeKeepsNoGradients) {
  Parameter theta{"theta", Tensor::vector({1.0, 2.0})};
  Tape t(false);
  Var y = ad::sum(t.param(theta) * t.param(theta));
  EXPECT_DOUBLE_EQ(y.value()[0], 5.0);
  EXPECT_FALSE(t.needs_grad(y.id));
  EXPECT_THROW(t.backward(y), ValidationError);
}

TEST(Tape, GradientsAccumulateAcrossBackwardPasses) {
  Parameter theta{"theta", Tensor::vector({1.5})};
  for (int i = 0; i < 2; ++i) {
    Tape t;
    t.backward(ad::scale(t.param(theta), 2.0));
  }
  EXPECT_DOUBLE_EQ(theta.grad[0], 4.0);
}

}  // namespace
}  // namespace mode
