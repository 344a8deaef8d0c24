#include "mode/diagnostics.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include "json.hpp"
#include "mode/error.hpp"

namespace mode {
namespace {

ModelConfig small(RoutingMode r = RoutingMode::noise_only) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 3;
  c.n_heads = 2;
  c.n_experts = 4;
  c.topk = 2;
  c.routing_mode = r;
  return c;
}

std::size_t count(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (auto at = text.find(needle); at != std::string::npos; at = text.find(needle, at + 1)) ++n;
  return n;
}

TEST(RouteMapTest, ZeroRouterIsFlat) {
  MoDEModel m(small(), 2);
  for (std::size_t l = 0; l < 3; ++l) m.param(m.layer(l).w_router).value.fill(0.0);
  const RouteMap map = route_map(m);
  for (double p : map.probs) EXPECT_DOUBLE_EQ(p, 0.25);
  EXPECT_EQ(map.max_tv_distance(), 0.0);
}

TEST(RouteMapTest, CsvHasOneRowPerLayerLevelExpert) {
  MoDEModel m(small(), 2);
  const RouteMap map = route_map(m);
  const std::string csv = map.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,sigma_index,sigma,expert,weight");
  EXPECT_EQ(count(csv, "\n"), 1 + 3 * 10 * 4);
}

TEST(RouteMapTest, SvgHasAPanelPerLayer) {
  MoDEModel m(small(), 2);
  const std::string svg = route_map(m).to_svg();
  EXPECT_EQ(count(svg, "<g id=\"layer"), 3u);
  EXPECT_EQ(count(svg, "<rect x="), 3u * 10 * 4);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(RouteMapTest, TotalVariationOfKnownRows) {
  RouteMap map;
  map.grid = {80.0, 1.0, 0.001};
  map.layers = 1;
  map.experts = 2;
  map.probs = {0.9, 0.1, 0.5, 0.5, 0.2, 0.8};
  EXPECT_NEAR(map.tv_distance(0), 0.7, 1e-15);
}

TEST(RouteMapTest, SharedExpertColumnsAreOffset) {
  ModelConfig c = small(RoutingMode::shared_expert);
  const RouteMap map = route_map(MoDEModel(c, 1));
  EXPECT_EQ(map.experts, 3u);
  EXPECT_EQ(map.expert_offset, 1u);
  EXPECT_NE(map.to_csv().find(",1,"), std::string::npos);
}

TEST(RouteMapTest, NeedsNoiseRouting) {
  EXPECT_THROW(route_map(MoDEModel(small(RoutingMode::dense), 1)), ConfigError);
  EXPECT_THROW(route_map(MoDEModel(small(RoutingMode::token_only), 1)), ConfigError);
}

TEST(LbCases, ClosedFormValues) {
  for (const LbCase& c : lb_analytic_cases()) EXPECT_NEAR(c.actual, c.expected, 1e-9) << c.name;
}

TEST(ContentIndependence, NoiseRoutingIgnoresTokensTokenRoutingDoesNot) {
  EXPECT_TRUE(routing_is_content_independent(MoDEModel(small(), 3), 30, 0.7, 1));
  EXPECT_FALSE(routing_is_content_independent(MoDEModel(small(RoutingMode::token_only), 3), 30, 0.7, 1));
}

TEST(Checks, FreshModelPassesEverything) {
  const auto results = run_checks(4);
  EXPECT_GE(results.size(), 6u);
  for (const CheckResult& r : results) {
    EXPECT_TRUE(r.passed) << r.json_line();
    const auto j = nlohmann::json::parse(r.json_line());
    EXPECT_EQ(j.at("check"), r.name);
    EXPECT_EQ(j.at("passed"), true);
  }
}

TEST(Checks, BrokenRenormalizationIsNamed) {
  for (const CheckResult& r : run_checks(4, Fault::renormalization)) {
    EXPECT_EQ(r.passed, r.name != "route_renormalization") << r.json_line();
  }
  EXPECT_THROW(fault_from_string("gremlins"), ArgumentError);
}

TEST(Checks, RunOnSuppliedModels) {
  for (RoutingMode r : {RoutingMode::shared_expert, RoutingMode::dense, RoutingMode::token_only}) {
    const MoDEModel m(small(r), 5);
    for (const CheckResult& c : run_checks(4, Fault::none, &m)) EXPECT_TRUE(c.passed) << to_string(r) << c.json_line();
  }
}

}  // namespace
}  // namespace mode
