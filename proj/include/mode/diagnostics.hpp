#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mode/grad_check.hpp"
#include "mode/model.hpp"

namespace mode {

// Router probabilities at every sampling level, per layer. Needs a
// noise-conditioned routing mode.
struct RouteMap {
  std::vector<double> grid;  // sigma_max first
  std::size_t layers = 0;
  std::size_t experts = 0;   // routed columns
  std::size_t expert_offset = 0;
  std::vector<double> probs;  // [layer][level][expert]

  double at(std::size_t layer, std::size_t level, std::size_t expert) const {
    return probs[(layer * grid.size() + level) * experts + expert];
  }
  // Total-variation distance between routing at sigma_max and sigma_min.
  double tv_distance(std::size_t layer) const;
  double max_tv_distance() const;

  // Rows layer,sigma_index,sigma,expert,weight.
  std::string to_csv() const;
  // One heatmap panel per layer, each scaled to its own min..max.
  std::string to_svg() const;
};

RouteMap route_map(const MoDEModel& model);

// Loss used for gradient checks: network-form score matching on a fixed
// draw plus gamma * LB, with the randomness re-seeded per evaluation.
LossFn training_objective(const MoDEModel& model, const DenoiserInput& context, const Tensor& clean,
                          std::uint64_t seed, double gamma);

GradCheckReport tiny_grad_check(std::size_t experts, std::size_t topk, std::uint64_t seed,
                                RoutingMode routing = RoutingMode::noise_only,
                                NoiseCondMode cond = NoiseCondMode::token_and_attention);

// Largest |LB - expected| over the closed-form cases: 4 when every row
// sends everything to one of four experts, 1 for balanced k=1, 2 for
// balanced k=2.
struct LbCase {
  std::string name;
  double expected;
  double actual;
};
std::vector<LbCase> lb_analytic_cases();

// Routes `trials` random inputs at one sigma and reports whether every
// layer's decision matched the first input's exactly.
bool routing_is_content_independent(const MoDEModel& model, std::size_t trials, double sigma, std::uint64_t seed);

enum class Fault { none, renormalization };
Fault fault_from_string(const std::string& s);

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double tolerance = 0.0;
  std::string detail;

  std::string json_line() const;
};

// The invariant suite. Model-specific checks run on `model` when given,
// otherwise on a fresh tiny model from `seed`.
std::vector<CheckResult> run_checks(std::uint64_t seed, Fault fault = Fault::none, const MoDEModel* model = nullptr);

}  // namespace mode
