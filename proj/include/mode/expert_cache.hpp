#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mode/model.hpp"
#include "mode/tensor.hpp"

namespace mode {

// Routing decided ahead of time for every (layer, sampler grid level).
struct RouteEntry {
  std::vector<std::size_t> selected;  // routed-expert columns, ascending
  std::vector<double> weights;        // one per routed expert, zero when unselected
};

class RouteTable {
 public:
  RouteTable() = default;
  RouteTable(std::vector<double> grid, std::size_t layers, std::vector<RouteEntry> entries,
             std::uint64_t fingerprint, std::size_t expert_offset);

  const std::vector<double>& grid() const noexcept { return grid_; }
  std::size_t layers() const noexcept { return layers_; }
  std::size_t levels() const noexcept { return grid_.size(); }
  std::size_t size() const noexcept { return entries_.size(); }
  std::uint64_t fingerprint() const noexcept { return fingerprint_; }
  // 1 when expert 0 is shared and router columns start at expert 1.
  std::size_t expert_offset() const noexcept { return expert_offset_; }
  const RouteEntry& at(std::size_t layer, std::size_t level) const;

 private:
  std::vector<double> grid_;
  std::size_t layers_ = 0;
  std::vector<RouteEntry> entries_;
  std::uint64_t fingerprint_ = 0;
  std::size_t expert_offset_ = 0;
};

// Deterministic (infer-phase) routing at each grid level of `schedule`.
// Token-conditioned routing cannot be precomputed and is a ConfigError.
RouteTable precompute_routes(const MoDEModel& model, const NoiseSchedule& schedule);
RouteTable precompute_routes(const MoDEModel& model);

// The experts active at one (layer, level), stacked side by side:
// x -> (silu(x Wg) * x Wu) Wd with Wg|Wu concatenated column-wise into
// `gate_up` [d x 2M] and the mixture weights folded into the rows of
// `down` [M x d]. M is the summed hidden width of the active experts.
struct FusedExpert {
  Tensor gate_up;
  Tensor down;
  std::vector<std::size_t> experts;  // model expert indices, stacking order
  std::vector<double> weights;       // mixture weight per stacked expert

  std::size_t width() const { return down.rows(); }
  Tensor apply(const Tensor& x) const;
};

class ExpertCache {
 public:
  ExpertCache() = default;
  ExpertCache(RouteTable table, std::vector<FusedExpert> fused, std::uint64_t expert_fingerprint);

  const RouteTable& table() const noexcept { return table_; }
  std::size_t levels() const noexcept { return table_.levels(); }
  std::size_t layers() const noexcept { return layers_; }
  const FusedExpert& fused(std::size_t layer, std::size_t level) const;

  // ValidationError when the model's routing weights differ from the ones
  // the table was built from. `deep` also hashes the expert weights.
  void check(const MoDEModel& model, bool deep = false) const;

 private:
  RouteTable table_;
  std::size_t layers_ = 0;
  std::vector<FusedExpert> fused_;
  std::uint64_t expert_fingerprint_ = 0;
};

std::vector<FusedExpert> fuse_experts(const MoDEModel& model, const RouteTable& table);
ExpertCache build_expert_cache(const MoDEModel& model, const NoiseSchedule& schedule);
ExpertCache build_expert_cache(const MoDEModel& model);

// Inference at grid level `level` with every MoE layer served by the fused
// experts; no router is evaluated. Returns [batch, chunk_len, action_dim].
Tensor cached_forward(const MoDEModel& model, const ExpertCache& cache, const DenoiserInput& input,
                      std::size_t level);

// Full DDIM rollouts from x_T = sigma_max * N(0, I); `actions_noise` must be
// [batch, chunk_len, action_dim] standard normal draws.
Tensor dynamic_rollout(const MoDEModel& model, const DenoiserInput& context, const Tensor& actions_noise,
                       const NoiseSchedule& schedule);
Tensor cached_rollout(const MoDEModel& model, const ExpertCache& cache, const DenoiserInput& context,
                      const Tensor& actions_noise);

struct EquivalenceReport {
  std::size_t trials = 0;
  double max_abs_diff = 0.0;
  double tolerance = 1e-8;
  bool passed() const { return max_abs_diff <= tolerance; }
};

// Random contexts and start noise; compares cached and dynamic rollouts.
EquivalenceReport verify_equivalence(const MoDEModel& model, const ExpertCache& cache, std::size_t trials,
                                     std::uint64_t seed);

enum class FlopMode { dense_equal_params, moe_dynamic, moe_cached };
std::string to_string(FlopMode m);

// Counting rules: matmul 2mkn, softmax 5 per element, every other
// elementwise op 1 per element (layer norm is 7 elementwise passes).
double matmul_flops(std::size_t m, std::size_t k, std::size_t n);
double linear_flops(std::size_t tokens, std::size_t in, std::size_t out);

struct FlopEntry {
  FlopMode mode;
  std::string component;  // embedders, attention, router, dispatch, experts, projection
  double flops = 0.0;
};

struct FlopReport {
  std::size_t batch = 0;
  std::size_t tokens = 0;  // batch * sequence length
  std::vector<FlopEntry> entries;
  std::vector<std::pair<FlopMode, double>> wall_ns;  // measured per forward, when available

  double total(FlopMode mode) const;
  double component(FlopMode mode, const std::string& name) const;
  // Router plus dispatch FLOPs of the dynamic path that the cache removes,
  // as a fraction of the dynamic path's routing overhead.
  double overhead_reduction() const;
  void set_wall_ns(FlopMode mode, double ns);
  double wall(FlopMode mode) const;  // -1 when not measured
  // Leading '#' line states the counting rules, then
  // mode,component,flops,tokens,batch,wall_ns (one row per component and a
  // "total" row per mode).
  std::string to_csv() const;
};

// Analytic cost of one denoiser forward over `batch` sequences.
// dense_equal_params replaces the MoE with one SwiGLU whose hidden width
// equals the summed width of all experts.
FlopReport count_flops(const ModelConfig& config, FlopMode mode, std::size_t batch);
FlopReport count_flops(const ModelConfig& config, std::size_t batch);  // all modes

struct FusionTiming {
  std::size_t batch = 0;
  std::size_t reps = 0;
  double looped_ns = 0.0;  // router + loop over experts, per rollout
  double fused_ns = 0.0;   // stacked experts, per rollout
  double speedup() const { return fused_ns > 0.0 ? looped_ns / fused_ns : 0.0; }
};

// MoE-layer cost of one rollout (every layer at every grid level) measured
// both ways on random activations.
FusionTiming time_fusion(const MoDEModel& model, const ExpertCache& cache, std::size_t batch, std::size_t reps,
                         std::uint64_t seed);

// Fills wall_ns for each mode with the mean full-forward time at the
// report's batch. The dense model is built from `config` at equal total
// parameters.
void measure_forward_wall(FlopReport& report, const MoDEModel& model, const ExpertCache& cache, std::size_t reps,
                          std::uint64_t seed);

}  // namespace mode
