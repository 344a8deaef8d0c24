#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mode/autodiff.hpp"
#include "mode/diffusion.hpp"
#include "mode/rng.hpp"
#include "mode/tensor.hpp"

namespace mode {

enum class RoutingMode { noise_only, token_only, dense, shared_expert };
enum class NoiseCondMode { token_and_attention, token_only, film };
enum class Phase { train, infer };

std::string to_string(RoutingMode m);
std::string to_string(NoiseCondMode m);
RoutingMode routing_mode_from_string(const std::string& s);
NoiseCondMode noise_cond_mode_from_string(const std::string& s);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t n_experts = 4;
  std::size_t topk = 2;
  // 0 selects the SwiGLU convention round(8/3 * d_model).
  std::size_t expert_hidden = 0;
  std::size_t action_dim = 2;
  std::size_t state_dim = 2;
  std::size_t goal_dim = 2;
  std::size_t chunk_len = 10;
  std::size_t history_len = 1;
  RoutingMode routing_mode = RoutingMode::noise_only;
  NoiseCondMode noise_cond_mode = NoiseCondMode::token_and_attention;
  double attn_dropout = 0.3;
  double residual_dropout = 0.1;
  double mlp_dropout = 0.1;
  NoiseSchedule schedule;

  std::size_t hidden() const;
  // Layout [noise | goal | states(h) | actions(j)].
  std::size_t tokens() const { return 2 + history_len + chunk_len; }
  std::size_t first_action_token() const { return 2 + history_len; }
  // Experts that carry a router column: all of them, or all but the shared
  // expert 0. Zero in dense mode.
  std::size_t routed_experts() const;
  // Number of expert MLPs the model owns.
  std::size_t expert_count() const;
  // Hidden width of each owned expert (dense mode widens its single MLP to
  // match the active width of k routed experts).
  std::size_t expert_width() const;

  void validate() const;
};

// Router output for one layer. Rows are routing inputs: one per batch
// element in noise-conditioned modes (covering tokens_per_row tokens each),
// one per token in token_only mode. Columns index routed experts; expert id
// = column + expert_offset.
struct RouterDecision {
  Tensor probs;
  std::vector<std::vector<std::size_t>> selected;
  Tensor weights;
  std::size_t tokens_per_row = 1;
  std::size_t expert_offset = 0;

  std::size_t rows() const { return selected.size(); }
  std::size_t routed() const { return probs.cols(); }
};

// Differentiable handles for one layer's routing.
struct RoutedLayer {
  RouterDecision decision;
  Var probs;
  Var weights;
};

// probs = softmax(input W_R); train phase samples k experts without
// replacement, infer phase takes the k largest (ties to the lower index).
// Weights are the selected probabilities renormalized per row.
RoutedLayer route(Var input, Var w_router, std::size_t k, Phase phase, Rng* rng, std::size_t tokens_per_row = 1,
                  bool renormalize = true);
RouterDecision route(const Tensor& input, const Tensor& w_router, std::size_t k, Phase phase, Rng* rng,
                     std::size_t tokens_per_row = 1);

// Selection rules used by route(), exposed for reuse and testing.
std::vector<std::size_t> select_topk(std::span<const double> probs, std::size_t k);
std::vector<std::size_t> sample_without_replacement(std::span<const double> probs, std::size_t k, Rng& rng);

struct SwiGLUVars {
  Var w_gate;
  Var w_up;
  Var w_down;
};

// W_down (silu(x W_gate) * (x W_up)), with optional dropout on the hidden
// activation.
Var expert_forward(const SwiGLUVars& e, Var x, double dropout_p = 0.0, Rng* rng = nullptr);

// Applies expert `e` to a block of rows.
using ExpertFn = std::function<Var(std::size_t expert, Var x)>;

// Combines expert outputs for the rows of x: sum over selected experts of
// weight * E(x). With `shared`, expert 0 is also added to every row with
// weight 1. A null decision (dense) applies expert 0 alone.
Var moe_forward(Var x, const RoutedLayer* routed, const ExpertFn& expert, bool shared);
Var moe_forward(Var x, const RoutedLayer* routed, const std::vector<SwiGLUVars>& experts, bool shared,
                double dropout_p = 0.0, Rng* rng = nullptr);

struct AttentionVars {
  Var w_q;
  Var w_k;
  Var w_v;
  Var w_o;
};

// x_hat = x + phi (phi broadcast over each group of rows when present),
// then multi-head attention projected by W_O. `phi` may be null.
Var noise_cond_attention(Var x, const Var* phi, const AttentionVars& w, std::size_t group, std::size_t heads,
                         const Tensor& mask = {}, double dropout_p = 0.0, Rng* rng = nullptr);

// N * sum_n f_n P_n averaged over layers; f_n is the fraction of routed rows
// whose selection contains expert n, P_n the mean router probability.
Var load_balance_loss(const std::vector<RoutedLayer>& layers);
double load_balance_value(const std::vector<RouterDecision>& decisions);

struct DenoiserInput {
  Tensor noisy_actions;  // [batch, chunk_len, action_dim]
  Tensor states;         // [batch, history_len, state_dim]
  Tensor goals;          // [batch, goal_dim]

  std::size_t batch() const { return noisy_actions.rank() ? noisy_actions.shape()[0] : 0; }
};

// Replaces a layer's router+experts with a precomputed path: receives the
// normalized MoE input and returns the MoE output.
using MoeOverride = std::function<Var(Tape&, std::size_t layer, Var x)>;

struct ForwardOptions {
  Phase phase = Phase::infer;
  Rng* rng = nullptr;     // routing samples and dropout masks in train phase
  bool dropout = true;    // only honored in train phase
  bool renormalize = true;
  MoeOverride moe_override;
};

struct ForwardResult {
  Var denoised;  // [batch * chunk_len, action_dim]
  Var raw;       // network output F before the skip connection, same shape
  std::vector<RoutedLayer> routes;
  Var phi;       // [batch, d_model]
};

class MoDEModel {
 public:
  struct ExpertIndex {
    std::size_t w_gate, w_up, w_down;
  };
  struct LayerIndex {
    std::size_t ln1_gain, ln1_bias, w_q, w_k, w_v, w_o, ln2_gain, ln2_bias;
    std::size_t w_router = npos;
    std::size_t film_scale_w = npos, film_scale_b = npos, film_shift_w = npos, film_shift_b = npos;
    std::size_t film2_scale_w = npos, film2_scale_b = npos, film2_shift_w = npos, film2_shift_b = npos;
    std::vector<ExpertIndex> experts;
  };
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  MoDEModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  std::vector<Parameter*> parameter_ptrs();
  Parameter& param(const std::string& name);
  const Parameter& param(const std::string& name) const;
  Parameter& param(std::size_t index) { return params_[index]; }
  const Parameter& param(std::size_t index) const { return params_[index]; }
  const LayerIndex& layer(std::size_t l) const { return layers_[l]; }
  std::size_t parameter_count() const;

  void zero_grad();
  // Freezes the router matrices and, when routing is noise-conditioned, the
  // noise projector, so precomputed routes survive finetuning.
  void set_routers_frozen(bool frozen);
  // Hash of everything routing depends on (noise projector and routers).
  std::uint64_t routing_fingerprint() const;
  std::uint64_t expert_fingerprint() const;

  // phi(sigma) = W_phi * c_noise(sigma) + b_phi, for each sigma.
  Var noise_tokens(Tape& tape, const std::vector<double>& sigmas) const;
  Tensor encode_noise_token(double sigma) const;

  // Embeds [phi | goal | states | actions] into tokens x d_model rows per
  // batch element (no positional term). `phi_rows` is [batch, d_model].
  Var build_sequence(Tape& tape, Var phi_rows, const Tensor& goals, const Tensor& states,
                     const Tensor& actions) const;

  // One transformer block on rows grouped by tokens(). `phi` is [batch,
  // d_model]. Returns the block output and the routing it used.
  Var block_forward(Tape& tape, std::size_t layer, Var x, Var phi, const ForwardOptions& opts,
                    RoutedLayer* routed) const;

  // D = c_skip x + c_out F(c_in x, s, g, c_noise).
  ForwardResult forward(Tape& tape, const DenoiserInput& input, const std::vector<double>& sigmas,
                        const ForwardOptions& opts) const;

  // Convenience inference pass on a non-recording tape; same sigma for the
  // whole batch. Returns [batch, chunk_len, action_dim].
  Tensor denoise(const DenoiserInput& input, double sigma, const ForwardOptions& opts = {}) const;

  std::vector<SwiGLUVars> expert_vars(Tape& tape, std::size_t layer) const;
  AttentionVars attention_vars(Tape& tape, std::size_t layer) const;

 private:
  std::size_t add(std::string name, Tensor value, bool decay = true);
  Var leaf(Tape& tape, std::size_t index) const;

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> by_name_;
  std::size_t w_goal_, b_goal_, w_state_, b_state_, w_action_, b_action_;
  std::size_t w_phi_, b_phi_, pos_;
  std::size_t ln_f_gain_, ln_f_bias_, w_out_, b_out_;
  std::vector<LayerIndex> layers_;
};

std::uint64_t fnv1a(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace mode
