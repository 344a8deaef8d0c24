#include "mode/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "mode/error.hpp"

namespace mode {
namespace {

Tensor normal_init(Shape shape, double std, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.flat()) v = std * rng.normal();
  return t;
}

// Truncated at +-2 std by resampling.
Tensor truncated_normal_init(Shape shape, double std, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.flat()) {
    double z = rng.normal();
    while (std::abs(z) > 2.0) z = rng.normal();
    v = std * z;
  }
  return t;
}

}  // namespace

std::string to_string(RoutingMode m) {
  switch (m) {
    case RoutingMode::noise_only: return "noise_only";
    case RoutingMode::token_only: return "token_only";
    case RoutingMode::dense: return "dense";
    case RoutingMode::shared_expert: return "shared_expert";
  }
  return "unknown";
}

std::string to_string(NoiseCondMode m) {
  switch (m) {
    case NoiseCondMode::token_and_attention: return "token_and_attention";
    case NoiseCondMode::token_only: return "token_only";
    case NoiseCondMode::film: return "film";
  }
  return "unknown";
}

RoutingMode routing_mode_from_string(const std::string& s) {
  if (s == "noise_only") return RoutingMode::noise_only;
  if (s == "token_only") return RoutingMode::token_only;
  if (s == "dense") return RoutingMode::dense;
  if (s == "shared_expert" || s == "shared") return RoutingMode::shared_expert;
  throw ConfigError("unknown routing mode '" + s + "'");
}

NoiseCondMode noise_cond_mode_from_string(const std::string& s) {
  if (s == "token_and_attention") return NoiseCondMode::token_and_attention;
  if (s == "token_only") return NoiseCondMode::token_only;
  if (s == "film") return NoiseCondMode::film;
  throw ConfigError("unknown noise conditioning mode '" + s + "'");
}

std::size_t ModelConfig::hidden() const {
  if (expert_hidden != 0) return expert_hidden;
  return static_cast<std::size_t>(std::llround(8.0 * static_cast<double>(d_model) / 3.0));
}

std::size_t ModelConfig::routed_experts() const {
  switch (routing_mode) {
    case RoutingMode::dense: return 0;
    case RoutingMode::shared_expert: return n_experts - 1;
    default: return n_experts;
  }
}

std::size_t ModelConfig::expert_count() const { return routing_mode == RoutingMode::dense ? 1 : n_experts; }

std::size_t ModelConfig::expert_width() const {
  return routing_mode == RoutingMode::dense ? topk * hidden() : hidden();
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_layers == 0 || n_heads == 0) throw ConfigError("model dimensions must be positive");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (n_experts == 0 || topk == 0 || topk > n_experts) {
    throw ConfigError("topk must satisfy 1 <= k <= N (k=" + std::to_string(topk) +
                      ", N=" + std::to_string(n_experts) + ")");
  }
  if (routing_mode == RoutingMode::shared_expert && topk > n_experts - 1) {
    throw ConfigError("shared_expert routing needs k <= N - 1");
  }
  if (action_dim == 0 || state_dim == 0 || goal_dim == 0 || chunk_len == 0 || history_len == 0) {
    throw ConfigError("input dimensions must be positive");
  }
  for (double p : {attn_dropout, residual_dropout, mlp_dropout}) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout rates must lie in [0, 1)");
  }
  schedule.validate();
}

// ---------------------------------------------------------------------------
// Routing

std::vector<std::size_t> select_topk(std::span<const double> probs, std::size_t k) {
  if (k > probs.size()) throw ConfigError("topk: k exceeds the number of experts");
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<std::size_t> sample_without_replacement(std::span<const double> probs, std::size_t k, Rng& rng) {
  if (k > probs.size()) throw ConfigError("multinomial: k exceeds the number of experts");
  std::vector<double> mass(probs.begin(), probs.end());
  std::vector<std::size_t> picked;
  for (std::size_t draw = 0; draw < k; ++draw) {
    const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
    const double u = rng.uniform() * total;
    double acc = 0.0;
    std::size_t choice = mass.size();
    std::size_t last_open = mass.size();
    for (std::size_t i = 0; i < mass.size(); ++i) {
      if (mass[i] <= 0.0) continue;
      last_open = i;
      acc += mass[i];
      if (u < acc) {
        choice = i;
        break;
      }
    }
    if (choice == mass.size()) {
      // Round-off left u at the top edge, or every remaining mass is zero.
      if (last_open == mass.size()) {
        for (std::size_t i = 0; i < mass.size(); ++i)
          if (std::find(picked.begin(), picked.end(), i) == picked.end()) {
            last_open = i;
            break;
          }
      }
      choice = last_open;
    }
    picked.push_back(choice);
    mass[choice] = 0.0;
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

RoutedLayer route(Var input, Var w_router, std::size_t k, Phase phase, Rng* rng, std::size_t tokens_per_row,
                  bool renormalize) {
  const std::size_t n = w_router.value().cols();
  if (k == 0 || k > n) {
    throw ConfigError("route: k=" + std::to_string(k) + " not in [1, " + std::to_string(n) + "]");
  }
  if (phase == Phase::train && rng == nullptr) throw ArgumentError("route: train phase needs an rng");
  RoutedLayer out;
  out.probs = ad::softmax_rows(ad::matmul(input, w_router));
  const Tensor& probs = out.probs.value();
  Tensor mask(probs.shape());
  out.decision.selected.resize(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    auto sel = phase == Phase::infer ? select_topk(probs.row(r), k) : sample_without_replacement(probs.row(r), k, *rng);
    for (std::size_t c : sel) mask.at(r, c) = 1.0;
    out.decision.selected[r] = std::move(sel);
  }
  out.weights = ad::renormalize_selected(out.probs, std::move(mask), renormalize);
  out.decision.probs = probs;
  out.decision.weights = out.weights.value();
  out.decision.tokens_per_row = tokens_per_row;
  return out;
}

RouterDecision route(const Tensor& input, const Tensor& w_router, std::size_t k, Phase phase, Rng* rng,
                     std::size_t tokens_per_row) {
  Tape tape(false);
  return route(tape.constant(input), tape.constant(w_router), k, phase, rng, tokens_per_row).decision;
}

// ---------------------------------------------------------------------------
// Blocks

Var expert_forward(const SwiGLUVars& e, Var x, double dropout_p, Rng* rng) {
  Var hidden = ad::silu(ad::matmul(x, e.w_gate)) * ad::matmul(x, e.w_up);
  if (dropout_p > 0.0 && rng) hidden = ad::dropout(hidden, dropout_p, *rng);
  return ad::matmul(hidden, e.w_down);
}

Var moe_forward(Var x, const RoutedLayer* routed, const ExpertFn& expert, bool shared) {
  if (routed == nullptr) return expert(0, x);

  const RouterDecision& d = routed->decision;
  const std::size_t rows = x.value().rows();
  if (d.rows() * d.tokens_per_row != rows) {
    throw DimensionError("moe_forward: decision covers " + std::to_string(d.rows() * d.tokens_per_row) +
                         " tokens, input has " + std::to_string(rows));
  }
  std::vector<Var> parts;
  if (shared) parts.push_back(expert(0, x));

  for (std::size_t col = 0; col < d.routed(); ++col) {
    std::vector<std::size_t> token_rows, route_rows;
    for (std::size_t r = 0; r < d.rows(); ++r) {
      if (std::find(d.selected[r].begin(), d.selected[r].end(), col) == d.selected[r].end()) continue;
      for (std::size_t t = 0; t < d.tokens_per_row; ++t) {
        token_rows.push_back(r * d.tokens_per_row + t);
        route_rows.push_back(r);
      }
    }
    if (token_rows.empty()) continue;
    const bool all_rows = token_rows.size() == rows;
    Var ys = expert(col + d.expert_offset, all_rows ? x : ad::gather_rows(x, token_rows));
    ys = ad::scale_rows(ys, ad::gather_column(routed->weights, col, std::move(route_rows)));
    parts.push_back(all_rows ? ys : ad::scatter_rows(ys, std::move(token_rows), rows));
  }
  if (parts.empty()) throw ValidationError("moe_forward: no expert selected");
  Var out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out = out + parts[i];
  return out;
}

Var moe_forward(Var x, const RoutedLayer* routed, const std::vector<SwiGLUVars>& experts, bool shared,
                double dropout_p, Rng* rng) {
  return moe_forward(x, routed, [&](std::size_t e, Var rows) {
    if (e >= experts.size()) throw DimensionError("moe_forward: decision references a missing expert");
    return expert_forward(experts[e], rows, dropout_p, rng);
  }, shared);
}

Var noise_cond_attention(Var x, const Var* phi, const AttentionVars& w, std::size_t group, std::size_t heads,
                         const Tensor& mask, double dropout_p, Rng* rng) {
  Var x_hat = phi ? ad::add_group(x, *phi, group) : x;
  Var q = ad::matmul(x_hat, w.w_q);
  Var k = ad::matmul(x_hat, w.w_k);
  Var v = ad::matmul(x_hat, w.w_v);
  Var att = ad::attention(q, k, v, group, heads, mask, dropout_p, rng);
  return ad::matmul(att, w.w_o);
}

Var load_balance_loss(const std::vector<RoutedLayer>& layers) {
  if (layers.empty()) throw ArgumentError("load_balance_loss: no routed layers");
  Var total{};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const RouterDecision& d = layers[l].decision;
    if (d.rows() == 0) throw ArgumentError("load_balance_loss: empty batch");
    const std::size_t n = d.routed();
    Tensor fraction({n});
    for (const auto& sel : d.selected)
      for (std::size_t c : sel) fraction[c] += 1.0;
    for (double& f : fraction.flat()) f *= static_cast<double>(n) / static_cast<double>(d.rows() * layers.size());
    Var term = ad::dot_const(ad::mean_rows(layers[l].probs), std::move(fraction));
    total = l == 0 ? term : total + term;
  }
  return total;
}

double load_balance_value(const std::vector<RouterDecision>& decisions) {
  if (decisions.empty()) throw ArgumentError("load_balance_value: no decisions");
  double total = 0.0;
  for (const RouterDecision& d : decisions) {
    if (d.rows() == 0) throw ArgumentError("load_balance_value: empty batch");
    const std::size_t n = d.routed();
    std::vector<double> f(n, 0.0), p(n, 0.0);
    for (std::size_t r = 0; r < d.rows(); ++r) {
      for (std::size_t c : d.selected[r]) f[c] += 1.0;
      for (std::size_t c = 0; c < n; ++c) p[c] += d.probs.at(r, c);
    }
    double lb = 0.0;
    const double rows = static_cast<double>(d.rows());
    for (std::size_t c = 0; c < n; ++c) lb += (f[c] / rows) * (p[c] / rows);
    total += static_cast<double>(n) * lb;
  }
  return total / static_cast<double>(decisions.size());
}

// ---------------------------------------------------------------------------
// Model

MoDEModel::MoDEModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.d_model;
  const double depth_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  auto fan_in = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  w_goal_ = add("embed.goal.W", normal_init({config_.goal_dim, d}, fan_in(config_.goal_dim), rng));
  b_goal_ = add("embed.goal.b", Tensor({d}), false);
  w_state_ = add("embed.state.W", normal_init({config_.state_dim, d}, fan_in(config_.state_dim), rng));
  b_state_ = add("embed.state.b", Tensor({d}), false);
  w_action_ = add("embed.action.W", normal_init({config_.action_dim, d}, fan_in(config_.action_dim), rng));
  b_action_ = add("embed.action.b", Tensor({d}), false);
  w_phi_ = add("noise.W_phi", normal_init({1, d}, 1.0, rng));
  b_phi_ = add("noise.b_phi", Tensor({d}), false);
  pos_ = add("embed.position", normal_init({config_.tokens(), d}, 0.1, rng), false);

  const std::size_t width = config_.expert_width();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    LayerIndex li;
    li.ln1_gain = add(p + "ln1.gain", Tensor({d}, 1.0), false);
    li.ln1_bias = add(p + "ln1.bias", Tensor({d}), false);
    li.w_q = add(p + "attn.W_Q", normal_init({d, d}, fan_in(d), rng));
    li.w_k = add(p + "attn.W_K", normal_init({d, d}, fan_in(d), rng));
    li.w_v = add(p + "attn.W_V", normal_init({d, d}, fan_in(d), rng));
    li.w_o = add(p + "attn.W_O", normal_init({d, d}, fan_in(d) * depth_scale, rng));
    li.ln2_gain = add(p + "ln2.gain", Tensor({d}, 1.0), false);
    li.ln2_bias = add(p + "ln2.bias", Tensor({d}), false);
    if (config_.routed_experts() > 0) {
      li.w_router = add(p + "router.W_R", truncated_normal_init({d, config_.routed_experts()}, 0.02, rng));
    }
    if (config_.noise_cond_mode == NoiseCondMode::film) {
      li.film_scale_w = add(p + "film1.scale.W", Tensor({d, d}));
      li.film_scale_b = add(p + "film1.scale.b", Tensor({d}, 1.0), false);
      li.film_shift_w = add(p + "film1.shift.W", Tensor({d, d}));
      li.film_shift_b = add(p + "film1.shift.b", Tensor({d}), false);
      li.film2_scale_w = add(p + "film2.scale.W", Tensor({d, d}));
      li.film2_scale_b = add(p + "film2.scale.b", Tensor({d}, 1.0), false);
      li.film2_shift_w = add(p + "film2.shift.W", Tensor({d, d}));
      li.film2_shift_b = add(p + "film2.shift.b", Tensor({d}), false);
    }
    for (std::size_t e = 0; e < config_.expert_count(); ++e) {
      const std::string q = p + "expert." + std::to_string(e) + ".";
      ExpertIndex ei;
      ei.w_gate = add(q + "W_gate", normal_init({d, width}, fan_in(d), rng));
      ei.w_up = add(q + "W_up", normal_init({d, width}, fan_in(d), rng));
      ei.w_down = add(q + "W_down", normal_init({width, d}, fan_in(width) * depth_scale, rng));
      li.experts.push_back(ei);
    }
    layers_.push_back(std::move(li));
  }
  ln_f_gain_ = add("final.ln.gain", Tensor({d}, 1.0), false);
  ln_f_bias_ = add("final.ln.bias", Tensor({d}), false);
  w_out_ = add("final.W_out", normal_init({d, config_.action_dim}, 0.02, rng));
  b_out_ = add("final.b_out", Tensor({config_.action_dim}), false);
}

std::size_t MoDEModel::add(std::string name, Tensor value, bool decay) {
  Parameter p;
  p.name = name;
  p.grad = Tensor(value.shape());
  p.value = std::move(value);
  p.decay = decay;
  params_.push_back(std::move(p));
  by_name_[std::move(name)] = params_.size() - 1;
  return params_.size() - 1;
}

Var MoDEModel::leaf(Tape& tape, std::size_t index) const {
  // Gradients are accumulation buffers, not model state; the tape only
  // writes them when recording.
  return tape.param(const_cast<Parameter&>(params_[index]));
}

std::vector<Parameter*> MoDEModel::parameter_ptrs() {
  std::vector<Parameter*> out;
  for (Parameter& p : params_) out.push_back(&p);
  return out;
}

Parameter& MoDEModel::param(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ArgumentError("no parameter named '" + name + "'");
  return params_[it->second];
}

const Parameter& MoDEModel::param(const std::string& name) const {
  return const_cast<MoDEModel*>(this)->param(name);
}

std::size_t MoDEModel::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.size();
  return n;
}

void MoDEModel::zero_grad() {
  for (Parameter& p : params_) p.zero_grad();
}

void MoDEModel::set_routers_frozen(bool frozen) {
  for (const LayerIndex& l : layers_)
    if (l.w_router != npos) params_[l.w_router].frozen = frozen;
  // Noise-conditioned routes also depend on the noise projector.
  if (config_.routing_mode != RoutingMode::token_only && config_.routing_mode != RoutingMode::dense) {
    params_[w_phi_].frozen = frozen;
    params_[b_phi_].frozen = frozen;
  }
}

std::uint64_t fnv1a(std::span<const double> values, std::uint64_t h) {
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::uint64_t MoDEModel::routing_fingerprint() const {
  std::uint64_t h = fnv1a(params_[w_phi_].value.flat());
  h = fnv1a(params_[b_phi_].value.flat(), h);
  for (const LayerIndex& l : layers_)
    if (l.w_router != npos) h = fnv1a(params_[l.w_router].value.flat(), h);
  return h;
}

std::uint64_t MoDEModel::expert_fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const LayerIndex& l : layers_)
    for (const ExpertIndex& e : l.experts)
      for (std::size_t idx : {e.w_gate, e.w_up, e.w_down}) h = fnv1a(params_[idx].value.flat(), h);
  return h;
}

Var MoDEModel::noise_tokens(Tape& tape, const std::vector<double>& sigmas) const {
  Tensor c_noise({sigmas.size(), 1});
  for (std::size_t b = 0; b < sigmas.size(); ++b) {
    if (!(sigmas[b] > 0.0)) throw DomainError("noise token: sigma must be > 0, got " + std::to_string(sigmas[b]));
    c_noise[b] = std::log(sigmas[b]) / 4.0;
  }
  return ad::add_bias(ad::matmul(tape.constant(std::move(c_noise)), leaf(tape, w_phi_)), leaf(tape, b_phi_));
}

Tensor MoDEModel::encode_noise_token(double sigma) const {
  Tape tape(false);
  return noise_tokens(tape, {sigma}).value().reshaped({config_.d_model});
}

Var MoDEModel::build_sequence(Tape& tape, Var phi_rows, const Tensor& goals, const Tensor& states,
                              const Tensor& actions) const {
  const std::size_t batch = phi_rows.value().rows();
  const std::size_t h = config_.history_len;
  const std::size_t j = config_.chunk_len;
  if (goals.size() != batch * config_.goal_dim) {
    throw DimensionError("build_sequence: goals " + shape_string(goals.shape()) + " for batch " +
                         std::to_string(batch));
  }
  if (states.size() != batch * h * config_.state_dim) {
    throw DimensionError("build_sequence: states " + shape_string(states.shape()) + " do not match history " +
                         std::to_string(h));
  }
  if (actions.size() != batch * j * config_.action_dim) {
    throw DimensionError("build_sequence: actions " + shape_string(actions.shape()) + " do not match chunk length " +
                         std::to_string(j));
  }
  Var g = ad::add_bias(ad::matmul(tape.constant(goals.reshaped({batch, config_.goal_dim})), leaf(tape, w_goal_)),
                       leaf(tape, b_goal_));
  Var s = ad::add_bias(
      ad::matmul(tape.constant(states.reshaped({batch * h, config_.state_dim})), leaf(tape, w_state_)),
      leaf(tape, b_state_));
  Var a = ad::add_bias(
      ad::matmul(tape.constant(actions.reshaped({batch * j, config_.action_dim})), leaf(tape, w_action_)),
      leaf(tape, b_action_));
  return ad::interleave_groups({phi_rows, g, s, a}, {1, 1, h, j}, batch);
}

AttentionVars MoDEModel::attention_vars(Tape& tape, std::size_t layer) const {
  const LayerIndex& li = layers_.at(layer);
  return {leaf(tape, li.w_q), leaf(tape, li.w_k), leaf(tape, li.w_v), leaf(tape, li.w_o)};
}

std::vector<SwiGLUVars> MoDEModel::expert_vars(Tape& tape, std::size_t layer) const {
  std::vector<SwiGLUVars> out;
  for (const ExpertIndex& e : layers_.at(layer).experts)
    out.push_back({leaf(tape, e.w_gate), leaf(tape, e.w_up), leaf(tape, e.w_down)});
  return out;
}

Var MoDEModel::block_forward(Tape& tape, std::size_t layer, Var x, Var phi, const ForwardOptions& opts,
                             RoutedLayer* routed) const {
  const LayerIndex& li = layers_.at(layer);
  const std::size_t group = config_.tokens();
  const bool train = opts.phase == Phase::train;
  const bool drop = train && opts.dropout && opts.rng != nullptr;
  Rng* rng = drop ? opts.rng : nullptr;
  const bool film = config_.noise_cond_mode == NoiseCondMode::film;

  auto modulate = [&](Var h, std::size_t sw, std::size_t sb, std::size_t hw, std::size_t hb) {
    Var scale = ad::add_bias(ad::matmul(phi, leaf(tape, sw)), leaf(tape, sb));
    Var shift = ad::add_bias(ad::matmul(phi, leaf(tape, hw)), leaf(tape, hb));
    return ad::add_group(ad::mul_group(h, scale, group), shift, group);
  };

  Var h = ad::layer_norm(x, leaf(tape, li.ln1_gain), leaf(tape, li.ln1_bias));
  if (film) h = modulate(h, li.film_scale_w, li.film_scale_b, li.film_shift_w, li.film_shift_b);
  const bool add_phi = config_.noise_cond_mode == NoiseCondMode::token_and_attention;
  static const Tensor no_mask;
  Var att = noise_cond_attention(h, add_phi ? &phi : nullptr, attention_vars(tape, layer), group, config_.n_heads,
                                 no_mask, drop ? config_.attn_dropout : 0.0, rng);
  if (drop) att = ad::dropout(att, config_.residual_dropout, *rng);
  Var y = x + att;

  Var h2 = ad::layer_norm(y, leaf(tape, li.ln2_gain), leaf(tape, li.ln2_bias));
  if (film) h2 = modulate(h2, li.film2_scale_w, li.film2_scale_b, li.film2_shift_w, li.film2_shift_b);

  Var moe;
  if (opts.moe_override) {
    moe = opts.moe_override(tape, layer, h2);
  } else {
    const double mlp_p = drop ? config_.mlp_dropout : 0.0;
    auto experts = expert_vars(tape, layer);
    if (config_.routing_mode == RoutingMode::dense) {
      moe = moe_forward(h2, nullptr, experts, false, mlp_p, rng);
    } else {
      const bool by_token = config_.routing_mode == RoutingMode::token_only;
      RoutedLayer r = route(by_token ? h2 : phi, leaf(tape, li.w_router), config_.topk, opts.phase, opts.rng,
                            by_token ? 1 : group, opts.renormalize);
      if (config_.routing_mode == RoutingMode::shared_expert) r.decision.expert_offset = 1;
      moe = moe_forward(h2, &r, experts, config_.routing_mode == RoutingMode::shared_expert, mlp_p, rng);
      if (routed) *routed = std::move(r);
    }
  }
  if (drop) moe = ad::dropout(moe, config_.residual_dropout, *rng);
  return y + moe;
}

ForwardResult MoDEModel::forward(Tape& tape, const DenoiserInput& input, const std::vector<double>& sigmas,
                                 const ForwardOptions& opts) const {
  const std::size_t batch = input.batch();
  const std::size_t j = config_.chunk_len;
  const std::size_t a_dim = config_.action_dim;
  if (batch == 0 || sigmas.size() != batch) {
    throw DimensionError("forward: " + std::to_string(sigmas.size()) + " noise levels for batch " +
                         std::to_string(batch));
  }
  if (input.noisy_actions.size() != batch * j * a_dim) {
    throw DimensionError("forward: noisy actions " + shape_string(input.noisy_actions.shape()) +
                         " do not match chunk " + std::to_string(j) + "x" + std::to_string(a_dim));
  }
  if (opts.phase == Phase::train && opts.rng == nullptr && config_.routing_mode != RoutingMode::dense &&
      !opts.moe_override) {
    throw ArgumentError("forward: train phase needs an rng");
  }

  std::vector<PreconditionCoeffs> pc(batch);
  for (std::size_t b = 0; b < batch; ++b) pc[b] = precondition(sigmas[b], config_.schedule.sigma_data);

  Tensor scaled = input.noisy_actions.reshaped({batch * j, a_dim});
  Tensor skip = scaled;
  std::vector<double> c_out_rows(batch * j);
  for (std::size_t r = 0; r < batch * j; ++r) {
    const PreconditionCoeffs& c = pc[r / j];
    c_out_rows[r] = c.c_out;
    for (std::size_t k = 0; k < a_dim; ++k) {
      skip[r * a_dim + k] *= c.c_skip;
      scaled[r * a_dim + k] *= c.c_in;
    }
  }

  ForwardResult result;
  result.phi = noise_tokens(tape, sigmas);
  Var slot = config_.noise_cond_mode == NoiseCondMode::film ? tape.constant(Tensor({batch, config_.d_model}))
                                                            : result.phi;
  Var x = build_sequence(tape, slot, input.goals, input.states, scaled);
  x = ad::add_tiled(x, leaf(tape, pos_));

  result.routes.reserve(config_.n_layers);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    RoutedLayer routed;
    x = block_forward(tape, l, x, result.phi, opts, &routed);
    if (routed.decision.rows() > 0) result.routes.push_back(std::move(routed));
  }
  x = ad::layer_norm(x, leaf(tape, ln_f_gain_), leaf(tape, ln_f_bias_));

  std::vector<std::size_t> action_rows;
  action_rows.reserve(batch * j);
  const std::size_t group = config_.tokens();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < j; ++t) action_rows.push_back(b * group + config_.first_action_token() + t);
  Var f = ad::add_bias(ad::matmul(ad::gather_rows(x, std::move(action_rows)), leaf(tape, w_out_)),
                       leaf(tape, b_out_));
  result.raw = f;
  result.denoised = ad::scale_rows(f, std::move(c_out_rows)) + tape.constant(std::move(skip));
  return result;
}

Tensor MoDEModel::denoise(const DenoiserInput& input, double sigma, const ForwardOptions& opts) const {
  Tape tape(false);
  ForwardOptions o = opts;
  o.phase = Phase::infer;
  auto r = forward(tape, input, std::vector<double>(input.batch(), sigma), o);
  return r.denoised.value().reshaped({input.batch(), config_.chunk_len, config_.action_dim});
}

}  // namespace mode
