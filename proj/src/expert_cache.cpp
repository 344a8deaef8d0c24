#include "mode/expert_cache.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "mode/error.hpp"

namespace mode {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> view(const Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
Eigen::Map<RowMatrix> view(Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

bool cacheable(const ModelConfig& c) { return c.routing_mode != RoutingMode::token_only; }

Tensor rollout_on_grid(const Denoiser& denoiser, const std::vector<double>& grid, const Tensor& noise) {
  Tensor x = noise;
  for (double& v : x.flat()) v *= grid.front();
  return ddim_integrate(denoiser, std::move(x), grid);
}

Tensor dynamic_rollout_on_grid(const MoDEModel& model, const DenoiserInput& context, const Tensor& noise,
                               const std::vector<double>& grid) {
  DenoiserInput in = context;
  return rollout_on_grid([&](const Tensor& x, double sigma, std::size_t) {
    in.noisy_actions = x;
    return model.denoise(in, sigma);
  }, grid, noise);
}

double elapsed_ns(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now() - t0).count();
}

DenoiserInput random_context(const ModelConfig& c, std::size_t batch, Rng& rng) {
  DenoiserInput in;
  in.noisy_actions = Tensor({batch, c.chunk_len, c.action_dim});
  in.states = Tensor({batch, c.history_len, c.state_dim});
  in.goals = Tensor({batch, c.goal_dim});
  for (Tensor* t : {&in.states, &in.goals})
    for (double& v : t->flat()) v = rng.normal();
  return in;
}

}  // namespace

RouteTable::RouteTable(std::vector<double> grid, std::size_t layers, std::vector<RouteEntry> entries,
                       std::uint64_t fingerprint, std::size_t expert_offset)
    : grid_(std::move(grid)),
      layers_(layers),
      entries_(std::move(entries)),
      fingerprint_(fingerprint),
      expert_offset_(expert_offset) {
  if (entries_.size() != layers_ * grid_.size() && !entries_.empty()) {
    throw DimensionError("RouteTable: " + std::to_string(entries_.size()) + " entries for " +
                         std::to_string(layers_) + " layers x " + std::to_string(grid_.size()) + " levels");
  }
}

const RouteEntry& RouteTable::at(std::size_t layer, std::size_t level) const {
  if (layer >= layers_ || level >= grid_.size()) {
    throw DomainError("RouteTable: (" + std::to_string(layer) + ", " + std::to_string(level) + ") out of range");
  }
  return entries_.at(layer * grid_.size() + level);
}

RouteTable precompute_routes(const MoDEModel& model, const NoiseSchedule& schedule) {
  const ModelConfig& c = model.config();
  if (!cacheable(c)) throw ConfigError("precompute_routes: token-conditioned routing depends on content");
  auto grid = make_sigma_grid(schedule);
  const bool routed = c.routing_mode != RoutingMode::dense;
  std::vector<RouteEntry> entries;
  if (routed) {
    entries.resize(c.n_layers * grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const Tensor phi = model.encode_noise_token(grid[i]).reshaped({1, c.d_model});
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        const Tensor& w = model.param(model.layer(l).w_router).value;
        RouterDecision d = route(phi, w, c.topk, Phase::infer, nullptr, c.tokens());
        RouteEntry& e = entries[l * grid.size() + i];
        e.selected = d.selected[0];
        e.weights.assign(d.weights.flat().begin(), d.weights.flat().end());
      }
    }
  }
  const std::size_t offset = c.routing_mode == RoutingMode::shared_expert ? 1 : 0;
  return RouteTable(std::move(grid), routed ? c.n_layers : 0, std::move(entries), model.routing_fingerprint(),
                    offset);
}

RouteTable precompute_routes(const MoDEModel& model) { return precompute_routes(model, model.config().schedule); }

Tensor FusedExpert::apply(const Tensor& x) const {
  const auto m = static_cast<Eigen::Index>(width());
  if (x.cols() != gate_up.rows()) {
    throw DimensionError("FusedExpert: input width " + std::to_string(x.cols()) + ", expected " +
                         std::to_string(gate_up.rows()));
  }
  Tensor out({x.rows(), down.cols()});
  const auto xv = view(x);
  auto ov = view(out);
  // Row tiles keep the [rows x 2M] hidden activations cache resident.
  constexpr Eigen::Index tile = 64;
  RowMatrix h, act;
  for (Eigen::Index r0 = 0; r0 < xv.rows(); r0 += tile) {
    const Eigen::Index rows = std::min(tile, xv.rows() - r0);
    h.noalias() = xv.middleRows(r0, rows) * view(gate_up);
    auto gate = h.leftCols(m).array();
    act = (gate * (1.0 + (-gate).exp()).inverse() * h.rightCols(m).array()).matrix();
    ov.middleRows(r0, rows).noalias() = act * view(down);
  }
  return out;
}

std::vector<FusedExpert> fuse_experts(const MoDEModel& model, const RouteTable& table) {
  const ModelConfig& c = model.config();
  if (table.fingerprint() != model.routing_fingerprint()) {
    throw ValidationError("fuse_experts: route table was built for different router weights");
  }
  const std::size_t levels = table.levels();
  const std::size_t d = c.d_model;
  std::vector<FusedExpert> out;
  out.reserve(c.n_layers * levels);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& experts = model.layer(l).experts;
    for (std::size_t i = 0; i < levels; ++i) {
      FusedExpert f;
      if (c.routing_mode == RoutingMode::dense) {
        f.experts = {0};
        f.weights = {1.0};
      } else {
        const RouteEntry& e = table.at(l, i);
        if (table.expert_offset() == 1) {
          f.experts.push_back(0);
          f.weights.push_back(1.0);
        }
        for (std::size_t col : e.selected) {
          f.experts.push_back(col + table.expert_offset());
          f.weights.push_back(e.weights[col]);
        }
      }
      std::size_t m = 0;
      for (std::size_t ex : f.experts) m += model.param(experts.at(ex).w_gate).value.cols();
      f.gate_up = Tensor({d, 2 * m});
      f.down = Tensor({m, d});
      std::size_t col0 = 0;
      for (std::size_t s = 0; s < f.experts.size(); ++s) {
        const auto& idx = experts[f.experts[s]];
        const Tensor& wg = model.param(idx.w_gate).value;
        const Tensor& wu = model.param(idx.w_up).value;
        const Tensor& wd = model.param(idx.w_down).value;
        const auto h = static_cast<Eigen::Index>(wg.cols());
        auto gu = view(f.gate_up);
        gu.middleCols(static_cast<Eigen::Index>(col0), h) = view(wg);
        gu.middleCols(static_cast<Eigen::Index>(m + col0), h) = view(wu);
        view(f.down).middleRows(static_cast<Eigen::Index>(col0), h) = f.weights[s] * view(wd);
        col0 += static_cast<std::size_t>(h);
      }
      out.push_back(std::move(f));
    }
  }
  return out;
}

ExpertCache::ExpertCache(RouteTable table, std::vector<FusedExpert> fused, std::uint64_t expert_fingerprint)
    : table_(std::move(table)), fused_(std::move(fused)), expert_fingerprint_(expert_fingerprint) {
  layers_ = table_.levels() ? fused_.size() / table_.levels() : 0;
}

const FusedExpert& ExpertCache::fused(std::size_t layer, std::size_t level) const {
  if (layer >= layers_ || level >= levels()) {
    throw DomainError("expert cache: (layer " + std::to_string(layer) + ", level " + std::to_string(level) +
                      ") out of range");
  }
  return fused_[layer * levels() + level];
}

void ExpertCache::check(const MoDEModel& model, bool deep) const {
  if (model.routing_fingerprint() != table_.fingerprint()) {
    throw ValidationError("expert cache is stale: router weights changed since it was built");
  }
  if (deep && model.expert_fingerprint() != expert_fingerprint_) {
    throw ValidationError("expert cache is stale: expert weights changed since it was built");
  }
  if (layers_ != model.config().n_layers) throw ValidationError("expert cache: layer count mismatch");
}

ExpertCache build_expert_cache(const MoDEModel& model, const NoiseSchedule& schedule) {
  RouteTable table = precompute_routes(model, schedule);
  auto fused = fuse_experts(model, table);
  return ExpertCache(std::move(table), std::move(fused), model.expert_fingerprint());
}

ExpertCache build_expert_cache(const MoDEModel& model) { return build_expert_cache(model, model.config().schedule); }

Tensor cached_forward(const MoDEModel& model, const ExpertCache& cache, const DenoiserInput& input,
                      std::size_t level) {
  if (level >= cache.levels()) {
    throw DomainError("cached_forward: grid index " + std::to_string(level) + " outside [0, " +
                      std::to_string(cache.levels()) + ")");
  }
  cache.check(model);
  ForwardOptions opts;
  opts.phase = Phase::infer;
  opts.moe_override = [&](Tape& tape, std::size_t layer, Var x) {
    return tape.constant(cache.fused(layer, level).apply(x.value()));
  };
  const ModelConfig& c = model.config();
  const double sigma = cache.table().grid()[level];
  Tape tape(false);
  auto r = model.forward(tape, input, std::vector<double>(input.batch(), sigma), opts);
  return r.denoised.value().reshaped({input.batch(), c.chunk_len, c.action_dim});
}

Tensor dynamic_rollout(const MoDEModel& model, const DenoiserInput& context, const Tensor& actions_noise,
                       const NoiseSchedule& schedule) {
  return dynamic_rollout_on_grid(model, context, actions_noise, make_sigma_grid(schedule));
}

Tensor cached_rollout(const MoDEModel& model, const ExpertCache& cache, const DenoiserInput& context,
                      const Tensor& actions_noise) {
  DenoiserInput in = context;
  return rollout_on_grid([&](const Tensor& x, double, std::size_t step) {
    in.noisy_actions = x;
    return cached_forward(model, cache, in, step);
  }, cache.table().grid(), actions_noise);
}

EquivalenceReport verify_equivalence(const MoDEModel& model, const ExpertCache& cache, std::size_t trials,
                                     std::uint64_t seed) {
  if (trials == 0) throw ArgumentError("verify_equivalence: trials must be >= 1");
  cache.check(model, true);
  const ModelConfig& c = model.config();
  EquivalenceReport report;
  report.trials = trials;
  Rng rng(seed);
  const std::size_t chunk = 25;
  for (std::size_t done = 0; done < trials; done += chunk) {
    const std::size_t batch = std::min(chunk, trials - done);
    DenoiserInput ctx = random_context(c, batch, rng);
    Tensor noise({batch, c.chunk_len, c.action_dim});
    for (double& v : noise.flat()) v = rng.normal();
    Tensor a = dynamic_rollout_on_grid(model, ctx, noise, cache.table().grid());
    Tensor b = cached_rollout(model, cache, ctx, noise);
    for (std::size_t e = 0; e < a.size(); ++e) report.max_abs_diff = std::max(report.max_abs_diff, std::abs(a[e] - b[e]));
  }
  return report;
}

std::string to_string(FlopMode m) {
  switch (m) {
    case FlopMode::dense_equal_params: return "dense_equal_params";
    case FlopMode::moe_dynamic: return "moe_dynamic";
    case FlopMode::moe_cached: return "moe_cached";
  }
  return "unknown";
}

double matmul_flops(std::size_t m, std::size_t k, std::size_t n) {
  return 2.0 * static_cast<double>(m) * static_cast<double>(k) * static_cast<double>(n);
}

double linear_flops(std::size_t tokens, std::size_t in, std::size_t out) { return matmul_flops(tokens, in, out); }

FlopReport count_flops(const ModelConfig& c, FlopMode mode, std::size_t batch) {
  c.validate();
  const double b = static_cast<double>(batch);
  const std::size_t t = c.tokens();
  const std::size_t n = batch * t;
  const double nd = static_cast<double>(n * c.d_model);
  const std::size_t d = c.d_model;
  const std::size_t j = c.chunk_len;
  const bool film = c.noise_cond_mode == NoiseCondMode::film;
  const double layer_norm = 7.0 * nd;

  FlopReport r;
  r.batch = batch;
  r.tokens = n;
  auto add = [&](const std::string& name, double flops) {
    for (FlopEntry& e : r.entries)
      if (e.component == name) {
        e.flops += flops;
        return;
      }
    r.entries.push_back({mode, name, flops});
  };

  // Noise token (log, projection, bias), goal/state/action embedders with
  // biases, the c_in scaling of the actions and the positional add.
  add("embedders", b + linear_flops(batch, 1, d) + b * d);
  add("embedders", linear_flops(batch, c.goal_dim, d) + b * d);
  add("embedders", linear_flops(batch * c.history_len, c.state_dim, d) + b * c.history_len * d);
  add("embedders", b * j * c.action_dim + linear_flops(batch * j, c.action_dim, d) + b * j * d);
  add("embedders", nd);

  const double tt = static_cast<double>(t * t);
  const double film_cost = film ? 2.0 * linear_flops(batch, d, d) + 2.0 * b * d + 2.0 * nd : 0.0;
  const std::size_t routed = c.routed_experts();
  const std::size_t shared = c.routing_mode == RoutingMode::shared_expert ? 1 : 0;
  const bool has_router = c.routing_mode != RoutingMode::dense && mode != FlopMode::dense_equal_params;
  const std::size_t router_rows = c.routing_mode == RoutingMode::token_only ? n : batch;

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    double attn = layer_norm + film_cost;
    if (!film) attn += nd;  // phi added to every token
    attn += 3.0 * linear_flops(n, d, d);
    attn += 2.0 * b * tt * static_cast<double>(d);  // scores over all heads
    attn += 5.0 * b * static_cast<double>(c.n_heads) * tt;
    attn += 2.0 * b * tt * static_cast<double>(d);  // weighted values
    attn += linear_flops(n, d, d) + nd;              // output projection, residual
    add("attention", attn);

    if (has_router && mode == FlopMode::moe_dynamic) {
      const double rr = static_cast<double>(router_rows);
      const double nr = static_cast<double>(routed);
      add("router", linear_flops(router_rows, d, routed) + 5.0 * rr * nr + rr * nr + rr * static_cast<double>(c.topk));
    } else {
      add("router", 0.0);
    }

    auto swiglu = [&](std::size_t width) {
      return 2.0 * linear_flops(n, d, width) + 2.0 * static_cast<double>(n * width) + linear_flops(n, width, d);
    };
    double experts = layer_norm + film_cost + nd;  // pre-norm, modulation, residual
    double dispatch = 0.0;
    const std::size_t h = c.hidden();
    switch (mode) {
      case FlopMode::dense_equal_params:
        experts += swiglu(c.n_experts * h);
        break;
      case FlopMode::moe_dynamic:
        if (c.routing_mode == RoutingMode::dense) {
          experts += swiglu(c.expert_width());
        } else {
          const std::size_t passes = c.topk + shared;
          for (std::size_t p = 0; p < passes; ++p) experts += swiglu(h);
          dispatch = static_cast<double>(c.topk) * nd + static_cast<double>(passes - 1) * nd;
        }
        break;
      case FlopMode::moe_cached:
        experts += swiglu(c.routing_mode == RoutingMode::dense ? c.expert_width() : (c.topk + shared) * h);
        break;
    }
    add("dispatch", dispatch);
    add("experts", experts);
  }

  const double out_rows = b * static_cast<double>(j);
  add("projection", layer_norm + linear_flops(batch * j, d, c.action_dim) + out_rows * c.action_dim +
                        3.0 * out_rows * c.action_dim);
  return r;
}

FlopReport count_flops(const ModelConfig& config, std::size_t batch) {
  FlopReport all;
  for (FlopMode m : {FlopMode::dense_equal_params, FlopMode::moe_dynamic, FlopMode::moe_cached}) {
    FlopReport r = count_flops(config, m, batch);
    all.batch = r.batch;
    all.tokens = r.tokens;
    all.entries.insert(all.entries.end(), r.entries.begin(), r.entries.end());
  }
  return all;
}

double FlopReport::total(FlopMode mode) const {
  double s = 0.0;
  for (const FlopEntry& e : entries)
    if (e.mode == mode) s += e.flops;
  return s;
}

double FlopReport::component(FlopMode mode, const std::string& name) const {
  for (const FlopEntry& e : entries)
    if (e.mode == mode && e.component == name) return e.flops;
  throw ArgumentError("FlopReport: no component '" + name + "' for mode " + to_string(mode));
}

double FlopReport::overhead_reduction() const {
  const double dynamic = component(FlopMode::moe_dynamic, "router") + component(FlopMode::moe_dynamic, "dispatch");
  const double cached = component(FlopMode::moe_cached, "router") + component(FlopMode::moe_cached, "dispatch");
  return dynamic > 0.0 ? (dynamic - cached) / dynamic : 0.0;
}

void FlopReport::set_wall_ns(FlopMode mode, double ns) {
  for (auto& [m, v] : wall_ns)
    if (m == mode) {
      v = ns;
      return;
    }
  wall_ns.emplace_back(mode, ns);
}

double FlopReport::wall(FlopMode mode) const {
  for (const auto& [m, v] : wall_ns)
    if (m == mode) return v;
  return -1.0;
}

std::string FlopReport::to_csv() const {
  std::ostringstream os;
  os << "# flops per denoiser forward: matmul 2mkn, softmax 5/elem, elementwise 1/elem, layer_norm 7/elem\n";
  os << "mode,component,flops,tokens,batch,wall_ns\n";
  os << std::setprecision(17);
  std::vector<FlopMode> modes;
  for (const FlopEntry& e : entries)
    if (std::find(modes.begin(), modes.end(), e.mode) == modes.end()) modes.push_back(e.mode);
  for (FlopMode m : modes) {
    const double w = wall(m);
    auto wall_field = [&] {
      std::ostringstream f;
      if (w >= 0.0) f << std::fixed << std::setprecision(0) << w;
      return f.str();
    };
    for (const FlopEntry& e : entries)
      if (e.mode == m) os << to_string(m) << ',' << e.component << ',' << e.flops << ',' << tokens << ',' << batch
                          << ',' << wall_field() << '\n';
    os << to_string(m) << ",total," << total(m) << ',' << tokens << ',' << batch << ',' << wall_field() << '\n';
  }
  return os.str();
}

FusionTiming time_fusion(const MoDEModel& model, const ExpertCache& cache, std::size_t batch, std::size_t reps,
                         std::uint64_t seed) {
  if (batch == 0 || reps == 0) throw ArgumentError("time_fusion: batch and reps must be >= 1");
  cache.check(model);
  const ModelConfig& c = model.config();
  Rng rng(seed);
  Tensor x({batch * c.tokens(), c.d_model});
  for (double& v : x.flat()) v = rng.normal();
  const auto& grid = cache.table().grid();
  const bool shared = c.routing_mode == RoutingMode::shared_expert;

  auto looped_once = [&] {
    double sink = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        Tape tape(false);
        Var xv = tape.constant(x);
        auto experts = model.expert_vars(tape, l);
        Var y;
        if (c.routing_mode == RoutingMode::dense) {
          y = moe_forward(xv, nullptr, experts, false);
        } else {
          Var phi = model.noise_tokens(tape, std::vector<double>(batch, grid[i]));
          Var w = tape.constant(model.param(model.layer(l).w_router).value);
          RoutedLayer r = route(phi, w, c.topk, Phase::infer, nullptr, c.tokens());
          r.decision.expert_offset = shared ? 1 : 0;
          y = moe_forward(xv, &r, experts, shared);
        }
        sink += y.value()[0];
      }
    }
    return sink;
  };
  auto fused_once = [&] {
    double sink = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i)
      for (std::size_t l = 0; l < c.n_layers; ++l) sink += cache.fused(l, i).apply(x)[0];
    return sink;
  };

  volatile double guard = looped_once() + fused_once();  // warm-up
  FusionTiming t;
  t.batch = batch;
  t.reps = reps;
  // Interleave the two so drift in machine load hits both equally.
  for (std::size_t r = 0; r < reps; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    guard = guard + looped_once();
    t.looped_ns += elapsed_ns(t0);
    t0 = std::chrono::steady_clock::now();
    guard = guard + fused_once();
    t.fused_ns += elapsed_ns(t0);
  }
  t.looped_ns /= static_cast<double>(reps);
  t.fused_ns /= static_cast<double>(reps);
  return t;
}

void measure_forward_wall(FlopReport& report, const MoDEModel& model, const ExpertCache& cache, std::size_t reps,
                          std::uint64_t seed) {
  if (reps == 0) throw ArgumentError("measure_forward_wall: reps must be >= 1");
  const ModelConfig& c = model.config();
  Rng rng(seed);
  DenoiserInput in = random_context(c, report.batch, rng);
  for (double& v : in.noisy_actions.flat()) v = rng.normal();
  const std::size_t level = cache.levels() / 2;
  const double sigma = cache.table().grid()[level];

  ModelConfig dense_cfg = c;
  dense_cfg.routing_mode = RoutingMode::dense;
  dense_cfg.topk = c.n_experts;  // one MLP as wide as all experts together
  MoDEModel dense(dense_cfg, seed);

  auto time = [&](auto&& fn) {
    fn();
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t r = 0; r < reps; ++r) fn();
    return elapsed_ns(t0) / static_cast<double>(reps);
  };
  report.set_wall_ns(FlopMode::dense_equal_params, time([&] { return dense.denoise(in, sigma); }));
  report.set_wall_ns(FlopMode::moe_dynamic, time([&] { return model.denoise(in, sigma); }));
  report.set_wall_ns(FlopMode::moe_cached, time([&] { return cached_forward(model, cache, in, level); }));
}

}  // namespace mode
