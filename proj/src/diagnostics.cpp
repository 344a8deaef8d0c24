#include "mode/diagnostics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "mode/diffusion.hpp"
#include "mode/error.hpp"
#include "mode/expert_cache.hpp"

namespace mode {

namespace {

bool noise_routed(const ModelConfig& c) {
  return c.routing_mode == RoutingMode::noise_only || c.routing_mode == RoutingMode::shared_expert;
}

const Tensor& router_weights(const MoDEModel& m, std::size_t layer) {
  const std::size_t idx = m.layer(layer).w_router;
  if (idx == MoDEModel::npos) throw ConfigError("layer " + std::to_string(layer) + " has no router");
  return m.param(idx).value;
}

Tensor as_row(const Tensor& phi) { return phi.reshaped({1, phi.size()}); }

}  // namespace

// ---------------------------------------------------------------------------
// Route map

double RouteMap::tv_distance(std::size_t layer) const {
  double tv = 0.0;
  for (std::size_t n = 0; n < experts; ++n) tv += std::abs(at(layer, 0, n) - at(layer, grid.size() - 1, n));
  return 0.5 * tv;
}

double RouteMap::max_tv_distance() const {
  double best = 0.0;
  for (std::size_t l = 0; l < layers; ++l) best = std::max(best, tv_distance(l));
  return best;
}

std::string RouteMap::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "layer,sigma_index,sigma,expert,weight\n";
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t i = 0; i < grid.size(); ++i)
      for (std::size_t n = 0; n < experts; ++n)
        os << l << ',' << i << ',' << grid[i] << ',' << n + expert_offset << ',' << at(l, i, n) << '\n';
  return os.str();
}

std::string RouteMap::to_svg() const {
  // Ten-step gradient from dark blue (panel minimum) to yellow (panel
  // maximum), binned by floor(10 t) with t = (w - min) / (max - min).
  static constexpr std::array<const char*, 10> kColors{"#30123b", "#4145ab", "#4675ed", "#39a2fc", "#1bcfd4",
                                                       "#24eca6", "#61fc6c", "#a4fc3b", "#d1e834", "#f9ba38"};
  const std::size_t cell_w = 28, cell_h = 18, left = 70, top = 40, gap = 24;
  const std::size_t panel_w = experts * cell_w;
  const std::size_t width = left + layers * (panel_w + gap);
  const std::size_t height = top + grid.size() * cell_h + 30;

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<!-- Expert routing probability per sampling level (rows, sigma_max at the top) and expert\n"
     << "     (columns). Each layer panel is scaled to its own min..max. Palette, low to high:";
  for (const char* c : kColors) os << ' ' << c;
  os << " -->\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"monospace\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  char buf[64];
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.3g", grid[i]);
    os << "<text x=\"" << left - 6 << "\" y=\"" << top + i * cell_h + cell_h - 5 << "\" text-anchor=\"end\">" << buf
       << "</text>\n";
  }
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t x0 = left + l * (panel_w + gap);
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t i = 0; i < grid.size(); ++i)
      for (std::size_t n = 0; n < experts; ++n) lo = std::min(lo, at(l, i, n)), hi = std::max(hi, at(l, i, n));
    os << "<g id=\"layer" << l << "\">\n"
       << "<text x=\"" << x0 << "\" y=\"" << top - 22 << "\">layer " << l << "</text>\n";
    for (std::size_t n = 0; n < experts; ++n) {
      os << "<text x=\"" << x0 + n * cell_w + cell_w / 2 << "\" y=\"" << top - 6 << "\" text-anchor=\"middle\">E"
         << n + expert_offset << "</text>\n";
    }
    for (std::size_t i = 0; i < grid.size(); ++i)
      for (std::size_t n = 0; n < experts; ++n) {
        const double t = hi > lo ? (at(l, i, n) - lo) / (hi - lo) : 0.0;
        const std::size_t bin = std::min<std::size_t>(9, static_cast<std::size_t>(t * 10.0));
        std::snprintf(buf, sizeof buf, "%.6f", at(l, i, n));
        os << "<rect x=\"" << x0 + n * cell_w << "\" y=\"" << top + i * cell_h << "\" width=\"" << cell_w
           << "\" height=\"" << cell_h << "\" fill=\"" << kColors[bin] << "\"><title>" << buf << "</title></rect>\n";
      }
    os << "</g>\n";
  }
  os << "<text x=\"" << left << "\" y=\"" << height - 8 << "\">rows: sigma levels; columns: experts</text>\n"
     << "</svg>\n";
  return os.str();
}

RouteMap route_map(const MoDEModel& model) {
  const ModelConfig& c = model.config();
  if (!noise_routed(c)) {
    throw ConfigError("route map needs noise-conditioned routing, got " + to_string(c.routing_mode));
  }
  RouteMap map;
  map.grid = make_sigma_grid(c.schedule);
  map.layers = c.n_layers;
  map.experts = c.routed_experts();
  map.expert_offset = c.expert_count() - c.routed_experts();
  map.probs.reserve(map.layers * map.grid.size() * map.experts);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const Tensor& w = router_weights(model, l);
    for (double sigma : map.grid) {
      const RouterDecision d = route(as_row(model.encode_noise_token(sigma)), w, c.topk, Phase::infer, nullptr);
      for (double p : d.probs.flat()) map.probs.push_back(p);
    }
  }
  return map;
}

// ---------------------------------------------------------------------------
// Gradient and routing checks

LossFn training_objective(const MoDEModel& model, const DenoiserInput& context, const Tensor& clean,
                          std::uint64_t seed, double gamma) {
  return [&model, context, clean, seed, gamma](Tape& tape) {
    Rng rng(seed);
    std::vector<RoutedLayer> routes;
    DenoiserInput in = context;
    ForwardOptions opts;
    opts.phase = Phase::train;
    opts.rng = &rng;
    const SmLoss sm = sm_loss_network(
        tape,
        [&](Tape& t, const Tensor& noisy, const std::vector<double>& sigmas) {
          in.noisy_actions = noisy;
          ForwardResult r = model.forward(t, in, sigmas, opts);
          routes = std::move(r.routes);
          return r.raw;
        },
        clean, model.config().schedule, rng);
    if (routes.empty() || gamma == 0.0) return sm.loss;
    return sm.loss + ad::scale(load_balance_loss(routes), gamma);
  };
}

namespace {

DenoiserInput random_input(const ModelConfig& c, std::size_t batch, Rng& rng) {
  DenoiserInput in;
  in.noisy_actions = Tensor({batch, c.chunk_len, c.action_dim});
  in.states = Tensor({batch, c.history_len, c.state_dim});
  in.goals = Tensor({batch, c.goal_dim});
  for (Tensor* t : {&in.noisy_actions, &in.states, &in.goals})
    for (double& v : t->flat()) v = rng.normal();
  return in;
}

ModelConfig tiny_config(std::size_t experts, std::size_t topk, RoutingMode routing, NoiseCondMode cond) {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_experts = experts;
  c.topk = topk;
  c.routing_mode = routing;
  c.noise_cond_mode = cond;
  return c;
}

}  // namespace

GradCheckReport tiny_grad_check(std::size_t experts, std::size_t topk, std::uint64_t seed, RoutingMode routing,
                                NoiseCondMode cond) {
  MoDEModel m(tiny_config(experts, topk, routing, cond), seed);
  Rng rng(Rng::split(seed, 2));
  const DenoiserInput in = random_input(m.config(), 3, rng);
  const Tensor clean = in.noisy_actions;
  return grad_check(training_objective(m, in, clean, seed + 1, 0.01), m.parameter_ptrs());
}

std::vector<LbCase> lb_analytic_cases() {
  auto decision = [](std::size_t rows, std::vector<std::vector<std::size_t>> selected, Tensor probs) {
    RouterDecision d;
    d.probs = std::move(probs);
    d.selected = std::move(selected);
    d.weights = Tensor({rows, d.probs.cols()});
    return d;
  };
  const Tensor one_hot = Tensor::matrix(4, 4, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0});
  const Tensor uniform({4, 4}, 0.25);
  std::vector<LbCase> out;
  out.push_back({"all_to_one", 4.0, load_balance_value({decision(4, {{0}, {0}, {0}, {0}}, one_hot)})});
  out.push_back({"balanced_k1", 1.0, load_balance_value({decision(4, {{0}, {1}, {2}, {3}}, uniform)})});
  out.push_back({"balanced_k2", 2.0, load_balance_value({decision(4, {{0, 1}, {2, 3}, {1, 0}, {3, 2}}, uniform)})});
  return out;
}

bool routing_is_content_independent(const MoDEModel& model, std::size_t trials, double sigma, std::uint64_t seed) {
  const ModelConfig& c = model.config();
  if (c.routing_mode == RoutingMode::dense) return true;
  Rng rng(seed);
  std::vector<RouterDecision> first;
  for (std::size_t t = 0; t < trials; ++t) {
    const DenoiserInput in = random_input(c, 1, rng);
    Tape tape(false);
    const ForwardResult r = model.forward(tape, in, {sigma}, ForwardOptions{});
    std::vector<RouterDecision> now;
    for (const RoutedLayer& l : r.routes) now.push_back(l.decision);
    if (t == 0) {
      first = std::move(now);
      continue;
    }
    for (std::size_t l = 0; l < now.size(); ++l) {
      if (now[l].selected != first[l].selected || now[l].weights != first[l].weights) return false;
    }
  }
  return true;
}

Fault fault_from_string(const std::string& s) {
  if (s == "none") return Fault::none;
  if (s == "renormalization") return Fault::renormalization;
  throw ArgumentError("unknown fault '" + s + "' (expected none or renormalization)");
}

std::string CheckResult::json_line() const {
  nlohmann::json j{{"check", name}, {"passed", passed}, {"value", value}, {"tolerance", tolerance}};
  if (!detail.empty()) j["detail"] = detail;
  return j.dump();
}

std::vector<CheckResult> run_checks(std::uint64_t seed, Fault fault, const MoDEModel* model) {
  std::vector<CheckResult> out;
  auto add = [&](std::string name, double value, double tol, std::string detail = {}) {
    out.push_back({std::move(name), value <= tol, value, tol, std::move(detail)});
  };

  double lb_err = 0.0;
  for (const LbCase& c : lb_analytic_cases()) lb_err = std::max(lb_err, std::abs(c.actual - c.expected));
  add("load_balance_closed_form", lb_err, 1e-9);

  const GradCheckReport g = tiny_grad_check(2, 1, seed);
  add("gradient_finite_difference", g.max_rel_error, 1e-4, "worst " + g.worst_parameter);

  {
    const NoiseSchedule schedule;
    const Tensor constant({2, 10, 2}, 0.375);
    const Tensor x = ddim_integrate([&](const Tensor&, double, std::size_t) { return constant; },
                                    Tensor({2, 10, 2}, 80.0), make_sigma_grid(schedule));
    double err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(x[i] - constant[i]));
    add("ddim_constant_denoiser", err, 0.0);
  }

  ModelConfig tiny = tiny_config(4, 2, RoutingMode::noise_only, NoiseCondMode::token_and_attention);
  tiny.n_layers = 2;
  const MoDEModel fresh(tiny, seed);
  const MoDEModel& m = model ? *model : fresh;
  const ModelConfig& c = m.config();

  if (c.routing_mode == RoutingMode::dense) {
    add("route_renormalization", 0.0, 1e-12, "dense model has no router");
  } else {
    // Router rows at every sampling level (noise routing) or random token
    // rows; selected weights must sum to one.
    Rng rng(Rng::split(seed, 3));
    double worst = 0.0;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      Tape tape(false);
      Tensor input({c.schedule.num_sample_steps, c.d_model});
      if (noise_routed(c)) {
        const auto grid = make_sigma_grid(c.schedule);
        for (std::size_t i = 0; i < grid.size(); ++i) {
          const Tensor phi = m.encode_noise_token(grid[i]);
          std::copy(phi.flat().begin(), phi.flat().end(), input.row(i).begin());
        }
      } else {
        for (double& v : input.flat()) v = rng.normal();
      }
      const RoutedLayer r = route(tape.constant(input), tape.constant(router_weights(m, l)), c.topk, Phase::infer,
                                  nullptr, 1, fault != Fault::renormalization);
      const Tensor& w = r.weights.value();
      for (std::size_t row = 0; row < w.rows(); ++row) {
        double s = 0.0;
        for (double v : w.row(row)) s += v;
        worst = std::max(worst, std::abs(s - 1.0));
      }
    }
    add("route_renormalization", worst, 1e-12);
  }

  if (noise_routed(c) || c.routing_mode == RoutingMode::dense) {
    const ExpertCache cache = build_expert_cache(m);
    const EquivalenceReport eq = verify_equivalence(m, cache, 10, seed);
    add("cached_equivalence", eq.max_abs_diff, 1e-8);
  } else {
    add("cached_equivalence", 0.0, 1e-8, "token routing cannot be cached");
  }

  if (noise_routed(c)) {
    const bool same = routing_is_content_independent(m, 20, 1.0, seed);
    add("noise_routing_content_independence", same ? 0.0 : 1.0, 0.0);
  }
  return out;
}

}  // namespace mode
