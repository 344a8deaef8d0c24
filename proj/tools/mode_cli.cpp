// mode: data generation, training, evaluation, benchmarks and diagnostics
// for the noise-routed mixture-of-experts diffusion policy.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mode/config_io.hpp"
#include "mode/diagnostics.hpp"
#include "mode/error.hpp"
#include "mode/expert_cache.hpp"
#include "mode/tasks.hpp"
#include "mode/trainer.hpp"

#ifndef MODE_VERSION
#define MODE_VERSION "dev"
#endif

namespace {

using nlohmann::json;
using namespace mode;

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kNumeric = 2;

// Thrown when a diagnostic invariant fails; maps to the numeric exit code.
struct InvariantFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
  std::string routing;
  std::string noise_cond;
  std::size_t topk = 0;
  std::size_t experts = 0;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* topk_opt = nullptr;
  CLI::Option* experts_opt = nullptr;
};

struct Run {
  std::string command;
  std::string argv;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  json config = json::object();
  std::vector<std::string> artifacts;
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ArgumentError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw ArgumentError("write to '" + path + "' failed");
}

// Exactly one manifest per run, next to the primary output.
void write_manifest(const Run& run, const Globals& g) {
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - run.start).count();
  const json seed = run.config.contains("seed") ? run.config["seed"] : json(g.seed);
  const json m{{"command", run.command},     {"argv", run.argv},           {"config", run.config},
               {"seed", seed},               {"artifacts", run.artifacts}, {"tool_version", MODE_VERSION},
               {"wall_time_s", wall}};
  write_text(g.out + ".manifest.json", m.dump(2) + "\n");
}

void load_config_file(const Globals& g, ModelConfig& model, TrainConfig& train) {
  if (g.config.empty()) return;
  std::ifstream f(g.config);
  if (!f) throw ArgumentError("cannot open config '" + g.config + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + g.config + "': " + e.what());
  }
  apply_config_json(j, model, train);
}

// Defaults, then the --config file, then explicit flags.
void resolve(const Globals& g, ModelConfig& model, TrainConfig& train) {
  load_config_file(g, model, train);
  if (!g.routing.empty()) model.routing_mode = routing_mode_from_string(g.routing);
  if (!g.noise_cond.empty()) model.noise_cond_mode = noise_cond_mode_from_string(g.noise_cond);
  if (g.topk_opt->count()) model.topk = g.topk;
  if (g.experts_opt->count()) model.n_experts = g.experts;
  if (g.seed_opt->count()) train.seed = g.seed;
  model.validate();
  train.validate();
}

bool model_flags_given(const Globals& g) {
  return !g.config.empty() || !g.routing.empty() || !g.noise_cond.empty() || g.topk_opt->count() ||
         g.experts_opt->count();
}

void reject_model_flags(const Globals& g, const std::string& command) {
  if (model_flags_given(g)) {
    throw ValidationError(command + ": the model comes from --ckpt; model flags and --config do not apply");
  }
}

std::string metrics_csv(Task task, const EvalMetrics& m) {
  std::ostringstream os;
  os.precision(17);
  os << "task,episodes,successes,success_rate,mean_steps,left,right,mode_coverage\n"
     << to_string(task) << ',' << m.episodes << ',' << m.successes << ',' << m.success_rate << ','
     << m.mean_steps << ',' << m.left << ',' << m.right << ',';
  if (m.mode_coverage) os << *m.mode_coverage;
  os << '\n';
  return os.str();
}

bool cacheable(const ModelConfig& c) { return c.routing_mode != RoutingMode::token_only; }

// ---------------------------------------------------------------------------

struct GenData {
  std::string task;
  std::size_t n = 1000;
  std::size_t tail = 10;
};

int gen_data(const GenData& o, const Globals& g, Run& run) {
  const Task task = task_from_string(o.task);
  const Dataset d = gen_dataset(task, o.n, g.seed, o.tail);
  save_dataset(d, g.out);
  run.config = {{"task", o.task}, {"n", o.n}, {"tail", o.tail}};
  run.artifacts = {g.out};
  std::printf("wrote %zu %s trajectories to %s\n", d.trajectories.size(), o.task.c_str(), g.out.c_str());
  return kOk;
}

struct TrainOpts {
  std::string data;
  std::string ckpt;  // finetune only
  std::optional<std::size_t> steps, batch;
  std::optional<double> lr, lb_gamma;
  bool freeze_routers = false;
};

void train_loop(Trainer& tr, const std::string& out, Run& run) {
  const std::size_t every = tr.config().log_every;
  const auto log = tr.run(0, [&](const StepLog& s) {
    if (every && (s.step % every == 0 || s.step == tr.config().steps)) {
      std::fprintf(stderr, "step %zu  sm %.5f  lb %.4f  grad %.4f\n", s.step, s.sm_loss, s.lb_loss, s.grad_norm);
    }
  });
  save_checkpoint(tr.checkpoint(), out);
  write_text(out + ".log.csv", log_csv(log));
  run.artifacts = {out, out + ".log.csv"};
  if (!log.empty()) std::printf("trained %zu steps, final sm_loss %.6f -> %s\n", log.size(), log.back().sm_loss, out.c_str());
}

int train(const TrainOpts& o, const Globals& g, Run& run) {
  ModelConfig model;
  TrainConfig cfg;
  if (o.steps) cfg.steps = *o.steps;
  if (o.batch) cfg.batch_size = *o.batch;
  if (o.lr) cfg.lr = *o.lr;
  if (o.lb_gamma) cfg.lb_gamma = *o.lb_gamma;
  cfg.freeze_routers = o.freeze_routers;
  resolve(g, model, cfg);
  const Dataset data = load_dataset(o.data);
  run.config = config_to_json(model, cfg);
  run.config["data"] = o.data;
  Trainer tr(model, cfg, data);
  train_loop(tr, g.out, run);
  return kOk;
}

int finetune(const TrainOpts& o, const Globals& g, Run& run) {
  const Checkpoint ck = load_checkpoint(o.ckpt);
  ModelConfig model = ck.model_config;
  TrainConfig cfg = ck.train_config;
  cfg.seed = g.seed;
  cfg.freeze_routers = o.freeze_routers;
  // Finetuning with frozen routers drops the balance term unless asked.
  cfg.lb_gamma = o.lb_gamma ? *o.lb_gamma : (o.freeze_routers ? 0.0 : ck.train_config.lb_gamma);
  if (o.steps) cfg.steps = *o.steps;
  if (o.batch) cfg.batch_size = *o.batch;
  if (o.lr) cfg.lr = *o.lr;
  if (!g.routing.empty() || !g.noise_cond.empty() || g.topk_opt->count() || g.experts_opt->count()) {
    throw ValidationError("finetune keeps the checkpoint's architecture; drop the model flags");
  }
  load_config_file(g, model, cfg);
  if (config_to_json(model, {}) != config_to_json(ck.model_config, {})) {
    throw ValidationError("finetune: --config may only change training fields");
  }
  if (o.lb_gamma) cfg.lb_gamma = *o.lb_gamma;
  cfg.validate();
  const Dataset data = load_dataset(o.data);
  run.config = config_to_json(model, cfg);
  run.config["data"] = o.data;
  run.config["init_checkpoint"] = o.ckpt;
  Trainer tr = Trainer::finetune(ck, cfg, data);
  train_loop(tr, g.out, run);
  return kOk;
}

struct EvalOpts {
  std::string ckpt;
  std::size_t episodes = 200;
  std::string task;
  bool dynamic = false;
  bool live = false;
  std::size_t lockstep = 0;
};

int eval(const EvalOpts& o, const Globals& g, Run& run) {
  reject_model_flags(g, "eval");
  const Checkpoint ck = load_checkpoint(o.ckpt);
  const Task task = o.task.empty() ? ck.task : task_from_string(o.task);
  const MoDEModel model = model_from_checkpoint(ck, !o.live);
  std::optional<ExpertCache> cache;
  if (!o.dynamic && cacheable(model.config())) cache = build_expert_cache(model);
  EvalOptions opts;
  opts.history_len = model.config().history_len;
  opts.lockstep = o.lockstep;
  const EvalMetrics m =
      evaluate_policy(diffusion_sampler(model, ck.stats, cache ? &*cache : nullptr), task, o.episodes, g.seed, opts);
  write_text(g.out, metrics_csv(task, m));
  run.config = {{"ckpt", o.ckpt},         {"episodes", o.episodes}, {"task", to_string(task)},
                {"cached", cache.has_value()}, {"weights", o.live ? "live" : "ema"}, {"lockstep", o.lockstep}};
  run.artifacts = {g.out};
  std::printf("success_rate %.3f  mean_steps %.2f  left %zu  right %zu", m.success_rate, m.mean_steps, m.left, m.right);
  if (m.mode_coverage) std::printf("  mode_coverage %.3f", *m.mode_coverage);
  std::printf("\n");
  return kOk;
}

struct BenchOpts {
  std::string ckpt;
  std::size_t batch = 64;
  std::size_t reps = 3;
};

int bench(const BenchOpts& o, const Globals& g, Run& run) {
  std::optional<MoDEModel> model;
  if (o.ckpt.empty()) {
    ModelConfig mc;
    TrainConfig tc;
    resolve(g, mc, tc);
    model.emplace(mc, g.seed);
    run.config = config_to_json(mc, tc);
  } else {
    reject_model_flags(g, "bench");
    model.emplace(model_from_checkpoint(load_checkpoint(o.ckpt)));
    run.config = {{"ckpt", o.ckpt}};
  }
  run.config["batch"] = o.batch;
  run.config["reps"] = o.reps;
  if (!cacheable(model->config())) throw ConfigError("bench compares cached inference; token routing has no cache");
  const ExpertCache cache = build_expert_cache(*model);
  FlopReport report = count_flops(model->config(), o.batch);
  measure_forward_wall(report, *model, cache, o.reps, g.seed);
  write_text(g.out, report.to_csv());
  const FusionTiming ft = time_fusion(*model, cache, o.batch, o.reps, g.seed);
  std::ostringstream fusion;
  fusion.precision(17);
  fusion << "batch,reps,looped_ns,fused_ns,speedup\n"
         << ft.batch << ',' << ft.reps << ',' << ft.looped_ns << ',' << ft.fused_ns << ',' << ft.speedup() << '\n';
  write_text(g.out + ".fusion.csv", fusion.str());
  run.artifacts = {g.out, g.out + ".fusion.csv"};

  const double dense = report.total(FlopMode::dense_equal_params);
  const double dyn = report.total(FlopMode::moe_dynamic);
  const double cached = report.total(FlopMode::moe_cached);
  std::printf("flops per forward  dense_equal %.4g  dynamic %.4g  cached %.4g\n", dense, dyn, cached);
  std::printf("cached vs dense_equal: %.1f%% fewer flops; routing overhead removed: %.1f%%\n",
              100.0 * (1.0 - cached / dense), 100.0 * report.overhead_reduction());
  std::printf("fused vs looped experts: %.3fx\n", ft.speedup());
  return kOk;
}

int route_map_cmd(const std::string& ckpt, const Globals& g, Run& run) {
  reject_model_flags(g, "route-map");
  const RouteMap map = route_map(model_from_checkpoint(load_checkpoint(ckpt)));
  write_text(g.out + ".csv", map.to_csv());
  write_text(g.out + ".svg", map.to_svg());
  run.config = {{"ckpt", ckpt}};
  run.artifacts = {g.out + ".csv", g.out + ".svg"};
  for (std::size_t l = 0; l < map.layers; ++l) std::printf("layer %zu  tv(sigma_max, sigma_min) %.4f\n", l, map.tv_distance(l));
  return kOk;
}

int check(const std::string& ckpt, const std::string& inject, const Globals& g, Run& run) {
  std::optional<MoDEModel> model;
  if (!ckpt.empty()) {
    reject_model_flags(g, "check");
    model.emplace(model_from_checkpoint(load_checkpoint(ckpt)));
  }
  const auto results = run_checks(g.seed, fault_from_string(inject), model ? &*model : nullptr);
  std::string lines;
  std::vector<std::string> failed;
  for (const CheckResult& r : results) {
    lines += r.json_line() + "\n";
    if (!r.passed) failed.push_back(r.name);
  }
  std::cout << lines;
  write_text(g.out, lines);
  run.config = {{"ckpt", ckpt}, {"inject", inject}};
  run.artifacts = {g.out};
  if (!failed.empty()) {
    std::string names;
    for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
    throw InvariantFailure("invariant failed: " + names);
  }
  return kOk;
}

int grad_check_cmd(const Globals& g, Run& run) {
  const std::size_t experts = g.experts_opt->count() ? g.experts : 2;
  const std::size_t topk = g.topk_opt->count() ? g.topk : 1;
  const RoutingMode routing = g.routing.empty() ? RoutingMode::noise_only : routing_mode_from_string(g.routing);
  const NoiseCondMode cond =
      g.noise_cond.empty() ? NoiseCondMode::token_and_attention : noise_cond_mode_from_string(g.noise_cond);
  const GradCheckReport r = tiny_grad_check(experts, topk, g.seed, routing, cond);
  const json j{{"max_rel_error", r.max_rel_error}, {"max_abs_error", r.max_abs_error},
               {"checked", r.checked},             {"worst_parameter", r.worst_parameter},
               {"worst_index", r.worst_index},     {"tolerance", 1e-4},
               {"passed", r.passed(1e-4)}};
  std::cout << j.dump() << "\n";
  write_text(g.out, j.dump(2) + "\n");
  run.config = {{"d_model", 8},          {"n_layers", 1}, {"n_experts", experts}, {"topk", topk},
                {"routing_mode", to_string(routing)}, {"noise_cond_mode", to_string(cond)}};
  run.artifacts = {g.out};
  if (!r.passed(1e-4)) throw InvariantFailure("invariant failed: gradient_finite_difference");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-routed mixture-of-experts diffusion policy toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", MODE_VERSION);

  Globals g;
  g.seed_opt = app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--out", g.out, "Output path; every artifact name derives from it");
  app.add_option("--config", g.config, "JSON file with ModelConfig/TrainConfig fields")->check(CLI::ExistingFile);
  app.add_option("--routing", g.routing, "Routing mode")
      ->check(CLI::IsMember({"noise_only", "token_only", "dense", "shared"}))
      ->transform([](std::string s) { return s == "shared" ? std::string("shared_expert") : s; });
  app.add_option("--noise-cond", g.noise_cond, "Noise conditioning")
      ->check(CLI::IsMember({"token_and_attention", "token_only", "film"}));
  g.topk_opt = app.add_option("--topk", g.topk, "Experts active per token")->check(CLI::PositiveNumber);
  g.experts_opt = app.add_option("--experts", g.experts, "Experts per layer")->check(CLI::PositiveNumber);

  GenData gd;
  auto* gen = app.add_subcommand("gen-data", "Generate scripted demonstrations");
  gen->add_option("--task", gd.task, "two_goal_reach or fork_path")
      ->required()
      ->check(CLI::IsMember({"two_goal_reach", "fork_path"}));
  gen->add_option("--n", gd.n, "Trajectories")->check(CLI::PositiveNumber);
  gen->add_option("--tail", gd.tail, "Extra demonstrator steps after reaching the goal");

  TrainOpts to;
  auto* tr = app.add_subcommand("train", "Train from scratch");
  auto* ft = app.add_subcommand("finetune", "Continue from a checkpoint's EMA weights");
  for (auto* sub : {tr, ft}) {
    sub->add_option("--data", to.data, "Dataset file")->required()->check(CLI::ExistingFile);
    sub->add_option("--steps", to.steps, "Optimizer steps");
    sub->add_option("--batch", to.batch, "Batch size");
    sub->add_option("--lr", to.lr, "Learning rate");
    sub->add_option("--lb-gamma", to.lb_gamma, "Load-balancing weight");
    sub->add_flag("--freeze-routers", to.freeze_routers, "Keep routers and the noise projector fixed");
  }
  ft->add_option("--ckpt", to.ckpt, "Pretrained checkpoint")->required()->check(CLI::ExistingFile);

  EvalOpts eo;
  auto* ev = app.add_subcommand("eval", "Roll out the policy and report metrics");
  ev->add_option("--ckpt", eo.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--episodes", eo.episodes, "Episodes")->check(CLI::PositiveNumber);
  ev->add_option("--task", eo.task, "Override the checkpoint's task")
      ->check(CLI::IsMember({"two_goal_reach", "fork_path"}));
  ev->add_flag("--dynamic", eo.dynamic, "Route at every step instead of using the expert cache");
  ev->add_flag("--live", eo.live, "Use live weights instead of the EMA");
  ev->add_option("--lockstep", eo.lockstep, "Episodes simulated together (0 = all)");

  BenchOpts bo;
  auto* be = app.add_subcommand("bench", "FLOP report and fused-expert timing");
  be->add_option("--ckpt", bo.ckpt, "Checkpoint (default: fresh model from the flags)")->check(CLI::ExistingFile);
  be->add_option("--batch", bo.batch, "Sequences per forward")->check(CLI::PositiveNumber);
  be->add_option("--reps", bo.reps, "Timing repetitions")->check(CLI::PositiveNumber);

  std::string rm_ckpt;
  auto* rm = app.add_subcommand("route-map", "Router probabilities per noise level as CSV and SVG");
  rm->add_option("--ckpt", rm_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);

  std::string ck_ckpt, inject = "none";
  auto* ch = app.add_subcommand("check", "Invariant suite as JSON lines");
  ch->add_option("--ckpt", ck_ckpt, "Checkpoint for the model-specific checks")->check(CLI::ExistingFile);
  ch->add_option("--inject", inject, "Fault to inject")->check(CLI::IsMember({"none", "renormalization"}));

  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient check on a tiny model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kInvalid;
  }

  Run run;
  for (int i = 0; i < argc; ++i) run.argv += (i ? " " : "") + std::string(argv[i]);
  CLI::App* sub = app.get_subcommands().front();
  run.command = sub->get_name();
  if (g.out.empty()) {
    static const std::map<std::string, std::string> defaults{
        {"gen-data", "data.mods"}, {"train", "model.modc"},  {"finetune", "finetuned.modc"},
        {"eval", "eval.csv"},      {"bench", "bench.csv"},   {"route-map", "routes"},
        {"check", "check.jsonl"},  {"grad-check", "grad_check.json"}};
    g.out = defaults.at(run.command);
  }

  int code = kOk;
  try {
    try {
      if (sub == gen) code = gen_data(gd, g, run);
      else if (sub == tr) code = train(to, g, run);
      else if (sub == ft) code = finetune(to, g, run);
      else if (sub == ev) code = eval(eo, g, run);
      else if (sub == be) code = bench(bo, g, run);
      else if (sub == rm) code = route_map_cmd(rm_ckpt, g, run);
      else if (sub == ch) code = check(ck_ckpt, inject, g, run);
      else if (sub == gc) code = grad_check_cmd(g, run);
    } catch (const InvariantFailure&) {
      write_manifest(run, g);
      throw;
    }
    write_manifest(run, g);
  } catch (const InvariantFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  }
  return code;
}
