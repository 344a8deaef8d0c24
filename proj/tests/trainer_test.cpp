#include "mode/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "mode/config_io.hpp"
#include "mode/diffusion.hpp"
#include "mode/error.hpp"
#include "mode/expert_cache.hpp"

namespace mode {
namespace {

ModelConfig small_model(RoutingMode routing = RoutingMode::noise_only) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_experts = 3;
  c.topk = 2;
  c.routing_mode = routing;
  return c;
}

TrainConfig quick(std::size_t steps, std::uint64_t seed = 5) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 8;
  t.lr = 1e-3;
  t.seed = seed;
  return t;
}

const Dataset& reach_data() {
  static const Dataset d = gen_dataset(Task::two_goal_reach, 20, 3);
  return d;
}

TEST(Ema, DecayZeroCopiesParameters) {
  Tensor ema({2}, {5, 6});
  ema_update(ema, Tensor({2}, {1, 2}), 0.0);
  EXPECT_EQ(ema, Tensor({2}, {1, 2}));
}

TEST(Ema, DecayOneKeepsAverage) {
  Tensor ema({2}, {5, 6});
  ema_update(ema, Tensor({2}, {1, 2}), 1.0);
  EXPECT_EQ(ema, Tensor({2}, {5, 6}));
}

TEST(Ema, HalfDecayAverages) {
  Tensor ema({1}, {0.0});
  ema_update(ema, Tensor({1}, {2.0}), 0.5);
  EXPECT_EQ(ema[0], 1.0);
}

TEST(Ema, ShapeMismatchIsDimensionError) {
  Tensor ema({2});
  EXPECT_THROW(ema_update(ema, Tensor({3}), 0.5), DimensionError);
}

TEST(TrainConfigTest, RejectsOutOfRangeValues) {
  TrainConfig t;
  t.lb_gamma = -0.1;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.ema_decay = 1.5;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  EXPECT_NO_THROW(t.validate());
}

TEST(Train, SmokeRunHalvesLossOnOneTrajectory) {
  const Dataset one = gen_dataset(Task::two_goal_reach, 1, 9);
  TrainConfig cfg = quick(200);
  cfg.batch_size = 16;
  Trainer tr(small_model(), cfg, one);
  const double before = evaluate_sm_loss(tr.model(), one, 256, 99);
  tr.run();
  const double after = evaluate_sm_loss(tr.model(), one, 256, 99);
  EXPECT_EQ(tr.steps_done(), 200u);
  EXPECT_LT(after, 0.5 * before) << "before " << before << " after " << after;
}

// Independent replay of one update's loss, used as a gradient oracle.
Tensor router_gradient_oracle(const ModelConfig& mc, const TrainConfig& cfg, const Dataset& data, double gamma) {
  MoDEModel m(mc, cfg.seed);
  Rng rng = Rng::split(cfg.seed, 1);
  const Batch b = sample_batch(data, cfg.batch_size, mc.history_len, mc.chunk_len, rng);
  DenoiserInput in{Tensor(), b.states, b.goals};
  std::vector<RoutedLayer> routes;
  Tape tape;
  ForwardOptions o{Phase::train, &rng};
  auto sm = sm_loss_network(
      tape,
      [&](Tape& t, const Tensor& noisy, const std::vector<double>& s) {
        in.noisy_actions = noisy;
        auto r = m.forward(t, in, s, o);
        routes = r.routes;
        return r.raw;
      },
      b.actions, mc.schedule, rng);
  Var loss = sm.loss;
  if (gamma > 0) loss = loss + ad::scale(load_balance_loss(routes), gamma);
  m.zero_grad();
  tape.backward(loss);
  return m.param("layer.0.router.W_R").grad;
}

TEST(Train, ZeroGammaLeavesOnlyScoreMatchingInRouterGradient) {
  const ModelConfig mc = small_model();
  TrainConfig cfg = quick(1);
  cfg.lb_gamma = 0.0;
  Trainer tr(mc, cfg, reach_data());
  const StepLog log = tr.step();
  const Tensor& g = tr.model().param("layer.0.router.W_R").grad;
  EXPECT_EQ(g, router_gradient_oracle(mc, cfg, reach_data(), 0.0));
  EXPECT_NE(g, router_gradient_oracle(mc, cfg, reach_data(), 0.5));
  EXPECT_GT(log.lb_loss, 0.0);
  EXPECT_EQ(log.total, log.sm_loss);

  cfg.lb_gamma = 0.5;
  Trainer with_lb(mc, cfg, reach_data());
  const StepLog l2 = with_lb.step();
  EXPECT_EQ(with_lb.model().param("layer.0.router.W_R").grad, router_gradient_oracle(mc, cfg, reach_data(), 0.5));
  EXPECT_NEAR(l2.total, l2.sm_loss + 0.5 * l2.lb_loss, 1e-12);
}

TEST(Train, FrozenRoutersStayBitwiseAndKeepRouteTables) {
  TrainConfig cfg = quick(30);
  Trainer pre(small_model(), cfg, reach_data());
  pre.run();
  const Checkpoint c = pre.checkpoint();
  const MoDEModel before = model_from_checkpoint(c);

  TrainConfig ft = quick(30, 6);
  ft.freeze_routers = true;
  ft.lb_gamma = 0.0;
  Trainer tr = Trainer::finetune(c, ft, reach_data());
  tr.run();
  for (std::size_t l = 0; l < 2; ++l) {
    const std::string name = "layer." + std::to_string(l) + ".router.W_R";
    EXPECT_EQ(tr.model().param(name).value, before.param(name).value);
    EXPECT_EQ(tr.ema_model().param(name).value, before.param(name).value);
  }
  EXPECT_NE(tr.model().param("layer.0.attn.W_Q").value, before.param("layer.0.attn.W_Q").value);

  const RouteTable a = precompute_routes(before), b = precompute_routes(tr.ema_model());
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  for (std::size_t l = 0; l < a.layers(); ++l)
    for (std::size_t i = 0; i < a.levels(); ++i) {
      EXPECT_EQ(a.at(l, i).selected, b.at(l, i).selected);
      EXPECT_EQ(a.at(l, i).weights, b.at(l, i).weights);
    }
}

TEST(Train, SameSeedSameLossTrace) {
  for (RoutingMode r : {RoutingMode::noise_only, RoutingMode::token_only, RoutingMode::dense}) {
    Trainer a(small_model(r), quick(8), reach_data()), b(small_model(r), quick(8), reach_data());
    const auto la = a.run(), lb = b.run();
    EXPECT_EQ(la, lb) << to_string(r);
    Trainer c(small_model(r), quick(8, 77), reach_data());
    EXPECT_NE(c.run(), la);
  }
}

TEST(Train, DenseModelTrainsWithoutBalanceTerm) {
  Trainer tr(small_model(RoutingMode::dense), quick(3), reach_data());
  for (const StepLog& s : tr.run()) {
    EXPECT_EQ(s.lb_loss, 0.0);
    EXPECT_EQ(s.total, s.sm_loss);
  }
}

TEST(Train, NonFiniteLossReportsStep) {
  Dataset bad = reach_data();
  bad.trajectories[0].actions[0][0] = std::numeric_limits<double>::quiet_NaN();
  bad.stats = compute_stats(bad.trajectories);
  Trainer tr(small_model(), quick(2), bad);
  try {
    tr.step();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST(Train, EmptyDatasetIsRejected) {
  Dataset empty;
  EXPECT_THROW(Trainer(small_model(), quick(1), empty), ValidationError);
}

TEST(Checkpoint, RoundtripIsBitwise) {
  Trainer tr(small_model(), quick(4), reach_data());
  tr.run();
  const Checkpoint c = tr.checkpoint();
  const auto bytes = encode_checkpoint(c);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "MODC");
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.params, c.params);
  EXPECT_EQ(back.ema, c.ema);
  EXPECT_EQ(back.adam_m, c.adam_m);
  EXPECT_EQ(back.adam_v, c.adam_v);
  EXPECT_EQ(back.rng_state, c.rng_state);
  EXPECT_EQ(back.step, 4u);
  EXPECT_EQ(back.train_config, c.train_config);
  EXPECT_EQ(back.stats, c.stats);
  EXPECT_EQ(encode_checkpoint(back), bytes);

  const auto path = std::filesystem::temp_directory_path() / "mode_trainer_test.modc";
  save_checkpoint(c, path.string());
  EXPECT_EQ(encode_checkpoint(load_checkpoint(path.string())), bytes);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  Trainer full(small_model(), quick(10), reach_data());
  const auto trace = full.run();

  Trainer first(small_model(), quick(10), reach_data());
  auto resumed_trace = first.run(4);
  Trainer second = Trainer::resume(decode_checkpoint(encode_checkpoint(first.checkpoint())), reach_data());
  for (const StepLog& s : second.run()) resumed_trace.push_back(s);
  EXPECT_EQ(resumed_trace, trace);
  EXPECT_EQ(second.checkpoint().params, full.checkpoint().params);
  EXPECT_EQ(second.checkpoint().ema, full.checkpoint().ema);
}

std::uint64_t offset_of(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no FormatError";
  return 0;
}

TEST(Checkpoint, CorruptFilesReportOffsets) {
  Trainer tr(small_model(), quick(1), reach_data());
  const auto good = encode_checkpoint(tr.checkpoint());
  auto v2 = good;
  v2[4] = 2;
  EXPECT_EQ(offset_of(v2), 4u);
  auto magic = good;
  magic[3] = 'S';
  EXPECT_EQ(offset_of(magic), 0u);
  auto cut = good;
  cut.pop_back();
  EXPECT_EQ(offset_of(cut), cut.size());
  // A dataset is not a checkpoint.
  EXPECT_EQ(offset_of(encode_dataset(reach_data())), 0u);
}

TEST(Checkpoint, EmaModelIsWhatEvaluationLoads) {
  Trainer tr(small_model(), quick(5), reach_data());
  tr.run();
  const MoDEModel ema = model_from_checkpoint(tr.checkpoint());
  const MoDEModel live = model_from_checkpoint(tr.checkpoint(), false);
  EXPECT_EQ(ema.parameters()[3].value, tr.ema_model().parameters()[3].value);
  EXPECT_EQ(live.parameters()[3].value, tr.model().parameters()[3].value);
  EXPECT_NE(ema.parameters()[3].value, live.parameters()[3].value);
}

TEST(Checkpoint, MismatchedTensorsAreRejected) {
  Trainer tr(small_model(), quick(1), reach_data());
  Checkpoint c = tr.checkpoint();
  c.model_config.n_experts = 4;
  EXPECT_THROW(model_from_checkpoint(c), ValidationError);
}

TEST(LogCsv, HeaderAndRows) {
  const std::string csv = log_csv({{1, 0.5, 2.0, 0.52, 3.0}});
  EXPECT_EQ(csv, "step,sm_loss,lb_loss,total,grad_norm\n1,0.5,2,0.52000000000000002,3\n");
}

TEST(ConfigJson, RoundtripsEveryField) {
  ModelConfig m = small_model(RoutingMode::shared_expert);
  m.noise_cond_mode = NoiseCondMode::film;
  m.schedule.sigma_max = 40;
  TrainConfig t = quick(17, 1234567890123ULL);
  t.betas = {0.8, 0.9};
  t.freeze_routers = true;
  ModelConfig m2;
  TrainConfig t2;
  apply_config_json(config_to_json(m, t), m2, t2);
  EXPECT_EQ(config_to_json(m2, t2), config_to_json(m, t));
  EXPECT_EQ(t2, t);
}

TEST(ConfigJson, UnknownOrMistypedKeysAreErrors) {
  ModelConfig m;
  TrainConfig t;
  EXPECT_THROW(apply_config_json(nlohmann::json{{"d_modle", 8}}, m, t), ConfigError);
  EXPECT_THROW(apply_config_json(nlohmann::json{{"d_model", 8.5}}, m, t), ConfigError);
  EXPECT_THROW(apply_config_json(nlohmann::json{{"d_model", -1}}, m, t), ConfigError);
  EXPECT_THROW(apply_config_json(nlohmann::json{{"routing_mode", "sparse"}}, m, t), ConfigError);
  EXPECT_THROW(apply_config_json(nlohmann::json::array(), m, t), ConfigError);
  apply_config_json(nlohmann::json{{"d_model", 32}, {"lr", 3e-4}}, m, t);
  EXPECT_EQ(m.d_model, 32u);
  EXPECT_EQ(t.lr, 3e-4);
}

}  // namespace
}  // namespace mode
