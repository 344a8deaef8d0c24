#include "mode/trainer.hpp"

#include <cmath>
#include <sstream>
#include <utility>

#include "container.hpp"
#include "mode/config_io.hpp"
#include "mode/diffusion.hpp"
#include "mode/error.hpp"

namespace mode {

using nlohmann::json;

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  for (double b : betas)
    if (b < 0.0 || b >= 1.0) throw ConfigError("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (lb_gamma < 0.0) throw ConfigError("lb_gamma must be >= 0");
  if (ema_decay < 0.0 || ema_decay > 1.0) throw ConfigError("ema_decay must lie in [0, 1]");
}

void ema_update(Tensor& ema, const Tensor& value, double decay) {
  if (ema.shape() != value.shape()) {
    throw DimensionError("ema_update: shape " + shape_string(ema.shape()) + " vs " + shape_string(value.shape()));
  }
  if (decay < 0.0 || decay > 1.0) throw ArgumentError("ema_update: decay outside [0, 1]");
  auto e = ema.flat();
  const auto v = value.flat();
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = decay * e[i] + (1.0 - decay) * v[i];
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

bool updated(const Parameter& p) { return p.trainable && !p.frozen; }

std::vector<Tensor> values_of(const MoDEModel& m) {
  std::vector<Tensor> out;
  out.reserve(m.parameters().size());
  for (const Parameter& p : m.parameters()) out.push_back(p.value);
  return out;
}

std::vector<Tensor> zeros_like(const std::vector<Tensor>& ts) {
  std::vector<Tensor> out;
  out.reserve(ts.size());
  for (const Tensor& t : ts) out.emplace_back(t.shape());
  return out;
}

void check_data(const Dataset& d) {
  if (d.trajectories.empty()) throw ValidationError("training dataset has no trajectories");
}

}  // namespace

Trainer::Trainer(MoDEModel model, const TrainConfig& cfg, const Dataset& data, Rng rng)
    : model_(std::move(model)), cfg_(cfg), data_(&data), rng_(std::move(rng)) {
  cfg_.validate();
  check_data(data);
  model_.set_routers_frozen(cfg_.freeze_routers);
  ema_ = values_of(model_);
  m_ = zeros_like(ema_);
  v_ = zeros_like(ema_);
}

Trainer::Trainer(const ModelConfig& model_config, const TrainConfig& cfg, const Dataset& data)
    : Trainer(MoDEModel(model_config, cfg.seed), cfg, data, Rng::split(cfg.seed, 1)) {}

Trainer Trainer::resume(const Checkpoint& c, const Dataset& data) {
  Rng rng;
  rng.set_state(c.rng_state);
  Trainer t(model_from_checkpoint(c, false), c.train_config, data, std::move(rng));
  t.step_ = c.step;
  t.ema_ = c.ema;
  t.m_ = c.adam_m;
  t.v_ = c.adam_v;
  return t;
}

Trainer Trainer::finetune(const Checkpoint& c, const TrainConfig& cfg, const Dataset& data) {
  return Trainer(model_from_checkpoint(c, true), cfg, data, Rng::split(cfg.seed, 1));
}

StepLog Trainer::step() {
  try {
    return update();
  } catch (const NumericError& e) {
    const std::string what = e.what();
    if (what.find("at step ") != std::string::npos) throw;
    throw NumericError(what + " (at step " + std::to_string(step_ + 1) + ")");
  }
}

StepLog Trainer::update() {
  const ModelConfig& mc = model_.config();
  const Batch b = sample_batch(*data_, cfg_.batch_size, mc.history_len, mc.chunk_len, rng_);
  DenoiserInput in{Tensor(), b.states, b.goals};

  model_.zero_grad();
  Tape tape;
  std::vector<RoutedLayer> routes;
  ForwardOptions opts;
  opts.phase = Phase::train;
  opts.rng = &rng_;
  const SmLoss sm = sm_loss_network(
      tape,
      [&](Tape& t, const Tensor& noisy, const std::vector<double>& sigmas) {
        in.noisy_actions = noisy;
        ForwardResult r = model_.forward(t, in, sigmas, opts);
        routes = std::move(r.routes);
        return r.raw;
      },
      b.actions, mc.schedule, rng_);

  StepLog log;
  log.step = step_ + 1;
  log.sm_loss = sm.loss.value()[0];
  Var total = sm.loss;
  if (!routes.empty()) {
    if (cfg_.lb_gamma > 0.0) {
      const Var lb = load_balance_loss(routes);
      log.lb_loss = lb.value()[0];
      total = total + ad::scale(lb, cfg_.lb_gamma);
    } else {
      std::vector<RouterDecision> decisions;
      for (const RoutedLayer& r : routes) decisions.push_back(r.decision);
      log.lb_loss = load_balance_value(decisions);
    }
  }
  log.total = total.value()[0];
  if (!std::isfinite(log.total)) {
    throw NumericError("non-finite training loss at step " + std::to_string(log.step));
  }
  tape.backward(total);

  double sq = 0.0;
  for (const Parameter& p : model_.parameters())
    if (updated(p))
      for (double g : p.grad.flat()) sq += g * g;
  log.grad_norm = std::sqrt(sq);
  if (!std::isfinite(log.grad_norm)) {
    throw NumericError("non-finite gradient at step " + std::to_string(log.step));
  }

  // AdamW with decoupled weight decay.
  const double t = static_cast<double>(log.step);
  const double b1 = cfg_.betas[0], b2 = cfg_.betas[1];
  const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
  auto& params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (!updated(p)) continue;
    auto w = p.value.flat();
    const auto g = p.grad.flat();
    auto m = m_[i].flat();
    auto v = v_[i].flat();
    const double decay = p.decay ? cfg_.lr * cfg_.weight_decay : 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      w[k] -= decay * w[k] + cfg_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.adam_eps);
    }
    ema_update(ema_[i], p.value, cfg_.ema_decay);
  }
  step_ = log.step;
  return log;
}

std::vector<StepLog> Trainer::run(std::size_t max_steps, const std::function<void(const StepLog&)>& on_step) {
  std::vector<StepLog> log;
  const std::size_t stop = max_steps ? std::min(cfg_.steps, step_ + max_steps) : cfg_.steps;
  while (step_ < stop) {
    log.push_back(step());
    if (on_step) on_step(log.back());
  }
  return log;
}

MoDEModel Trainer::ema_model() const {
  MoDEModel m = model_;
  for (std::size_t i = 0; i < ema_.size(); ++i) m.param(i).value = ema_[i];
  return m;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.model_config = model_.config();
  c.train_config = cfg_;
  c.task = data_->task;
  c.stats = data_->stats;
  c.step = step_;
  c.rng_state = rng_.state();
  for (const Parameter& p : model_.parameters()) {
    c.names.push_back(p.name);
    c.params.push_back(p.value);
  }
  c.ema = ema_;
  c.adam_m = m_;
  c.adam_v = v_;
  return c;
}

MoDEModel model_from_checkpoint(const Checkpoint& c, bool use_ema) {
  MoDEModel m(c.model_config, 0);
  const auto& src = use_ema ? c.ema : c.params;
  if (src.size() != m.parameters().size() || c.names.size() != src.size()) {
    throw ValidationError("checkpoint holds " + std::to_string(src.size()) + " tensors, the model has " +
                          std::to_string(m.parameters().size()));
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    Parameter& p = m.param(i);
    if (p.name != c.names[i] || p.value.shape() != src[i].shape()) {
      throw ValidationError("checkpoint tensor '" + c.names[i] + "' does not match model parameter '" + p.name + "'");
    }
    p.value = src[i];
  }
  m.set_routers_frozen(c.train_config.freeze_routers);
  return m;
}

double evaluate_sm_loss(const MoDEModel& model, const Dataset& data, std::size_t batch, std::uint64_t seed) {
  check_data(data);
  const ModelConfig& mc = model.config();
  Rng rng(seed);
  const Batch b = sample_batch(data, batch, mc.history_len, mc.chunk_len, rng);
  DenoiserInput in{Tensor(), b.states, b.goals};
  Tape tape(false);
  const SmLoss sm = sm_loss_network(
      tape,
      [&](Tape& t, const Tensor& noisy, const std::vector<double>& sigmas) {
        in.noisy_actions = noisy;
        return model.forward(t, in, sigmas, ForwardOptions{}).raw;
      },
      b.actions, mc.schedule, rng);
  return sm.loss.value()[0];
}

std::string log_csv(const std::vector<StepLog>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "step,sm_loss,lb_loss,total,grad_norm\n";
  for (const StepLog& s : log) {
    os << s.step << ',' << s.sm_loss << ',' << s.lb_loss << ',' << s.total << ',' << s.grad_norm << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr char kMagic[5] = "MODC";

json vec_json(const Vec2& v) { return json::array({v[0], v[1]}); }

Vec2 vec_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  const std::vector<Tensor>* groups[4] = {&c.params, &c.ema, &c.adam_m, &c.adam_v};
  for (const auto* g : groups) {
    if (g->size() != c.names.size()) throw ValidationError("encode_checkpoint: tensor groups differ in length");
  }
  json tensors = json::array();
  for (std::size_t i = 0; i < c.names.size(); ++i) {
    for (const auto* g : groups) {
      if ((*g)[i].shape() != c.params[i].shape()) {
        throw ValidationError("encode_checkpoint: shape mismatch for '" + c.names[i] + "'");
      }
    }
    tensors.push_back({{"name", c.names[i]}, {"shape", c.params[i].shape()}});
  }
  json header{
      {"config", config_to_json(c.model_config, c.train_config)},
      {"task", to_string(c.task)},
      {"stats",
       {{"state_mean", vec_json(c.stats.state_mean)},
        {"state_std", vec_json(c.stats.state_std)},
        {"action_mean", vec_json(c.stats.action_mean)},
        {"action_std", vec_json(c.stats.action_std)}}},
      {"step", c.step},
      {"rng_state", c.rng_state},
      {"tensors", tensors},
      {"payload", "params, ema, adam_m, adam_v; each tensor in listed order, row-major f64 little-endian"},
  };
  std::vector<std::uint8_t> out = container::begin(kMagic, header);
  for (const auto* g : groups)
    for (const Tensor& t : *g)
      for (double v : t.flat()) container::put_f64(out, v);
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& in) {
  const container::Envelope env = container::open(in, kMagic, "checkpoint");
  const json& h = env.header;
  Checkpoint c;
  std::vector<Shape> shapes;
  try {
    apply_config_json(h.at("config"), c.model_config, c.train_config);
    c.model_config.validate();
    c.train_config.validate();
    c.task = task_from_string(h.at("task").get<std::string>());
    const json& st = h.at("stats");
    c.stats.state_mean = vec_from(st.at("state_mean"));
    c.stats.state_std = vec_from(st.at("state_std"));
    c.stats.action_mean = vec_from(st.at("action_mean"));
    c.stats.action_std = vec_from(st.at("action_std"));
    c.step = h.at("step").get<std::uint64_t>();
    c.rng_state = h.at("rng_state").get<std::string>();
    for (const json& t : h.at("tensors")) {
      c.names.push_back(t.at("name").get<std::string>());
      shapes.push_back(t.at("shape").get<Shape>());
    }
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint: bad header field: ") + e.what(), container::kPreamble);
  }

  std::size_t numel = 0;
  for (const Shape& s : shapes) numel += shape_numel(s);
  container::check_size(in, env.payload + 4 * 8 * numel, "checkpoint");

  std::size_t at = env.payload;
  std::vector<Tensor>* groups[4] = {&c.params, &c.ema, &c.adam_m, &c.adam_v};
  for (auto* g : groups) {
    for (const Shape& s : shapes) {
      std::vector<double> data(shape_numel(s));
      for (double& v : data) {
        v = container::get_f64(in, at);
        at += 8;
      }
      g->emplace_back(s, std::move(data));
    }
  }
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  container::write_file(encode_checkpoint(c), path);
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(container::read_file(path)); }

}  // namespace mode
