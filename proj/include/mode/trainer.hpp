#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mode/model.hpp"
#include "mode/rng.hpp"
#include "mode/tasks.hpp"
#include "mode/tensor.hpp"

namespace mode {

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  std::array<double, 2> betas{0.9, 0.95};
  double adam_eps = 1e-8;
  double weight_decay = 0.05;
  double lb_gamma = 0.01;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  bool freeze_routers = false;
  std::size_t log_every = 100;

  bool operator==(const TrainConfig&) const = default;
  void validate() const;
};

struct StepLog {
  std::size_t step = 0;  // 1-based index of the finished update
  double sm_loss = 0.0;
  double lb_loss = 0.0;  // unweighted; 0 without a router
  double total = 0.0;
  double grad_norm = 0.0;

  bool operator==(const StepLog&) const = default;
};

// ema <- decay * ema + (1 - decay) * value
void ema_update(Tensor& ema, const Tensor& value, double decay);

struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  Task task = Task::two_goal_reach;
  NormStats stats;
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<std::string> names;
  std::vector<Tensor> params, ema, adam_m, adam_v;
};

// "MODC" container with the dataset envelope.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Rebuilds the model from stored weights: EMA by default, live otherwise.
MoDEModel model_from_checkpoint(const Checkpoint& c, bool use_ema = true);

class Trainer {
 public:
  // Fresh model initialized from cfg.seed. `data` must outlive the trainer.
  Trainer(const ModelConfig& model_config, const TrainConfig& cfg, const Dataset& data);
  // Continues exactly where the checkpoint stopped.
  static Trainer resume(const Checkpoint& c, const Dataset& data);
  // New run from the checkpoint's EMA weights with fresh optimizer state.
  static Trainer finetune(const Checkpoint& c, const TrainConfig& cfg, const Dataset& data);

  // One update. Numeric failures abort with the step index in the message.
  StepLog step();
  // Steps until cfg.steps updates are done, or `max_steps` more if nonzero.
  std::vector<StepLog> run(std::size_t max_steps = 0, const std::function<void(const StepLog&)>& on_step = {});

  std::size_t steps_done() const noexcept { return step_; }
  const TrainConfig& config() const noexcept { return cfg_; }
  const MoDEModel& model() const noexcept { return model_; }
  MoDEModel ema_model() const;
  Checkpoint checkpoint() const;

 private:
  Trainer(MoDEModel model, const TrainConfig& cfg, const Dataset& data, Rng rng);
  StepLog update();

  MoDEModel model_;
  TrainConfig cfg_;
  const Dataset* data_;
  Rng rng_;
  std::size_t step_ = 0;
  std::vector<Tensor> ema_, m_, v_;
};

// Score-matching loss of the inference path (top-k routing, no dropout) on
// one fixed batch; the same seed gives the same batch, levels and noise.
double evaluate_sm_loss(const MoDEModel& model, const Dataset& data, std::size_t batch, std::uint64_t seed);

// CSV with columns step, sm_loss, lb_loss, total, grad_norm.
std::string log_csv(const std::vector<StepLog>& log);

}  // namespace mode
