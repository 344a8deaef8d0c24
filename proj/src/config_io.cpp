#include "mode/config_io.hpp"

#include <functional>
#include <map>
#include <string>

#include "mode/error.hpp"

namespace mode {

using nlohmann::json;

json config_to_json(const ModelConfig& m, const TrainConfig& t) {
  return json{
      {"d_model", m.d_model},
      {"n_layers", m.n_layers},
      {"n_heads", m.n_heads},
      {"n_experts", m.n_experts},
      {"topk", m.topk},
      {"expert_hidden", m.expert_hidden},
      {"action_dim", m.action_dim},
      {"state_dim", m.state_dim},
      {"goal_dim", m.goal_dim},
      {"chunk_len", m.chunk_len},
      {"history_len", m.history_len},
      {"routing_mode", to_string(m.routing_mode)},
      {"noise_cond_mode", to_string(m.noise_cond_mode)},
      {"attn_dropout", m.attn_dropout},
      {"residual_dropout", m.residual_dropout},
      {"mlp_dropout", m.mlp_dropout},
      {"sigma_min", m.schedule.sigma_min},
      {"sigma_max", m.schedule.sigma_max},
      {"sigma_data", m.schedule.sigma_data},
      {"num_sample_steps", m.schedule.num_sample_steps},
      {"spacing", to_string(m.schedule.spacing)},
      {"steps", t.steps},
      {"batch_size", t.batch_size},
      {"lr", t.lr},
      {"betas", t.betas},
      {"adam_eps", t.adam_eps},
      {"weight_decay", t.weight_decay},
      {"lb_gamma", t.lb_gamma},
      {"ema_decay", t.ema_decay},
      {"seed", t.seed},
      {"freeze_routers", t.freeze_routers},
      {"log_every", t.log_every},
  };
}

namespace {

template <class T>
std::function<void(const json&)> bind(T& field) {
  return [&field](const json& v) { field = v.get<T>(); };
}

// Integer fields refuse floats and negatives instead of truncating.
std::function<void(const json&)> bind_count(std::size_t& field) {
  return [&field](const json& v) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError("expected a non-negative integer");
    field = v.get<std::size_t>();
  };
}

std::function<void(const json&)> bind_u64(std::uint64_t& field) {
  return [&field](const json& v) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      throw ConfigError("expected a non-negative integer");
    }
    field = v.get<std::uint64_t>();
  };
}

std::function<void(const json&)> bind_real(double& field) {
  return [&field](const json& v) {
    if (!v.is_number()) throw ConfigError("expected a number");
    field = v.get<double>();
  };
}

}  // namespace

void apply_config_json(const json& j, ModelConfig& m, TrainConfig& t) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const std::map<std::string, std::function<void(const json&)>> setters{
      {"d_model", bind_count(m.d_model)},
      {"n_layers", bind_count(m.n_layers)},
      {"n_heads", bind_count(m.n_heads)},
      {"n_experts", bind_count(m.n_experts)},
      {"topk", bind_count(m.topk)},
      {"expert_hidden", bind_count(m.expert_hidden)},
      {"action_dim", bind_count(m.action_dim)},
      {"state_dim", bind_count(m.state_dim)},
      {"goal_dim", bind_count(m.goal_dim)},
      {"chunk_len", bind_count(m.chunk_len)},
      {"history_len", bind_count(m.history_len)},
      {"routing_mode", [&](const json& v) { m.routing_mode = routing_mode_from_string(v.get<std::string>()); }},
      {"noise_cond_mode",
       [&](const json& v) { m.noise_cond_mode = noise_cond_mode_from_string(v.get<std::string>()); }},
      {"attn_dropout", bind_real(m.attn_dropout)},
      {"residual_dropout", bind_real(m.residual_dropout)},
      {"mlp_dropout", bind_real(m.mlp_dropout)},
      {"sigma_min", bind_real(m.schedule.sigma_min)},
      {"sigma_max", bind_real(m.schedule.sigma_max)},
      {"sigma_data", bind_real(m.schedule.sigma_data)},
      {"num_sample_steps", bind_count(m.schedule.num_sample_steps)},
      {"spacing", [&](const json& v) { m.schedule.spacing = spacing_from_string(v.get<std::string>()); }},
      {"steps", bind_count(t.steps)},
      {"batch_size", bind_count(t.batch_size)},
      {"lr", bind_real(t.lr)},
      {"betas",
       [&](const json& v) {
         if (!v.is_array() || v.size() != 2) throw ConfigError("expected [beta1, beta2]");
         t.betas = {v[0].get<double>(), v[1].get<double>()};
       }},
      {"adam_eps", bind_real(t.adam_eps)},
      {"weight_decay", bind_real(t.weight_decay)},
      {"lb_gamma", bind_real(t.lb_gamma)},
      {"ema_decay", bind_real(t.ema_decay)},
      {"seed", bind_u64(t.seed)},
      {"freeze_routers", bind(t.freeze_routers)},
      {"log_every", bind_count(t.log_every)},
  };
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    try {
      it->second(value);
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    } catch (const std::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

}  // namespace mode
