#include "mode/tasks.hpp"

#include <algorithm>
#include <cmath>

#include "container.hpp"
#include "mode/diffusion.hpp"
#include "mode/error.hpp"
#include "mode/expert_cache.hpp"

namespace mode {
namespace {

using nlohmann::json;

constexpr char kMagic[5] = "MODS";
using container::get_f64;
using container::put_f64;

Vec2 controller(const Vec2& s, const Vec2& target) {
  return clip_action({kGain * (target[0] - s[0]), kGain * (target[1] - s[1])});
}

Vec2 fork_waypoint(int side) { return {side * kForkWaypoint[0], kForkWaypoint[1]}; }

Trajectory demonstrate(Task task, std::size_t tail, Rng& rng) {
  Trajectory tr;
  Vec2 s{kStartNoise * rng.normal(), kStartNoise * rng.normal()};
  bool at_waypoint = false;
  if (task == Task::two_goal_reach) {
    const std::size_t g = rng.below(2);
    tr.goal = kReachGoals[g];
    tr.mode = g == 0 ? -1 : 1;
  } else {
    tr.goal = kForkGoal;
    tr.mode = rng.below(2) == 0 ? -1 : 1;
  }
  tr.states.push_back(s);
  std::size_t after_success = 0;
  bool reached = false;
  while (tr.actions.size() + 1 < kHorizon) {
    Vec2 target = tr.goal;
    if (task == Task::fork_path && !at_waypoint) {
      target = fork_waypoint(tr.mode);
      if (distance(s, target) <= kSuccessRadius) {
        at_waypoint = true;
        target = tr.goal;
      }
    }
    Vec2 a = controller(s, target);
    a = clip_action({a[0] + kActionNoise * rng.normal(), a[1] + kActionNoise * rng.normal()});
    s = env_step(s, a);
    tr.actions.push_back(a);
    tr.states.push_back(s);
    reached = reached || distance(s, tr.goal) <= kSuccessRadius;
    if (reached && after_success++ >= tail) break;
  }
  return tr;
}

json vec_json(const Vec2& v) { return json::array({v[0], v[1]}); }

Vec2 vec_from(const json& j, const std::string& key, std::uint64_t offset) {
  if (!j.contains(key) || !j[key].is_array() || j[key].size() != 2) {
    throw FormatError("dataset header: '" + key + "' must be a 2-element array", offset);
  }
  return {j[key][0].get<double>(), j[key][1].get<double>()};
}

}  // namespace

std::string to_string(Task t) { return t == Task::two_goal_reach ? "two_goal_reach" : "fork_path"; }

Task task_from_string(const std::string& s) {
  if (s == "two_goal_reach") return Task::two_goal_reach;
  if (s == "fork_path") return Task::fork_path;
  throw ConfigError("unknown task '" + s + "' (expected two_goal_reach or fork_path)");
}

Vec2 clip_action(const Vec2& a) { return {std::clamp(a[0], -1.0, 1.0), std::clamp(a[1], -1.0, 1.0)}; }

Vec2 env_step(const Vec2& s, const Vec2& a) {
  const Vec2 c = clip_action(a);
  return {s[0] + c[0] * kDt, s[1] + c[1] * kDt};
}

double distance(const Vec2& a, const Vec2& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

Vec2 NormStats::normalize_state(const Vec2& s) const {
  return {(s[0] - state_mean[0]) / state_std[0], (s[1] - state_mean[1]) / state_std[1]};
}

Vec2 NormStats::normalize_action(const Vec2& a) const {
  return {(a[0] - action_mean[0]) / action_std[0], (a[1] - action_mean[1]) / action_std[1]};
}

Vec2 NormStats::denormalize_action(const Vec2& a) const {
  return {a[0] * action_std[0] + action_mean[0], a[1] * action_std[1] + action_mean[1]};
}

NormStats compute_stats(const std::vector<Trajectory>& trajectories) {
  NormStats st;
  auto moments = [](const std::vector<const std::vector<Vec2>*>& sets, Vec2& mean, Vec2& sd) {
    std::size_t n = 0;
    Vec2 sum{0, 0};
    for (const auto* v : sets)
      for (const Vec2& x : *v) {
        sum[0] += x[0];
        sum[1] += x[1];
        ++n;
      }
    if (n == 0) return;
    mean = {sum[0] / n, sum[1] / n};
    Vec2 sq{0, 0};
    for (const auto* v : sets)
      for (const Vec2& x : *v) {
        sq[0] += (x[0] - mean[0]) * (x[0] - mean[0]);
        sq[1] += (x[1] - mean[1]) * (x[1] - mean[1]);
      }
    for (int k = 0; k < 2; ++k) {
      const double s = std::sqrt(sq[k] / n);
      sd[k] = s > 1e-12 ? s : 1.0;
    }
  };
  std::vector<const std::vector<Vec2>*> states, actions;
  for (const Trajectory& t : trajectories) {
    states.push_back(&t.states);
    actions.push_back(&t.actions);
  }
  moments(states, st.state_mean, st.state_std);
  moments(actions, st.action_mean, st.action_std);
  return st;
}

Dataset gen_dataset(Task task, std::size_t n_traj, std::uint64_t seed, std::size_t tail) {
  if (n_traj == 0) throw ArgumentError("gen_dataset: n_traj must be >= 1");
  Dataset d;
  d.task = task;
  d.seed = seed;
  d.trajectories.reserve(n_traj);
  for (std::size_t i = 0; i < n_traj; ++i) {
    Rng rng = Rng::split(seed, i);
    d.trajectories.push_back(demonstrate(task, tail, rng));
  }
  d.stats = compute_stats(d.trajectories);
  return d;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& d) {
  json header;
  header["task"] = to_string(d.task);
  header["n_traj"] = d.trajectories.size();
  header["dims"] = {{"state", 2}, {"action", 2}, {"goal", 2}};
  header["seed"] = d.seed;
  header["stats"] = {{"state_mean", vec_json(d.stats.state_mean)},
                     {"state_std", vec_json(d.stats.state_std)},
                     {"action_mean", vec_json(d.stats.action_mean)},
                     {"action_std", vec_json(d.stats.action_std)}};
  json lengths = json::array(), modes = json::array();
  for (const Trajectory& t : d.trajectories) {
    if (t.states.size() != t.actions.size() + 1) {
      throw ValidationError("encode_dataset: trajectory needs one more state than actions");
    }
    lengths.push_back(t.states.size());
    modes.push_back(t.mode);
  }
  header["lengths"] = lengths;
  header["modes"] = modes;
  header["payload"] = "per trajectory: goal[2], states[len][2], actions[len-1][2]; f64 little-endian";
  std::vector<std::uint8_t> out = container::begin(kMagic, header);
  for (const Trajectory& t : d.trajectories) {
    for (double v : t.goal) put_f64(out, v);
    for (const Vec2& s : t.states) put_f64(out, s[0]), put_f64(out, s[1]);
    for (const Vec2& a : t.actions) put_f64(out, a[0]), put_f64(out, a[1]);
  }
  return out;
}

Dataset decode_dataset(const std::vector<std::uint8_t>& in) {
  const container::Envelope env = container::open(in, kMagic, "dataset");
  const json& h = env.header;

  Dataset d;
  std::vector<std::size_t> lengths;
  std::vector<int> modes;
  try {
    d.task = task_from_string(h.at("task").get<std::string>());
    d.seed = h.at("seed").get<std::uint64_t>();
    const json& dims = h.at("dims");
    if (dims.at("state") != 2 || dims.at("action") != 2 || dims.at("goal") != 2) {
      throw FormatError("dataset: only 2-D states, actions and goals are supported", 12);
    }
    const json& st = h.at("stats");
    d.stats.state_mean = vec_from(st, "state_mean", 12);
    d.stats.state_std = vec_from(st, "state_std", 12);
    d.stats.action_mean = vec_from(st, "action_mean", 12);
    d.stats.action_std = vec_from(st, "action_std", 12);
    lengths = h.at("lengths").get<std::vector<std::size_t>>();
    modes = h.at("modes").get<std::vector<int>>();
    if (h.at("n_traj").get<std::size_t>() != lengths.size() || modes.size() != lengths.size()) {
      throw FormatError("dataset: n_traj disagrees with lengths/modes", 12);
    }
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("dataset: bad header field: ") + e.what(), 12);
  }

  std::size_t at = env.payload;
  std::size_t expected = at;
  for (std::size_t len : lengths) {
    if (len == 0) throw FormatError("dataset: trajectory with no states", 12);
    expected += 8 * (2 + 2 * len + 2 * (len - 1));
  }
  container::check_size(in, expected, "dataset");

  d.trajectories.resize(lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    Trajectory& t = d.trajectories[i];
    t.mode = modes[i];
    auto read = [&] {
      const double v = get_f64(in, at);
      at += 8;
      return v;
    };
    t.goal[0] = read();
    t.goal[1] = read();
    t.states.resize(lengths[i]);
    for (Vec2& s : t.states) s[0] = read(), s[1] = read();
    t.actions.resize(lengths[i] - 1);
    for (Vec2& a : t.actions) a[0] = read(), a[1] = read();
  }
  return d;
}

void save_dataset(const Dataset& d, const std::string& path) { container::write_file(encode_dataset(d), path); }

Dataset load_dataset(const std::string& path) { return decode_dataset(container::read_file(path)); }

Batch sample_batch(const Dataset& d, std::size_t batch, std::size_t history_len, std::size_t chunk_len, Rng& rng) {
  if (d.trajectories.empty()) throw ValidationError("sample_batch: dataset has no trajectories");
  if (batch == 0 || history_len == 0 || chunk_len == 0) throw ArgumentError("sample_batch: zero-sized request");
  Batch b{Tensor({batch, history_len, 2}), Tensor({batch, 2}), Tensor({batch, chunk_len, 2})};
  // Uniform over (trajectory, start offset) pairs.
  auto starts = [&](const Trajectory& tr) {
    return (tr.actions.size() > chunk_len ? tr.actions.size() - chunk_len : 0) + 1;
  };
  std::vector<std::size_t> cumulative(d.trajectories.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < d.trajectories.size(); ++i) cumulative[i] = total += starts(d.trajectories[i]);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t pick = static_cast<std::size_t>(rng.below(total));
    const std::size_t ti = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
    const Trajectory& tr = d.trajectories[ti];
    const std::size_t n_act = tr.actions.size();
    const std::size_t t = pick - (cumulative[ti] - starts(tr));
    for (std::size_t k = 0; k < history_len; ++k) {
      const std::size_t back = history_len - 1 - k;
      const Vec2 s = d.stats.normalize_state(tr.states[t >= back ? t - back : 0]);
      b.states[(i * history_len + k) * 2] = s[0];
      b.states[(i * history_len + k) * 2 + 1] = s[1];
    }
    const Vec2 g = d.stats.normalize_state(tr.goal);
    b.goals[i * 2] = g[0];
    b.goals[i * 2 + 1] = g[1];
    for (std::size_t k = 0; k < chunk_len; ++k) {
      const Vec2 a = d.stats.normalize_action(t + k < n_act ? tr.actions[t + k] : Vec2{0, 0});
      b.actions[(i * chunk_len + k) * 2] = a[0];
      b.actions[(i * chunk_len + k) * 2 + 1] = a[1];
    }
  }
  return b;
}

int branch_of(const std::vector<Vec2>& states) {
  double lo = 0.0, hi = 0.0;
  for (const Vec2& s : states) {
    lo = std::min(lo, s[0]);
    hi = std::max(hi, s[0]);
  }
  const double threshold = 0.5 * kForkWaypoint[0];
  if (hi >= threshold && hi >= -lo) return 1;
  if (-lo >= threshold && -lo > hi) return -1;
  return 0;
}

EvalMetrics evaluate_policy(const ChunkSampler& sampler, Task task, std::size_t n_episodes, std::uint64_t seed,
                            const EvalOptions& options) {
  if (n_episodes == 0) throw ArgumentError("evaluate_policy: n_episodes must be >= 1");
  if (options.history_len == 0) throw ArgumentError("evaluate_policy: history_len must be >= 1");
  struct Episode {
    Rng rng;
    Vec2 goal{};
    std::vector<Vec2> states;
    bool done = false;
    bool success = false;
  };

  EvalMetrics m;
  m.episodes = n_episodes;
  double steps_total = 0.0;
  const std::size_t width = options.lockstep == 0 ? n_episodes : options.lockstep;

  for (std::size_t first = 0; first < n_episodes; first += width) {
    const std::size_t count = std::min(width, n_episodes - first);
    std::vector<Episode> eps;
    eps.reserve(count);
    for (std::size_t e = 0; e < count; ++e) {
      Episode ep;
      ep.rng = Rng::split(seed, first + e);
      ep.states.push_back({kStartNoise * ep.rng.normal(), kStartNoise * ep.rng.normal()});
      ep.goal = task == Task::two_goal_reach ? kReachGoals[ep.rng.below(2)] : kForkGoal;
      eps.push_back(std::move(ep));
    }

    while (true) {
      std::vector<std::size_t> active;
      for (std::size_t e = 0; e < count; ++e)
        if (!eps[e].done) active.push_back(e);
      if (active.empty()) break;

      std::vector<Observation> obs;
      std::vector<Rng*> rngs;
      for (std::size_t e : active) {
        Observation o;
        o.goal = eps[e].goal;
        const auto& st = eps[e].states;
        for (std::size_t k = 0; k < options.history_len; ++k) {
          const std::size_t back = options.history_len - 1 - k;
          o.history.push_back(st.size() > back ? st[st.size() - 1 - back] : st.front());
        }
        obs.push_back(std::move(o));
        rngs.push_back(&eps[e].rng);
      }
      const auto chunks = sampler(obs, rngs);
      if (chunks.size() != active.size()) throw DimensionError("evaluate_policy: sampler returned wrong batch");

      for (std::size_t i = 0; i < active.size(); ++i) {
        Episode& ep = eps[active[i]];
        if (chunks[i].empty()) throw DimensionError("evaluate_policy: sampler returned an empty chunk");
        for (const Vec2& a : chunks[i]) {
          if (!std::isfinite(a[0]) || !std::isfinite(a[1])) throw NumericError("evaluate_policy: non-finite action");
          ep.states.push_back(env_step(ep.states.back(), a));
          if (distance(ep.states.back(), ep.goal) <= kSuccessRadius) {
            ep.success = ep.done = true;
            break;
          }
          if (ep.states.size() - 1 >= options.horizon) {
            ep.done = true;
            break;
          }
        }
      }
    }

    for (const Episode& ep : eps) {
      m.successes += ep.success;
      steps_total += static_cast<double>(ep.states.size() - 1);
      const int b = branch_of(ep.states);
      m.left += b < 0;
      m.right += b > 0;
    }
  }

  m.success_rate = static_cast<double>(m.successes) / static_cast<double>(n_episodes);
  m.mean_steps = steps_total / static_cast<double>(n_episodes);
  if (task == Task::fork_path) {
    const double n = static_cast<double>(n_episodes);
    m.mode_coverage = 2.0 * std::min(static_cast<double>(m.left) / n, static_cast<double>(m.right) / n);
  }
  return m;
}

ChunkSampler scripted_sampler(Task task, std::size_t chunk_len) {
  return [task, chunk_len](const std::vector<Observation>& obs, const std::vector<Rng*>& rngs) {
    std::vector<std::vector<Vec2>> out(obs.size());
    for (std::size_t i = 0; i < obs.size(); ++i) {
      Vec2 s = obs[i].history.back();
      int side = s[0] > 0.0 ? 1 : (s[0] < 0.0 ? -1 : (rngs[i]->below(2) == 0 ? -1 : 1));
      for (std::size_t k = 0; k < chunk_len; ++k) {
        Vec2 target = obs[i].goal;
        if (task == Task::fork_path) {
          const Vec2 w = fork_waypoint(side);
          if (distance(s, w) > kSuccessRadius && s[1] < w[1] - kSuccessRadius) target = w;
        }
        const Vec2 a = controller(s, target);
        out[i].push_back(a);
        s = env_step(s, a);
      }
    }
    return out;
  };
}

ChunkSampler random_sampler(std::size_t chunk_len) {
  return [chunk_len](const std::vector<Observation>& obs, const std::vector<Rng*>& rngs) {
    std::vector<std::vector<Vec2>> out(obs.size());
    for (std::size_t i = 0; i < obs.size(); ++i)
      for (std::size_t k = 0; k < chunk_len; ++k) out[i].push_back({rngs[i]->uniform(-1, 1), rngs[i]->uniform(-1, 1)});
    return out;
  };
}

ChunkSampler diffusion_sampler(const MoDEModel& model, const NormStats& stats, const ExpertCache* cache) {
  return [&model, stats, cache](const std::vector<Observation>& obs, const std::vector<Rng*>& rngs) {
    const ModelConfig& c = model.config();
    const std::size_t batch = obs.size();
    const std::size_t h = c.history_len, j = c.chunk_len, a_dim = c.action_dim;
    DenoiserInput in;
    in.states = Tensor({batch, h, c.state_dim});
    in.goals = Tensor({batch, c.goal_dim});
    Tensor x({batch, j, a_dim});
    const auto grid = cache ? cache->table().grid() : make_sigma_grid(c.schedule);
    for (std::size_t i = 0; i < batch; ++i) {
      if (obs[i].history.size() != h) throw DimensionError("diffusion_sampler: history length mismatch");
      for (std::size_t k = 0; k < h; ++k) {
        const Vec2 s = stats.normalize_state(obs[i].history[k]);
        in.states[(i * h + k) * 2] = s[0];
        in.states[(i * h + k) * 2 + 1] = s[1];
      }
      const Vec2 g = stats.normalize_state(obs[i].goal);
      in.goals[i * 2] = g[0];
      in.goals[i * 2 + 1] = g[1];
      for (std::size_t e = 0; e < j * a_dim; ++e) x[i * j * a_dim + e] = grid.front() * rngs[i]->normal();
    }
    Denoiser denoiser = [&](const Tensor& xt, double sigma, std::size_t step) {
      in.noisy_actions = xt;
      return cache ? cached_forward(model, *cache, in, step) : model.denoise(in, sigma);
    };
    const Tensor actions = ddim_integrate(denoiser, std::move(x), grid);
    std::vector<std::vector<Vec2>> out(batch);
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t k = 0; k < j; ++k)
        out[i].push_back(stats.denormalize_action({actions[(i * j + k) * a_dim], actions[(i * j + k) * a_dim + 1]}));
    return out;
  };
}

}  // namespace mode
