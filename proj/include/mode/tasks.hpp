#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mode/model.hpp"
#include "mode/rng.hpp"
#include "mode/tensor.hpp"

namespace mode {

class ExpertCache;

using Vec2 = std::array<double, 2>;

enum class Task { two_goal_reach, fork_path };
std::string to_string(Task t);
Task task_from_string(const std::string& s);

// Environment and demonstrator constants.
inline constexpr double kDt = 0.1;
inline constexpr double kSuccessRadius = 0.1;
inline constexpr std::size_t kHorizon = 60;  // max actions per episode
inline constexpr double kStartNoise = 0.05;
inline constexpr double kActionNoise = 0.05;
inline constexpr double kGain = 2.0;
inline constexpr Vec2 kForkGoal{0.0, 1.5};
inline constexpr Vec2 kForkWaypoint{0.8, 0.75};  // x mirrored for the left branch
inline constexpr std::array<Vec2, 2> kReachGoals{Vec2{-1.0, 1.0}, Vec2{1.0, 1.0}};

// s' = s + clip(a, -1, 1) * dt
Vec2 env_step(const Vec2& s, const Vec2& a);
Vec2 clip_action(const Vec2& a);
double distance(const Vec2& a, const Vec2& b);

struct Trajectory {
  std::vector<Vec2> states;   // states.size() == actions.size() + 1
  std::vector<Vec2> actions;  // executed (clipped) commands
  Vec2 goal{};
  int mode = 0;  // -1 left / +1 right: the reach goal or the fork branch

  bool operator==(const Trajectory&) const = default;
};

struct NormStats {
  Vec2 state_mean{0, 0}, state_std{1, 1};
  Vec2 action_mean{0, 0}, action_std{1, 1};

  bool operator==(const NormStats&) const = default;
  Vec2 normalize_state(const Vec2& s) const;
  Vec2 normalize_action(const Vec2& a) const;
  Vec2 denormalize_action(const Vec2& a) const;
};

// Population mean/std over every stored state and action; goals share the
// state statistics. A constant dimension keeps std 1.
NormStats compute_stats(const std::vector<Trajectory>& trajectories);

struct Dataset {
  Task task = Task::two_goal_reach;
  std::uint64_t seed = 0;
  std::vector<Trajectory> trajectories;
  NormStats stats;

  bool operator==(const Dataset&) const = default;
};

// Scripted demonstrations: after reaching the goal the demonstrator keeps
// acting for `tail` more steps so late windows still hold a full chunk.
Dataset gen_dataset(Task task, std::size_t n_traj, std::uint64_t seed, std::size_t tail = 10);

// Container: "MODS", u32 LE version 1, u32 LE header length, JSON header,
// then per trajectory goal, states, actions as little-endian f64.
std::vector<std::uint8_t> encode_dataset(const Dataset& d);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);
void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

// Training windows: the state history ending at t (padded with the first
// state), the goal and the next chunk_len actions (zero-padded past the
// end), all normalized, drawn uniformly over (trajectory, offset) pairs.
// Tensors are [B,h,2], [B,2] and [B,j,2].
struct Batch {
  Tensor states;
  Tensor goals;
  Tensor actions;
};
Batch sample_batch(const Dataset& d, std::size_t batch, std::size_t history_len, std::size_t chunk_len, Rng& rng);

struct Observation {
  std::vector<Vec2> history;  // oldest first
  Vec2 goal{};
};

// Produces one chunk of raw (unnormalized) actions per observation; `rngs`
// holds each episode's private stream.
using ChunkSampler =
    std::function<std::vector<std::vector<Vec2>>(const std::vector<Observation>&, const std::vector<Rng*>& rngs)>;

struct EvalOptions {
  std::size_t horizon = kHorizon;
  std::size_t history_len = 1;
  std::size_t lockstep = 0;  // episodes advanced together; 0 = all
};

struct EvalMetrics {
  std::size_t episodes = 0;
  std::size_t successes = 0;
  double success_rate = 0.0;
  double mean_steps = 0.0;
  std::size_t left = 0, right = 0;
  std::optional<double> mode_coverage;  // fork_path only
};

// Branch an episode took: largest lateral excursion, when it reaches half
// the waypoint offset.
int branch_of(const std::vector<Vec2>& states);

EvalMetrics evaluate_policy(const ChunkSampler& sampler, Task task, std::size_t n_episodes, std::uint64_t seed,
                            const EvalOptions& options = {});

// The demonstrator without action noise, replanned from each observation.
ChunkSampler scripted_sampler(Task task, std::size_t chunk_len);
// Uniform random commands in [-1, 1]^2.
ChunkSampler random_sampler(std::size_t chunk_len);
// DDIM over the model (or its expert cache) in normalized coordinates.
ChunkSampler diffusion_sampler(const MoDEModel& model, const NormStats& stats, const ExpertCache* cache = nullptr);

}  // namespace mode
