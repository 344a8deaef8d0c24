#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mode/autodiff.hpp"
#include "mode/rng.hpp"
#include "mode/tensor.hpp"

namespace mode {

enum class Spacing { exponential };

std::string to_string(Spacing s);
Spacing spacing_from_string(const std::string& s);

struct NoiseSchedule {
  double sigma_min = 0.001;
  double sigma_max = 80.0;
  double sigma_data = 0.5;
  std::size_t num_sample_steps = 10;
  Spacing spacing = Spacing::exponential;

  // Throws ConfigError unless 0 < sigma_min < sigma_max, sigma_data > 0 and
  // at least two sampling steps.
  void validate() const;
};

// EDM preconditioning: D(x; s) = c_skip x + c_out F(c_in x; c_noise).
struct PreconditionCoeffs {
  double c_skip;
  double c_out;
  double c_in;
  double c_noise;
};

// Sampling levels sigma_max ... sigma_min, evenly spaced in log(sigma).
std::vector<double> make_sigma_grid(const NoiseSchedule& schedule);

PreconditionCoeffs precondition(double sigma, double sigma_data);

// EDM loss weight 1 / c_out^2 = (s^2 + sd^2) / (s sd)^2.
double sm_loss_weight(double sigma, double sigma_data);

// log-uniform on [sigma_min, sigma_max].
double sample_training_sigma(Rng& rng, const NoiseSchedule& schedule);
// The same map from a unit uniform u: exp(ln sigma_min + u (ln sigma_max - ln sigma_min)).
double training_sigma_from_unit(double u, const NoiseSchedule& schedule);

// Differentiable denoiser used during training. `noisy` holds one group of
// rows per batch element, `sigmas` one noise level per element.
using TrainDenoiser = std::function<Var(Tape&, const Tensor& noisy, const std::vector<double>& sigmas)>;

struct SmLoss {
  Var loss;
  std::vector<double> sigmas;
};

// Score-matching loss: per element draw s and eps ~ N(0, s^2 I), evaluate
// D(a + eps, s) and average weight(s) * (D - a)^2 over batch and action dims.
// `clean` is [batch, chunk, action_dim] (or any shape whose first extent is
// the batch).
SmLoss sm_loss(Tape& tape, const TrainDenoiser& denoiser, const Tensor& clean, const NoiseSchedule& schedule,
               Rng& rng);

// Same objective and the same random draws, written against the raw network
// output F where D = c_skip x + c_out F. weight * (D - a)^2 equals
// (F - target)^2 with target = (s a - sd^2 eps/s) / (sd sqrt(s^2 + sd^2)),
// which avoids the cancellation in D - a at small s.
SmLoss sm_loss_network(Tape& tape, const TrainDenoiser& network, const Tensor& clean, const NoiseSchedule& schedule,
                       Rng& rng);

// Inference denoiser: x at level sigma; `step` is the grid index being
// evaluated, so cached implementations can key on it.
using Denoiser = std::function<Tensor(const Tensor& x, double sigma, std::size_t step)>;

// One Euler step of the probability-flow ODE:
// x + (sigma_next - sigma) (x - denoised) / sigma, elementwise in place.
void ddim_step(Tensor& x, const Tensor& denoised, double sigma, double sigma_next);

// Deterministic DDIM (probability-flow Euler) integration from x_T at
// grid[0] down to sigma = 0. The last step returns D(x, grid.back()).
Tensor ddim_integrate(const Denoiser& denoiser, Tensor x, const std::vector<double>& grid);

// Draws x_T ~ N(0, sigma_max^2 I) of the given shape, then integrates.
Tensor ddim_sample(const Denoiser& denoiser, const Shape& shape, const NoiseSchedule& schedule, Rng& rng);

}  // namespace mode
