#include "mode/diffusion.hpp"

#include <cmath>

#include "mode/error.hpp"

namespace mode {

std::string to_string(Spacing s) {
  switch (s) {
    case Spacing::exponential:
      return "exponential";
  }
  return "unknown";
}

Spacing spacing_from_string(const std::string& s) {
  if (s == "exponential") return Spacing::exponential;
  throw ConfigError("unknown sigma spacing '" + s + "'");
}

void NoiseSchedule::validate() const {
  if (!(sigma_min > 0.0) || !(sigma_min < sigma_max)) {
    throw ConfigError("noise schedule requires 0 < sigma_min < sigma_max");
  }
  if (!(sigma_data > 0.0)) throw ConfigError("noise schedule requires sigma_data > 0");
  if (num_sample_steps < 2) throw ConfigError("noise schedule requires at least 2 sampling steps");
}

std::vector<double> make_sigma_grid(const NoiseSchedule& schedule) {
  schedule.validate();
  const std::size_t n = schedule.num_sample_steps;
  const double lo = std::log(schedule.sigma_min);
  const double hi = std::log(schedule.sigma_max);
  std::vector<double> grid(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(n - 1);
    grid[i] = std::exp(hi + frac * (lo - hi));
  }
  grid.front() = schedule.sigma_max;
  grid.back() = schedule.sigma_min;
  return grid;
}

PreconditionCoeffs precondition(double sigma, double sigma_data) {
  if (!(sigma > 0.0)) throw DomainError("precondition: sigma must be > 0, got " + std::to_string(sigma));
  const double s2 = sigma * sigma;
  const double d2 = sigma_data * sigma_data;
  const double root = std::sqrt(s2 + d2);
  return {d2 / (s2 + d2), sigma * sigma_data / root, 1.0 / root, std::log(sigma) / 4.0};
}

double sm_loss_weight(double sigma, double sigma_data) {
  const double c_out = precondition(sigma, sigma_data).c_out;
  return 1.0 / (c_out * c_out);
}

double training_sigma_from_unit(double u, const NoiseSchedule& schedule) {
  const double lo = std::log(schedule.sigma_min);
  const double hi = std::log(schedule.sigma_max);
  return std::exp(lo + (hi - lo) * u);
}

double sample_training_sigma(Rng& rng, const NoiseSchedule& schedule) {
  return training_sigma_from_unit(rng.uniform(), schedule);
}

SmLoss sm_loss(Tape& tape, const TrainDenoiser& denoiser, const Tensor& clean, const NoiseSchedule& schedule,
               Rng& rng) {
  if (clean.rank() < 2 || clean.shape()[0] == 0) {
    throw DimensionError("sm_loss: expected a batched action tensor, got " + shape_string(clean.shape()));
  }
  const std::size_t batch = clean.shape()[0];
  const std::size_t per = clean.size() / batch;

  SmLoss out;
  out.sigmas.resize(batch);
  Tensor noisy = clean;
  std::vector<double> weights(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const double sigma = sample_training_sigma(rng, schedule);
    out.sigmas[b] = sigma;
    weights[b] = sm_loss_weight(sigma, schedule.sigma_data);
    for (std::size_t i = 0; i < per; ++i) noisy[b * per + i] += sigma * rng.normal();
  }
  Var denoised = denoiser(tape, noisy, out.sigmas);
  if (denoised.value().size() != clean.size()) {
    throw DimensionError("sm_loss: denoiser returned " + shape_string(denoised.shape()) + " for input " +
                         shape_string(clean.shape()));
  }
  const std::size_t rows_per = denoised.value().rows() / batch;
  if (rows_per * batch != denoised.value().rows()) {
    throw DimensionError("sm_loss: denoiser output rows are not a multiple of the batch");
  }
  out.loss = ad::weighted_sq_error(denoised, clean.reshaped(denoised.shape()), std::move(weights), rows_per);
  return out;
}

SmLoss sm_loss_network(Tape& tape, const TrainDenoiser& network, const Tensor& clean, const NoiseSchedule& schedule,
                       Rng& rng) {
  if (clean.rank() < 2 || clean.shape()[0] == 0) {
    throw DimensionError("sm_loss: expected a batched action tensor, got " + shape_string(clean.shape()));
  }
  const std::size_t batch = clean.shape()[0];
  const std::size_t per = clean.size() / batch;
  const double sd = schedule.sigma_data;

  SmLoss out;
  out.sigmas.resize(batch);
  Tensor noisy = clean;
  Tensor target(clean.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    const double sigma = sample_training_sigma(rng, schedule);
    out.sigmas[b] = sigma;
    const double denom = sd * std::sqrt(sigma * sigma + sd * sd);
    for (std::size_t i = 0; i < per; ++i) {
      const double n = rng.normal();
      const std::size_t e = b * per + i;
      noisy[e] += sigma * n;
      target[e] = (sigma * clean[e] - sd * sd * n) / denom;
    }
  }
  Var raw = network(tape, noisy, out.sigmas);
  if (raw.value().size() != clean.size()) {
    throw DimensionError("sm_loss: network returned " + shape_string(raw.shape()) + " for input " +
                         shape_string(clean.shape()));
  }
  const std::size_t rows_per = raw.value().rows() / batch;
  if (rows_per * batch != raw.value().rows()) {
    throw DimensionError("sm_loss: network output rows are not a multiple of the batch");
  }
  out.loss = ad::weighted_sq_error(raw, std::move(target).reshaped(raw.shape()), std::vector<double>(batch, 1.0),
                                   rows_per);
  return out;
}

void ddim_step(Tensor& x, const Tensor& denoised, double sigma, double sigma_next) {
  if (denoised.size() != x.size()) {
    throw DimensionError("ddim: denoiser returned " + shape_string(denoised.shape()) + " for " +
                         shape_string(x.shape()));
  }
  const double ratio = (sigma_next - sigma) / sigma;
  for (std::size_t e = 0; e < x.size(); ++e) x[e] += ratio * (x[e] - denoised[e]);
}

Tensor ddim_integrate(const Denoiser& denoiser, Tensor x, const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("ddim: empty sigma grid");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    Tensor denoised = denoiser(x, grid[i], i);
    if (i + 1 == grid.size()) {
      if (denoised.size() != x.size()) throw DimensionError("ddim: denoiser output size changed");
      x = std::move(denoised).reshaped(x.shape());
    } else {
      ddim_step(x, denoised, grid[i], grid[i + 1]);
    }
    if (!all_finite(x.flat())) throw NumericError("ddim: non-finite state after step " + std::to_string(i));
  }
  return x;
}

Tensor ddim_sample(const Denoiser& denoiser, const Shape& shape, const NoiseSchedule& schedule, Rng& rng) {
  const auto grid = make_sigma_grid(schedule);
  Tensor x(shape);
  for (double& v : x.flat()) v = schedule.sigma_max * rng.normal();
  return ddim_integrate(denoiser, std::move(x), grid);
}

}  // namespace mode
