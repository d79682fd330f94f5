#pragma once

#include <torch/types.h>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace osediff {

enum class ScheduleKind { kLinearVariance, kCosine };

ScheduleKind parse_schedule_kind(std::string_view name);
std::string to_string(ScheduleKind kind);

/// Variance-preserving diffusion coefficients for timesteps 1..T.
///
/// `alpha[t - 1]` is the signal coefficient and `beta[t - 1]` the noise
/// coefficient of timestep t, so that z_t = alpha_t * z + beta_t * eps with
/// alpha_t^2 + beta_t^2 = 1. Both are kept in double precision; tensors built
/// from them are cast to the caller's dtype.
struct NoiseSchedule {
  int64_t T = 0;
  std::vector<double> alpha;
  std::vector<double> beta;

  double alpha_at(int64_t t) const;
  double beta_at(int64_t t) const;

  /// Per-sample coefficients shaped [B, 1, 1, 1] for a tensor of timesteps.
  torch::Tensor alpha_for(const torch::Tensor& t, torch::ScalarType dtype) const;
  torch::Tensor beta_for(const torch::Tensor& t, torch::ScalarType dtype) const;

  void check_timestep(int64_t t) const;
};

/// Standard DDPM construction. For kLinearVariance the per-step variances ramp
/// linearly from `beta_start` to `beta_end`; for kCosine the improved-DDPM
/// cosine rule is used and the two bounds are ignored.
NoiseSchedule make_schedule(int64_t T, ScheduleKind kind, double beta_start = 1e-4,
                            double beta_end = 0.02);

/// alpha_t * z + beta_t * eps.
torch::Tensor forward_diffuse(const torch::Tensor& z, int64_t t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule);

/// Batched variant with one timestep per leading-dimension sample.
torch::Tensor forward_diffuse(const torch::Tensor& z, const torch::Tensor& t,
                              const torch::Tensor& eps, const NoiseSchedule& schedule);

/// (z_t - beta_t * eps_hat) / alpha_t.
torch::Tensor one_step_denoise(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int64_t t,
                               const NoiseSchedule& schedule);

torch::Tensor one_step_denoise(const torch::Tensor& z_t, const torch::Tensor& eps_hat,
                               const torch::Tensor& t, const NoiseSchedule& schedule);

}  // namespace osediff
