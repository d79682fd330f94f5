#pragma once

#include <ATen/core/Generator.h>
#include <torch/types.h>

#include <cstdint>
#include <string>

#include "osediff/denoiser.hpp"
#include "osediff/lora.hpp"
#include "osediff/schedule.hpp"

namespace osediff {

/// How the distillation gradient is normalised.
///   kL1      omega = 1 / mean(|z_phi - z_hat|)
///   kL2      omega = 1 / sqrt(mean((z_phi - z_hat)^2))
///   kClassic omega = beta_t^2, no batch normalisation
enum class OmegaMode { kL1, kL2, kClassic };
OmegaMode parse_omega_mode(const std::string& name);
std::string to_string(OmegaMode mode);

/// Scale of the surrogate loss whose gradient is delivered to z_hat: kSum
/// delivers G itself, kMean delivers G / numel (matching a mean-reduced
/// data loss).
enum class Reduction { kSum, kMean };
Reduction parse_reduction(const std::string& name);
std::string to_string(Reduction r);

struct VsdConfig {
  double cfg_scale = 7.5;
  /// Inclusive timestep bounds; 0 selects floor(0.02 T) and floor(0.98 T).
  int64_t t_min = 0;
  int64_t t_max = 0;
  OmegaMode omega = OmegaMode::kL1;
  Reduction reduction = Reduction::kMean;
  /// Also guide the finetuned regularizer's prediction.
  bool cfg_on_phi_prime = false;
};

int64_t vsd_t_min(const VsdConfig& c, int64_t T);
int64_t vsd_t_max(const VsdConfig& c, int64_t T);

/// Stop-gradient quantities of one distillation step.
struct RegularizerPrediction {
  torch::Tensor z_phi;        // frozen regularizer (guided) denoised latent
  torch::Tensor z_phi_prime;  // finetuned regularizer denoised latent
  torch::Tensor eps_phi;
  torch::Tensor eps_phi_prime;
  int64_t t = 0;
  double omega = 0.0;
  /// z_phi equals z_hat exactly; the step contributes no gradient.
  bool degenerate = false;
};

struct RegGradient {
  RegularizerPrediction pred;
  /// omega * (z_phi_prime - z_phi), shaped like z_hat.
  torch::Tensor grad;
  /// Scalar whose gradient w.r.t. z_hat is `grad` (kSum) or grad / numel
  /// (kMean). Backpropagating it moves only the generator.
  torch::Tensor surrogate;
};

/// omega for one batch; sets `degenerate` when z_phi equals z_hat exactly
/// (omega is then 0).
double omega_weight(const torch::Tensor& z_phi, const torch::Tensor& z_hat, OmegaMode mode,
                    const NoiseSchedule& s, int64_t t, bool* degenerate = nullptr);

/// Regularizer predictions for a fixed (t, eps). `z_hat` is detached here.
RegularizerPrediction regularizer_predict(const torch::Tensor& z_hat, const torch::Tensor& context,
                                          const torch::Tensor& negative, const Denoiser& base,
                                          const AdapterSet& phi_prime, const NoiseSchedule& s,
                                          int64_t t, const torch::Tensor& eps,
                                          const VsdConfig& cfg);

/// Distillation gradient on `z_hat` with a fixed (t, eps).
RegGradient reg_gradient(const torch::Tensor& z_hat, const torch::Tensor& context,
                         const torch::Tensor& negative, const Denoiser& base,
                         const AdapterSet& phi_prime, const NoiseSchedule& s, int64_t t,
                         const torch::Tensor& eps, const VsdConfig& cfg);

/// Same, drawing t uniformly from [t_min, t_max] and eps ~ N(0, I) from `gen`.
RegGradient reg_gradient(const torch::Tensor& z_hat, const torch::Tensor& context,
                         const torch::Tensor& negative, const Denoiser& base,
                         const AdapterSet& phi_prime, const NoiseSchedule& s, at::Generator& gen,
                         const VsdConfig& cfg);

/// Diffusion loss of the finetuned regularizer on detached generator
/// latents: mean((eps_phi'(alpha_t z + beta_t eps; t, c) - eps)^2), with one
/// timestep per sample in `t`.
torch::Tensor regularizer_loss(const torch::Tensor& z_hat, const torch::Tensor& context,
                               const Denoiser& base, const AdapterSet& phi_prime,
                               const NoiseSchedule& s, const torch::Tensor& t,
                               const torch::Tensor& eps);

/// Same, drawing t uniformly from {t_min..t_max} per sample (t_max = 0
/// selects T) and eps from `gen`.
torch::Tensor regularizer_loss(const torch::Tensor& z_hat, const torch::Tensor& context,
                               const Denoiser& base, const AdapterSet& phi_prime,
                               const NoiseSchedule& s, at::Generator& gen, int64_t t_min = 1,
                               int64_t t_max = 0);

}  // namespace osediff
