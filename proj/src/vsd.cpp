#include "osediff/vsd.hpp"

#include <torch/torch.h>

#include <cmath>

#include "osediff/errors.hpp"

namespace osediff {

OmegaMode parse_omega_mode(const std::string& name) {
  if (name == "l1") return OmegaMode::kL1;
  if (name == "l2") return OmegaMode::kL2;
  if (name == "classic") return OmegaMode::kClassic;
  throw ConfigError("unknown omega mode '" + name + "' (l1, l2, classic)");
}

std::string to_string(OmegaMode mode) {
  switch (mode) {
    case OmegaMode::kL1:
      return "l1";
    case OmegaMode::kL2:
      return "l2";
    case OmegaMode::kClassic:
      return "classic";
  }
  return "l1";
}

Reduction parse_reduction(const std::string& name) {
  if (name == "sum") return Reduction::kSum;
  if (name == "mean") return Reduction::kMean;
  throw ConfigError("unknown reduction '" + name + "' (sum, mean)");
}

std::string to_string(Reduction r) { return r == Reduction::kSum ? "sum" : "mean"; }

int64_t vsd_t_min(const VsdConfig& c, int64_t T) {
  return c.t_min > 0 ? c.t_min : std::max<int64_t>(1, static_cast<int64_t>(std::floor(0.02 * static_cast<double>(T) + 1e-9)));
}

int64_t vsd_t_max(const VsdConfig& c, int64_t T) {
  return c.t_max > 0 ? c.t_max : std::max<int64_t>(1, static_cast<int64_t>(std::floor(0.98 * static_cast<double>(T) + 1e-9)));
}

double omega_weight(const torch::Tensor& z_phi, const torch::Tensor& z_hat, OmegaMode mode,
                    const NoiseSchedule& s, int64_t t, bool* degenerate) {
  torch::NoGradGuard no_grad;
  auto diff = (z_phi - z_hat).to(torch::kDouble);
  const bool zero = diff.abs().max().item<double>() == 0.0;
  if (degenerate != nullptr) {
    *degenerate = zero;
  }
  if (zero) {
    return 0.0;
  }
  switch (mode) {
    case OmegaMode::kL1:
      return 1.0 / diff.abs().mean().item<double>();
    case OmegaMode::kL2:
      return 1.0 / std::sqrt(diff.square().mean().item<double>());
    case OmegaMode::kClassic:
      return s.beta_at(t) * s.beta_at(t);
  }
  return 0.0;
}

RegularizerPrediction regularizer_predict(const torch::Tensor& z_hat_in,
                                          const torch::Tensor& context,
                                          const torch::Tensor& negative, const Denoiser& base,
                                          const AdapterSet& phi_prime, const NoiseSchedule& s,
                                          int64_t t, const torch::Tensor& eps,
                                          const VsdConfig& cfg) {
  s.check_timestep(t);
  if (!eps.sizes().equals(z_hat_in.sizes())) {
    throw DimensionError("noise sample must match the latent shape");
  }
  torch::NoGradGuard no_grad;
  auto z_hat = z_hat_in.detach();
  auto z_t = forward_diffuse(z_hat, t, eps, s);
  auto tt = torch::full({z_hat.size(0)}, t, torch::kLong);

  RegularizerPrediction p;
  p.t = t;
  p.eps_phi = cfg_predict(base, z_t, tt, context, negative, cfg.cfg_scale, nullptr);
  p.eps_phi_prime = cfg.cfg_on_phi_prime
                        ? cfg_predict(base, z_t, tt, context, negative, cfg.cfg_scale, &phi_prime)
                        : base.predict_noise(z_t, tt, context, &phi_prime);
  p.z_phi = one_step_denoise(z_t, p.eps_phi, t, s);
  p.z_phi_prime = one_step_denoise(z_t, p.eps_phi_prime, t, s);

  p.omega = omega_weight(p.z_phi, z_hat, cfg.omega, s, t, &p.degenerate);
  return p;
}

RegGradient reg_gradient(const torch::Tensor& z_hat, const torch::Tensor& context,
                         const torch::Tensor& negative, const Denoiser& base,
                         const AdapterSet& phi_prime, const NoiseSchedule& s, int64_t t,
                         const torch::Tensor& eps, const VsdConfig& cfg) {
  RegGradient out;
  out.pred = regularizer_predict(z_hat, context, negative, base, phi_prime, s, t, eps, cfg);
  {
    torch::NoGradGuard no_grad;
    out.grad = out.pred.degenerate
                   ? torch::zeros_like(z_hat)
                   : (out.pred.z_phi_prime - out.pred.z_phi) * out.pred.omega;
  }
  auto weight = out.grad.detach();
  if (cfg.reduction == Reduction::kMean) {
    weight = weight / static_cast<double>(z_hat.numel());
  }
  out.surrogate = (z_hat * weight).sum();
  return out;
}

RegGradient reg_gradient(const torch::Tensor& z_hat, const torch::Tensor& context,
                         const torch::Tensor& negative, const Denoiser& base,
                         const AdapterSet& phi_prime, const NoiseSchedule& s, at::Generator& gen,
                         const VsdConfig& cfg) {
  const int64_t lo = vsd_t_min(cfg, s.T);
  const int64_t hi = vsd_t_max(cfg, s.T);
  if (lo < 1 || hi > s.T || lo > hi) {
    throw ConfigError("distillation timestep bounds must satisfy 1 <= t_min <= t_max <= T");
  }
  const int64_t t = torch::randint(lo, hi + 1, {1}, gen, torch::kLong).item<int64_t>();
  auto eps = torch::randn(z_hat.sizes(), gen, z_hat.options().requires_grad(false));
  return reg_gradient(z_hat, context, negative, base, phi_prime, s, t, eps, cfg);
}

torch::Tensor regularizer_loss(const torch::Tensor& z_hat, const torch::Tensor& context,
                               const Denoiser& base, const AdapterSet& phi_prime,
                               const NoiseSchedule& s, const torch::Tensor& t,
                               const torch::Tensor& eps) {
  if (!eps.sizes().equals(z_hat.sizes())) {
    throw DimensionError("noise sample must match the latent shape");
  }
  auto z = z_hat.detach();
  auto z_t = forward_diffuse(z, t, eps, s);
  auto pred = base.predict_noise(z_t, t, context, &phi_prime);
  return torch::mse_loss(pred, eps);
}

torch::Tensor regularizer_loss(const torch::Tensor& z_hat, const torch::Tensor& context,
                               const Denoiser& base, const AdapterSet& phi_prime,
                               const NoiseSchedule& s, at::Generator& gen, int64_t t_min,
                               int64_t t_max) {
  const int64_t hi = t_max > 0 ? t_max : s.T;
  if (t_min < 1 || hi > s.T || t_min > hi) {
    throw ConfigError("regularizer timestep bounds must satisfy 1 <= t_min <= t_max <= T");
  }
  auto t = torch::randint(t_min, hi + 1, {z_hat.size(0)}, gen, torch::kLong);
  auto eps = torch::randn(z_hat.sizes(), gen, z_hat.options().requires_grad(false));
  return regularizer_loss(z_hat, context, base, phi_prime, s, t, eps);
}

}  // namespace osediff
