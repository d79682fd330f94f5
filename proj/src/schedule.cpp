#include "osediff/schedule.hpp"

#include <torch/torch.h>

#include <cmath>
#include <numbers>

#include "osediff/errors.hpp"

namespace osediff {

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "linear-variance" || name == "linear") {
    return ScheduleKind::kLinearVariance;
  }
  if (name == "cosine") {
    return ScheduleKind::kCosine;
  }
  throw ConfigError("unknown schedule kind '" + std::string(name) +
                    "' (expected linear-variance or cosine)");
}

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::kCosine ? "cosine" : "linear-variance";
}

void NoiseSchedule::check_timestep(int64_t t) const {
  if (t < 1 || t > T) {
    throw RangeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
  }
}

double NoiseSchedule::alpha_at(int64_t t) const {
  check_timestep(t);
  return alpha[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::beta_at(int64_t t) const {
  check_timestep(t);
  return beta[static_cast<size_t>(t - 1)];
}

namespace {

torch::Tensor gather_coefficients(const std::vector<double>& values, int64_t T,
                                  const torch::Tensor& t, torch::ScalarType dtype) {
  auto idx = t.to(torch::kLong).reshape({-1});
  if (idx.numel() > 0) {
    const auto lo = idx.min().item<int64_t>();
    const auto hi = idx.max().item<int64_t>();
    if (lo < 1 || hi > T) {
      throw RangeError("timestep batch outside [1, " + std::to_string(T) + "]");
    }
  }
  auto table = torch::tensor(values, torch::kDouble);
  return table.index_select(0, idx - 1).to(dtype).to(t.device()).view({-1, 1, 1, 1});
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw DimensionError(std::string(what) + ": shape mismatch");
  }
}

}  // namespace

torch::Tensor NoiseSchedule::alpha_for(const torch::Tensor& t, torch::ScalarType dtype) const {
  return gather_coefficients(alpha, T, t, dtype);
}

torch::Tensor NoiseSchedule::beta_for(const torch::Tensor& t, torch::ScalarType dtype) const {
  return gather_coefficients(beta, T, t, dtype);
}

NoiseSchedule make_schedule(int64_t T, ScheduleKind kind, double beta_start, double beta_end) {
  if (T < 2) {
    throw ConfigError("schedule needs T >= 2, got " + std::to_string(T));
  }
  std::vector<double> betas(static_cast<size_t>(T));
  if (kind == ScheduleKind::kLinearVariance) {
    if (!(beta_start > 0.0) || !(beta_end > beta_start) || !(beta_end < 1.0)) {
      throw ConfigError("linear-variance schedule needs 0 < beta_start < beta_end < 1");
    }
    for (int64_t i = 0; i < T; ++i) {
      betas[static_cast<size_t>(i)] =
          beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
    }
  } else {
    constexpr double kOffset = 0.008;
    auto f = [&](double step) {
      const double c = std::cos((step / static_cast<double>(T) + kOffset) / (1.0 + kOffset) *
                                std::numbers::pi / 2.0);
      return c * c;
    };
    for (int64_t i = 0; i < T; ++i) {
      const double b = 1.0 - f(static_cast<double>(i + 1)) / f(static_cast<double>(i));
      betas[static_cast<size_t>(i)] = std::min(b, 0.999);
    }
  }

  NoiseSchedule s;
  s.T = T;
  s.alpha.resize(static_cast<size_t>(T));
  s.beta.resize(static_cast<size_t>(T));
  double retained = 1.0;
  for (size_t i = 0; i < betas.size(); ++i) {
    retained *= 1.0 - betas[i];
    s.alpha[i] = std::sqrt(retained);
    s.beta[i] = std::sqrt(1.0 - retained);
  }
  return s;
}

torch::Tensor forward_diffuse(const torch::Tensor& z, int64_t t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule) {
  check_same_shape(z, eps, "forward_diffuse");
  return schedule.alpha_at(t) * z + schedule.beta_at(t) * eps;
}

torch::Tensor forward_diffuse(const torch::Tensor& z, const torch::Tensor& t,
                              const torch::Tensor& eps, const NoiseSchedule& schedule) {
  check_same_shape(z, eps, "forward_diffuse");
  return schedule.alpha_for(t, z.scalar_type()) * z + schedule.beta_for(t, z.scalar_type()) * eps;
}

torch::Tensor one_step_denoise(const torch::Tensor& z_t, const torch::Tensor& eps_hat, int64_t t,
                               const NoiseSchedule& schedule) {
  check_same_shape(z_t, eps_hat, "one_step_denoise");
  return (z_t - schedule.beta_at(t) * eps_hat) / schedule.alpha_at(t);
}

torch::Tensor one_step_denoise(const torch::Tensor& z_t, const torch::Tensor& eps_hat,
                               const torch::Tensor& t, const NoiseSchedule& schedule) {
  check_same_shape(z_t, eps_hat, "one_step_denoise");
  return (z_t - schedule.beta_for(t, z_t.scalar_type()) * eps_hat) /
         schedule.alpha_for(t, z_t.scalar_type());
}

}  // namespace osediff
