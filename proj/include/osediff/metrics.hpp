#pragma once

#include <torch/types.h>

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace osediff {

class ToyVae;

inline constexpr double kPsnrCap = 99.0;

/// Y-channel PSNR in dB on the 0..255 scale for [3,H,W] images in [-1, 1];
/// identical images give kPsnrCap.
double psnr(const torch::Tensor& a, const torch::Tensor& b);

struct SsimWindow {
  int64_t size = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Mean Y-channel SSIM over all valid window positions.
double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimWindow& window = {});

/// Frechet distance between Gaussian fits of two feature sets [N, d] and
/// [M, d]; each needs at least d + 1 rows.
double toy_frechet(const torch::Tensor& features_a, const torch::Tensor& features_b);

/// Frozen-encoder features: latent means average-pooled to 2x2, flattened,
/// followed by the per-channel spatial std.
torch::Tensor frechet_features(const ToyVae& vae, const torch::Tensor& images);

/// Width of `frechet_features` rows; a Frechet estimate needs more samples.
int64_t frechet_feature_dim(const ToyVae& vae);

struct MetricReport {
  std::vector<std::string> names;
  std::vector<double> psnr;
  std::vector<double> ssim;
  std::optional<double> frechet;
  double mean_psnr() const;
  double mean_ssim() const;
  nlohmann::json to_json() const;
};

/// Per-image PSNR/SSIM for [N,3,H,W] batches; Frechet against `ref` when a
/// featurizer is supplied.
MetricReport evaluate_images(const torch::Tensor& pred, const torch::Tensor& ref,
                             const ToyVae* featurizer = nullptr,
                             const std::vector<std::string>& names = {});

}  // namespace osediff
