#pragma once

#include <torch/types.h>

#include <cstdint>
#include <vector>

#include "osediff/layers.hpp"

namespace osediff {

struct VaeConfig {
  int64_t latent_channels = 4;
  /// Spatial downsampling factor; a power of two.
  int64_t factor = 4;
  int64_t width = 32;
};

/// Small convolutional VAE providing the latent space.
///
/// The encoder returns the posterior mean multiplied by `latent_scale` (set
/// after pretraining so latents have unit variance); the decoder divides by
/// the same factor. Only encoder layers are adaptable.
class ToyVae {
 public:
  ToyVae() = default;
  ToyVae(VaeConfig config, WeightMap weights, double latent_scale = 1.0);

  /// Fresh weights drawn from `seed`.
  static ToyVae create(const VaeConfig& config, uint64_t seed,
                       torch::ScalarType dtype = torch::kFloat);

  const VaeConfig& config() const { return config_; }
  const WeightMap& weights() const { return weights_; }
  WeightMap& mutable_weights() { return weights_; }
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s) { latent_scale_ = s; }

  const LayerTable& layers() const { return table_; }
  std::vector<LayerSpec> encoder_layers() const;

  /// Deterministic latent (scaled posterior mean). Accepts [3,H,W] or
  /// [B,3,H,W]; H and W must be divisible by the factor.
  torch::Tensor encode(const torch::Tensor& x, const AdapterSet* adapters = nullptr) const;

  /// Unscaled posterior mean and log-variance, used by pretraining.
  std::pair<torch::Tensor, torch::Tensor> moments(const torch::Tensor& x,
                                                  const AdapterSet* adapters = nullptr) const;

  /// Image in [-1, 1], shape [B, 3, f*h, f*w].
  torch::Tensor decode(const torch::Tensor& z) const;

  /// Decoder output before clamping and without latent scaling.
  torch::Tensor decode_unscaled(const torch::Tensor& z) const;

 private:
  static LayerTable build_table(const VaeConfig& config);
  int64_t levels() const;

  VaeConfig config_;
  LayerTable table_;
  WeightMap weights_;
  double latent_scale_ = 1.0;
};

}  // namespace osediff
