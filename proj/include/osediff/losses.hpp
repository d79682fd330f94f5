#pragma once

#include <torch/types.h>

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace osediff {

/// Image -> list of feature maps [B, C_l, H_l, W_l].
using FeatureFn = std::function<std::vector<torch::Tensor>(const torch::Tensor&)>;

/// Frozen, seeded random-convolution pyramid (3 -> 16 -> 32 -> 32 channels,
/// the last two layers at stride 2, ReLU after each).
class RandomFeaturePyramid {
 public:
  explicit RandomFeaturePyramid(uint64_t seed = 5);
  std::vector<torch::Tensor> operator()(const torch::Tensor& x) const;

 private:
  std::vector<torch::Tensor> weights_;
  std::vector<torch::Tensor> biases_;
};

/// Per layer, feature vectors are unit-normalised across channels, their
/// squared difference is summed over channels and averaged over positions;
/// the result is averaged over layers. `a`, `b` are [B,3,H,W] or [3,H,W].
torch::Tensor perceptual_distance(const torch::Tensor& a, const torch::Tensor& b,
                                  const FeatureFn& backbone);

/// Shared instance of the default backbone.
const FeatureFn& default_backbone();

struct DataLossConfig {
  double lambda1 = 2.0;
  /// Empty selects `default_backbone()`.
  FeatureFn backbone;
};

/// MSE(x_hat, x_H) + lambda1 * perceptual_distance(x_hat, x_H).
torch::Tensor data_loss(const torch::Tensor& x_hat, const torch::Tensor& x_H,
                        const DataLossConfig& cfg);

}  // namespace osediff
