#include "osediff/losses.hpp"

#include <torch/torch.h>

#include <cmath>

#include "osediff/errors.hpp"
#include "osediff/layers.hpp"

namespace osediff {

namespace F = torch::nn::functional;

namespace {

constexpr int64_t kChannels[] = {3, 16, 32, 32};
constexpr int64_t kStrides[] = {1, 2, 2};

void check_same(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) {
    throw DimensionError("loss inputs differ in shape");
  }
}

}  // namespace

RandomFeaturePyramid::RandomFeaturePyramid(uint64_t seed) {
  auto gen = make_generator(seed);
  for (int l = 0; l < 3; ++l) {
    const int64_t ci = kChannels[l];
    const int64_t co = kChannels[l + 1];
    auto w = torch::randn({co, ci, 3, 3}, gen, torch::kFloat) * std::sqrt(2.0 / (ci * 9.0));
    auto b = torch::randn({co}, gen, torch::kFloat) * 0.01;
    weights_.push_back(w);
    biases_.push_back(b);
  }
}

std::vector<torch::Tensor> RandomFeaturePyramid::operator()(const torch::Tensor& x_in) const {
  auto x = x_in.dim() == 3 ? x_in.unsqueeze(0) : x_in;
  std::vector<torch::Tensor> out;
  auto h = x;
  for (size_t l = 0; l < weights_.size(); ++l) {
    h = torch::relu(F::conv2d(h, weights_[l].to(h.scalar_type()),
                              F::Conv2dFuncOptions()
                                  .bias(biases_[l].to(h.scalar_type()))
                                  .stride(kStrides[l])
                                  .padding(1)));
    out.push_back(h);
  }
  return out;
}

const FeatureFn& default_backbone() {
  static const RandomFeaturePyramid pyramid(5);
  static const FeatureFn fn = [](const torch::Tensor& x) { return pyramid(x); };
  return fn;
}

torch::Tensor perceptual_distance(const torch::Tensor& a, const torch::Tensor& b,
                                  const FeatureFn& backbone) {
  check_same(a, b);
  const auto& fn = backbone ? backbone : default_backbone();
  const auto fa = fn(a);
  const auto fb = fn(b);
  if (fa.size() != fb.size() || fa.empty()) {
    throw DimensionError("perceptual backbone returned mismatched feature lists");
  }
  auto unit = [](const torch::Tensor& f) {
    return f / (f.square().sum(1, true) + 1e-10).sqrt();
  };
  torch::Tensor total;
  for (size_t l = 0; l < fa.size(); ++l) {
    auto d = (unit(fa[l]) - unit(fb[l])).square().sum(1).mean();
    total = l == 0 ? d : total + d;
  }
  return total / static_cast<double>(fa.size());
}

torch::Tensor data_loss(const torch::Tensor& x_hat, const torch::Tensor& x_H,
                        const DataLossConfig& cfg) {
  check_same(x_hat, x_H);
  if (cfg.lambda1 < 0) {
    throw ConfigError("lambda1 must be >= 0");
  }
  auto loss = torch::mse_loss(x_hat, x_H);
  if (cfg.lambda1 > 0) {
    loss = loss + cfg.lambda1 * perceptual_distance(x_hat, x_H, cfg.backbone);
  }
  return loss;
}

}  // namespace osediff
