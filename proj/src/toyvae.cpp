#include "osediff/toyvae.hpp"

#include <torch/torch.h>

#include <bit>

#include "blocks.hpp"
#include "osediff/errors.hpp"

namespace osediff {

namespace F = torch::nn::functional;

namespace {

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

}  // namespace

ToyVae::ToyVae(VaeConfig config, WeightMap weights, double latent_scale)
    : config_(config),
      table_(build_table(config)),
      weights_(std::move(weights)),
      latent_scale_(latent_scale) {
  for (const auto& s : table_.specs()) {
    if (weights_.count(s.name + ".weight") == 0) {
      throw ConfigError("VAE weights missing '" + s.name + ".weight'");
    }
  }
}

ToyVae ToyVae::create(const VaeConfig& config, uint64_t seed, torch::ScalarType dtype) {
  auto gen = make_generator(seed);
  auto table = build_table(config);
  return ToyVae(config, table.initialize(gen, dtype), 1.0);
}

int64_t ToyVae::levels() const {
  return std::countr_zero(static_cast<uint64_t>(config_.factor));
}

LayerTable ToyVae::build_table(const VaeConfig& c) {
  if (c.factor < 2 || !std::has_single_bit(static_cast<uint64_t>(c.factor))) {
    throw ConfigError("VAE factor must be a power of two >= 2");
  }
  if (c.latent_channels < 1 || c.width < 4) {
    throw ConfigError("VAE needs latent_channels >= 1 and width >= 4");
  }
  const int64_t levels = std::countr_zero(static_cast<uint64_t>(c.factor));
  const int64_t w = c.width;
  LayerTable t;
  t.conv("encoder.conv_in", 3, w, 3, true);
  int64_t ch = w;
  for (int64_t i = 0; i < levels; ++i) {
    const auto p = "encoder.down" + std::to_string(i);
    t.conv(p + ".conv", ch, ch, 3, true);
    blocks::declare_res(t, p + ".res", ch, 2 * w, 0, true);
    ch = 2 * w;
  }
  t.conv("encoder.conv_out", ch, 2 * c.latent_channels, 3, true);

  t.conv("decoder.conv_in", c.latent_channels, 2 * w, 3, false);
  blocks::declare_res(t, "decoder.mid", 2 * w, 2 * w, 0, false);
  ch = 2 * w;
  for (int64_t i = 0; i < levels; ++i) {
    const auto p = "decoder.up" + std::to_string(i);
    t.conv(p + ".conv", ch, w, 3, false);
    if (i + 1 < levels) {
      blocks::declare_res(t, p + ".res", w, w, 0, false);
    }
    ch = w;
  }
  t.norm("decoder.norm_out", w);
  t.conv("decoder.conv_out", w, 3, 3, false);
  return t;
}

std::vector<LayerSpec> ToyVae::encoder_layers() const {
  std::vector<LayerSpec> out;
  for (const auto& s : table_.adaptable()) {
    if (s.name.rfind("encoder.", 0) == 0) {
      out.push_back(s);
    }
  }
  return out;
}

std::pair<torch::Tensor, torch::Tensor> ToyVae::moments(const torch::Tensor& x_in,
                                                        const AdapterSet* adapters) const {
  auto x = as_batch(x_in);
  if (x.dim() != 4 || x.size(1) != 3) {
    throw DimensionError("VAE encoder expects [B,3,H,W] images");
  }
  if (x.size(2) % config_.factor != 0 || x.size(3) % config_.factor != 0) {
    throw DimensionError("image size " + std::to_string(x.size(2)) + "x" +
                         std::to_string(x.size(3)) + " not divisible by VAE factor " +
                         std::to_string(config_.factor));
  }
  const WeightView w{&weights_, adapters};
  auto h = F::silu(ops::conv2d(w, "encoder.conv_in", x));
  for (int64_t i = 0; i < levels(); ++i) {
    const auto p = "encoder.down" + std::to_string(i);
    h = ops::conv2d(w, p + ".conv", h, 2);
    h = blocks::res(w, p + ".res", h);
  }
  h = ops::conv2d(w, "encoder.conv_out", F::silu(h));
  auto parts = h.chunk(2, 1);
  return {parts[0], parts[1].clamp(-30.0, 20.0)};
}

torch::Tensor ToyVae::encode(const torch::Tensor& x, const AdapterSet* adapters) const {
  return moments(x, adapters).first * latent_scale_;
}

torch::Tensor ToyVae::decode_unscaled(const torch::Tensor& z_in) const {
  auto z = as_batch(z_in);
  if (z.dim() != 4 || z.size(1) != config_.latent_channels) {
    throw DimensionError("VAE decoder expects [B," + std::to_string(config_.latent_channels) +
                         ",h,w] latents");
  }
  const WeightView w{&weights_, nullptr};
  auto h = ops::conv2d(w, "decoder.conv_in", z);
  h = blocks::res(w, "decoder.mid", h);
  for (int64_t i = 0; i < levels(); ++i) {
    const auto p = "decoder.up" + std::to_string(i);
    h = F::interpolate(h, F::InterpolateFuncOptions()
                              .scale_factor(std::vector<double>{2.0, 2.0})
                              .mode(torch::kNearest));
    h = ops::conv2d(w, p + ".conv", h);
    if (i + 1 < levels()) {
      h = blocks::res(w, p + ".res", h);
    }
  }
  h = F::silu(ops::group_norm(w, "decoder.norm_out", h, ops::norm_groups(h.size(1))));
  return ops::conv2d(w, "decoder.conv_out", h);
}

torch::Tensor ToyVae::decode(const torch::Tensor& z) const {
  return decode_unscaled(as_batch(z) / latent_scale_).clamp(-1.0, 1.0);
}

}  // namespace osediff
