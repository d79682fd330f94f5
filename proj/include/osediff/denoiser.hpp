#pragma once

#include <torch/types.h>

#include <atomic>
#include <cstdint>
#include <string>
#include <vector>

#include "osediff/layers.hpp"

namespace osediff {

/// The negative prompt used for classifier-free guidance of the frozen
/// regularizer.
inline constexpr const char* kDefaultNegativePrompt =
    "painting, oil painting, illustration, drawing, art, sketch, oil painting, cartoon, "
    "CG Style, 3D render, unreal engine, blurring, dirty, messy, worst quality, low quality, "
    "frames, watermark, signature, jpeg artifacts, deformed, lowres, over-smooth";

enum class PromptSource { kNull, kTagStub, kNegative, kExternal };

/// Conditioning tokens [tokens, dim] (or [B, tokens, dim] when batched).
struct PromptEmbedding {
  torch::Tensor vectors;
  PromptSource source = PromptSource::kNull;
};

/// Fixed random-projection text embedder. Every comma-separated phrase maps
/// to a Gaussian vector seeded by a hash of the normalised phrase, so any
/// string is encodable without learned weights. Phrases fill `tokens` slots
/// in order; surplus phrases are averaged into slot (index mod tokens) and
/// unused slots hold the empty-phrase vector.
class TextEmbedder {
 public:
  TextEmbedder(int64_t tokens = 8, int64_t dim = 32, uint64_t seed = 0);

  int64_t tokens() const { return tokens_; }
  int64_t dim() const { return dim_; }

  torch::Tensor phrase_vector(const std::string& phrase) const;
  PromptEmbedding encode(const std::vector<std::string>& phrases,
                         PromptSource source = PromptSource::kTagStub) const;
  PromptEmbedding encode_text(const std::string& comma_separated, PromptSource source) const;

  /// Embedding of the empty prompt; identical across calls.
  PromptEmbedding null_embedding() const;
  PromptEmbedding negative_embedding(const std::string& text = kDefaultNegativePrompt) const;

 private:
  int64_t tokens_;
  int64_t dim_;
  uint64_t seed_;
};

/// Stacks per-image embeddings into a [B, tokens, dim] batch.
torch::Tensor stack_prompts(const std::vector<PromptEmbedding>& prompts);

/// Repeats one embedding `batch` times.
torch::Tensor repeat_prompt(const PromptEmbedding& prompt, int64_t batch);

struct DenoiserConfig {
  int64_t latent_channels = 4;
  int64_t width = 64;
  int64_t heads = 4;
  int64_t text_dim = 32;
};

/// Conditional noise-prediction UNet: two resolution levels, residual blocks
/// with sinusoidal timestep embedding, and one cross-attention block per
/// level (and per decoder level) attending over prompt tokens.
///
/// One set of base weights serves every instantiation; the adapter set passed
/// to `predict_noise` selects the teacher (none), the student, or the
/// finetuned regularizer.
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(DenoiserConfig config, WeightMap weights);
  Denoiser(const Denoiser& other);
  Denoiser& operator=(const Denoiser& other);

  static Denoiser create(const DenoiserConfig& config, uint64_t seed,
                         torch::ScalarType dtype = torch::kFloat);

  const DenoiserConfig& config() const { return config_; }
  const WeightMap& weights() const { return weights_; }
  WeightMap& mutable_weights() { return weights_; }
  const LayerTable& layers() const { return table_; }

  /// eps_hat(z_t; t, c). `z_t` is [B, C, h, w], `t` holds one timestep per
  /// sample (or a single timestep broadcast to the batch), `context` is
  /// [B, tokens, dim] or [tokens, dim].
  torch::Tensor predict_noise(const torch::Tensor& z_t, const torch::Tensor& t,
                              const torch::Tensor& context,
                              const AdapterSet* adapters = nullptr) const;

  torch::Tensor predict_noise(const torch::Tensor& z_t, int64_t t, const torch::Tensor& context,
                              const AdapterSet* adapters = nullptr) const;

  /// Number of forward passes since construction or the last reset.
  int64_t forward_count() const { return forward_count_.load(); }
  void reset_forward_count() const { forward_count_.store(0); }

  /// Upper bound for timesteps; predict_noise rejects t outside [1, max_t].
  void set_max_timestep(int64_t max_t) { max_t_ = max_t; }

 private:
  static LayerTable build_table(const DenoiserConfig& config);
  torch::Tensor attention(const WeightView& w, const std::string& name, const torch::Tensor& x,
                          const torch::Tensor& context) const;

  DenoiserConfig config_;
  LayerTable table_;
  WeightMap weights_;
  int64_t max_t_ = 0;
  mutable std::atomic<int64_t> forward_count_{0};
};

/// eps_neg + scale * (eps_cond - eps_neg). Both branches are evaluated in a
/// single batched forward pass.
torch::Tensor cfg_predict(const Denoiser& denoiser, const torch::Tensor& z_t,
                          const torch::Tensor& t, const torch::Tensor& cond,
                          const torch::Tensor& negative, double scale,
                          const AdapterSet* adapters = nullptr);

/// The guidance combination itself, exposed for direct checks.
torch::Tensor guidance_combine(const torch::Tensor& eps_cond, const torch::Tensor& eps_neg,
                               double scale);

}  // namespace osediff
