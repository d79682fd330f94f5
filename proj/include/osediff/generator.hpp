#pragma once

#include <torch/types.h>

#include <memory>
#include <string>
#include <vector>

#include "osediff/denoiser.hpp"
#include "osediff/lora.hpp"
#include "osediff/schedule.hpp"
#include "osediff/toyvae.hpp"

namespace osediff {

/// Tag vocabulary of the statistics-based stub extractor.
const std::vector<std::string>& tag_vocabulary();

/// Deterministic image-statistics tagger over `tag_vocabulary()` for a
/// [3, H, W] image in [-1, 1].
std::vector<std::string> stub_tags(const torch::Tensor& image);

/// Maps an LQ image to prompt tokens (the role of c_y = Y(x_L)).
class PromptExtractor {
 public:
  virtual ~PromptExtractor() = default;
  virtual std::string name() const = 0;
  virtual PromptEmbedding extract(const torch::Tensor& image, const TextEmbedder& embedder) const = 0;
};

class NullExtractor final : public PromptExtractor {
 public:
  std::string name() const override { return "null"; }
  PromptEmbedding extract(const torch::Tensor& image, const TextEmbedder& embedder) const override;
};

class TagStubExtractor final : public PromptExtractor {
 public:
  std::string name() const override { return "tag-stub"; }
  PromptEmbedding extract(const torch::Tensor& image, const TextEmbedder& embedder) const override;
};

/// Runs `<exe> <png-path>` and embeds the comma-separated tags it prints.
/// A non-zero exit status raises ExtractorError.
class CommandExtractor final : public PromptExtractor {
 public:
  explicit CommandExtractor(std::string executable) : exe_(std::move(executable)) {}
  std::string name() const override { return "cmd:" + exe_; }
  PromptEmbedding extract(const torch::Tensor& image, const TextEmbedder& embedder) const override;

 private:
  std::string exe_;
};

/// "null", "tag-stub", or "cmd:<executable>".
std::unique_ptr<PromptExtractor> make_extractor(const std::string& spec);

/// Everything the one-step student needs at inference. Pointers are
/// non-owning; `adapters` may be null (teacher composition).
struct GeneratorBundle {
  const ToyVae* vae = nullptr;
  const Denoiser* denoiser = nullptr;
  NoiseSchedule schedule;
  const AdapterSet* adapters = nullptr;
  const TextEmbedder* embedder = nullptr;
  const PromptExtractor* extractor = nullptr;
  /// Feed alpha_T * z_L (the signal part of the t = T marginal) instead of
  /// z_L. Off by default.
  bool precondition = false;
};

/// Prompt tokens [B, tokens, dim] for a batch of images.
torch::Tensor extract_prompts(const torch::Tensor& x_L, const GeneratorBundle& g);

/// z_hat_H = (z_L - beta_T * eps_theta(z_L; T, c)) / alpha_T.
torch::Tensor latent_map(const torch::Tensor& z_L, const torch::Tensor& context,
                         const GeneratorBundle& g);

/// z_hat_H from an image batch, keeping the graph for training.
torch::Tensor generate_latent(const torch::Tensor& x_L, const torch::Tensor& context,
                              const GeneratorBundle& g);

/// x_hat_H = D(F(E(x_L); Y(x_L))) for [3,H,W] or [B,3,H,W] input (already
/// upsampled to the target size). One denoiser forward per call.
torch::Tensor restore(const torch::Tensor& x_L, const GeneratorBundle& g);

/// Same, with caller-provided prompt tokens.
torch::Tensor restore_with_prompt(const torch::Tensor& x_L, const torch::Tensor& context,
                                  const GeneratorBundle& g);

}  // namespace osediff
