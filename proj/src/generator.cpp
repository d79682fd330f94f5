#include "osediff/generator.hpp"

#include <sys/wait.h>
#include <torch/torch.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "osediff/errors.hpp"
#include "osediff/image.hpp"

namespace osediff {

const std::vector<std::string>& tag_vocabulary() {
  static const std::vector<std::string> vocab = {
      "dark",     "bright",     "warm",     "cool",    "high-contrast", "low-contrast", "smooth",
      "striped",  "checkered",  "spotted",  "textured", "vertical",     "horizontal",   "diagonal"};
  return vocab;
}

namespace {

struct TagStats {
  double mean = 0;
  double stddev = 0;
  double warmth = 0;
  double edge = 0;
  double coherence = 0;
  double axis = 0;
  double angle = 0;
};

TagStats tag_stats(const torch::Tensor& image) {
  TagStats s;
  auto x = image.detach().to(torch::kDouble).clamp(-1.0, 1.0);
  auto y = (luma(x) - 16.0) / 219.0;
  s.mean = y.mean().item<double>();
  s.stddev = y.std(/*unbiased=*/false).item<double>();
  s.warmth = ((x[0] - x[2]) * 0.5).mean().item<double>();
  const int64_t h = y.size(0);
  const int64_t w = y.size(1);
  auto gx = (y.slice(1, 1, w) - y.slice(1, 0, w - 1)).slice(0, 0, h - 1);
  auto gy = (y.slice(0, 1, h) - y.slice(0, 0, h - 1)).slice(1, 0, w - 1);
  const double jxx = (gx * gx).mean().item<double>();
  const double jyy = (gy * gy).mean().item<double>();
  const double jxy = (gx * gy).mean().item<double>();
  const double energy = jxx + jyy;
  s.edge = (gx * gx + gy * gy).sqrt().mean().item<double>() / (s.stddev + 1e-6);
  if (energy > 1e-12) {
    s.coherence = std::sqrt((jxx - jyy) * (jxx - jyy) + 4.0 * jxy * jxy) / energy;
    s.axis = (gx * gy).abs().mean().item<double>() / energy;
    s.angle = 0.5 * std::atan2(2.0 * jxy, jxx - jyy);
  }
  return s;
}

}  // namespace

std::vector<std::string> stub_tags(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3 || image.size(1) < 2 || image.size(2) < 2) {
    throw DimensionError("tag extraction expects a [3,H,W] image with H,W >= 2");
  }
  const auto s = tag_stats(image);
  std::vector<std::string> tags;
  if (s.mean < 0.3) {
    tags.emplace_back("dark");
  } else if (s.mean > 0.7) {
    tags.emplace_back("bright");
  }
  if (s.warmth > 0.15) {
    tags.emplace_back("warm");
  } else if (s.warmth < -0.15) {
    tags.emplace_back("cool");
  }
  if (s.stddev < 0.03) {
    tags.emplace_back("low-contrast");
    return tags;
  }
  if (s.stddev > 0.25) {
    tags.emplace_back("high-contrast");
  }
  constexpr double kPi = 3.14159265358979323846;
  if (s.edge < 0.25) {
    tags.emplace_back("smooth");
  } else if (s.coherence > 0.5) {
    tags.emplace_back("striped");
    const double a = std::abs(s.angle);
    if (a < kPi / 8) {
      tags.emplace_back("vertical");
    } else if (a > 3 * kPi / 8) {
      tags.emplace_back("horizontal");
    } else {
      tags.emplace_back("diagonal");
    }
  } else if (s.axis < 0.12) {
    tags.emplace_back("checkered");
  } else if (s.edge > 0.6) {
    tags.emplace_back("textured");
  } else {
    tags.emplace_back("spotted");
  }
  return tags;
}

PromptEmbedding NullExtractor::extract(const torch::Tensor&, const TextEmbedder& e) const {
  return e.null_embedding();
}

PromptEmbedding TagStubExtractor::extract(const torch::Tensor& image,
                                          const TextEmbedder& e) const {
  auto emb = e.encode(stub_tags(image), PromptSource::kTagStub);
  emb.source = PromptSource::kTagStub;
  return emb;
}

PromptEmbedding CommandExtractor::extract(const torch::Tensor& image,
                                          const TextEmbedder& e) const {
  static std::atomic<uint64_t> counter{0};
  const auto png = std::filesystem::temp_directory_path() /
                   ("osediff-prompt-" + std::to_string(::getpid()) + "-" +
                    std::to_string(counter.fetch_add(1)) + ".png");
  save_png(png, image);
  const std::string cmd = "'" + exe_ + "' '" + png.string() + "'";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) {
    std::filesystem::remove(png);
    throw ExtractorError("cannot start prompt extractor '" + exe_ + "'");
  }
  std::string out;
  std::array<char, 4096> buf{};
  size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) {
    out.append(buf.data(), n);
  }
  const int status = ::pclose(pipe);
  std::filesystem::remove(png);
  if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    throw ExtractorError("prompt extractor '" + exe_ + "' failed with status " +
                         std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : status));
  }
  auto emb = e.encode_text(out, PromptSource::kExternal);
  emb.source = PromptSource::kExternal;
  return emb;
}

std::unique_ptr<PromptExtractor> make_extractor(const std::string& spec) {
  if (spec == "null") {
    return std::make_unique<NullExtractor>();
  }
  if (spec == "tag-stub") {
    return std::make_unique<TagStubExtractor>();
  }
  if (spec.rfind("cmd:", 0) == 0 && spec.size() > 4) {
    return std::make_unique<CommandExtractor>(spec.substr(4));
  }
  throw ConfigError("unknown prompt extractor '" + spec + "' (null, tag-stub, cmd:<exe>)");
}

namespace {

void check_bundle(const GeneratorBundle& g) {
  if (g.vae == nullptr || g.denoiser == nullptr || g.embedder == nullptr ||
      g.extractor == nullptr || g.schedule.T < 1) {
    throw ConfigError("generator bundle is incomplete");
  }
}

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

}  // namespace

torch::Tensor extract_prompts(const torch::Tensor& x_L, const GeneratorBundle& g) {
  check_bundle(g);
  auto x = as_batch(x_L);
  std::vector<PromptEmbedding> prompts;
  prompts.reserve(static_cast<size_t>(x.size(0)));
  for (int64_t i = 0; i < x.size(0); ++i) {
    prompts.push_back(g.extractor->extract(x[i], *g.embedder));
  }
  return stack_prompts(prompts);
}

torch::Tensor latent_map(const torch::Tensor& z_L, const torch::Tensor& context,
                         const GeneratorBundle& g) {
  if (g.denoiser == nullptr) {
    throw ConfigError("generator bundle has no denoiser");
  }
  const int64_t T = g.schedule.T;
  auto z = z_L;
  if (g.precondition) {
    z = z * g.schedule.alpha_at(T);
  }
  auto eps = g.denoiser->predict_noise(z, T, context, g.adapters);
  return one_step_denoise(z, eps, T, g.schedule);
}

torch::Tensor generate_latent(const torch::Tensor& x_L, const torch::Tensor& context,
                              const GeneratorBundle& g) {
  check_bundle(g);
  auto z_L = g.vae->encode(as_batch(x_L), g.adapters);
  return latent_map(z_L, context, g);
}

torch::Tensor restore_with_prompt(const torch::Tensor& x_L, const torch::Tensor& context,
                                  const GeneratorBundle& g) {
  torch::NoGradGuard no_grad;
  auto out = g.vae->decode(generate_latent(x_L, context, g));
  return x_L.dim() == 3 ? out.squeeze(0) : out;
}

torch::Tensor restore(const torch::Tensor& x_L, const GeneratorBundle& g) {
  return restore_with_prompt(x_L, extract_prompts(x_L, g), g);
}

}  // namespace osediff
