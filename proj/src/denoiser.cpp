#include "osediff/denoiser.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <cctype>
#include <cmath>

#include "blocks.hpp"
#include "osediff/errors.hpp"

namespace osediff {

namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Text embedding

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string normalise_phrase(const std::string& raw) {
  std::string s;
  s.reserve(raw.size());
  for (unsigned char c : raw) {
    s.push_back(static_cast<char>(std::tolower(c)));
  }
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) {
    return {};
  }
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_phrases(const std::string& text) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find_first_of(",\n", start);
    if (end == std::string::npos) {
      end = text.size();
    }
    auto phrase = normalise_phrase(text.substr(start, end - start));
    if (!phrase.empty()) {
      out.push_back(std::move(phrase));
    }
    start = end + 1;
  }
  return out;
}

}  // namespace

TextEmbedder::TextEmbedder(int64_t tokens, int64_t dim, uint64_t seed)
    : tokens_(tokens), dim_(dim), seed_(seed) {
  if (tokens < 1 || dim < 1) {
    throw ConfigError("text embedder needs tokens >= 1 and dim >= 1");
  }
}

torch::Tensor TextEmbedder::phrase_vector(const std::string& phrase) const {
  auto gen = make_generator(derive_seed(seed_, fnv1a(normalise_phrase(phrase))));
  auto v = torch::empty({dim_}, torch::kFloat);
  v.normal_(0.0, 1.0, gen);
  return v;
}

PromptEmbedding TextEmbedder::encode(const std::vector<std::string>& phrases,
                                     PromptSource source) const {
  std::vector<std::string> kept;
  for (const auto& p : phrases) {
    auto n = normalise_phrase(p);
    if (!n.empty()) {
      kept.push_back(std::move(n));
    }
  }
  auto out = torch::zeros({tokens_, dim_}, torch::kFloat);
  std::vector<int64_t> counts(static_cast<size_t>(tokens_), 0);
  for (size_t i = 0; i < kept.size(); ++i) {
    const auto slot = static_cast<int64_t>(i) % tokens_;
    out[slot] += phrase_vector(kept[i]);
    ++counts[static_cast<size_t>(slot)];
  }
  const auto empty = phrase_vector("");
  for (int64_t s = 0; s < tokens_; ++s) {
    const auto n = counts[static_cast<size_t>(s)];
    if (n == 0) {
      out[s] = empty;
    } else if (n > 1) {
      out[s] /= static_cast<double>(n);
    }
  }
  return {out, kept.empty() ? PromptSource::kNull : source};
}

PromptEmbedding TextEmbedder::encode_text(const std::string& comma_separated,
                                          PromptSource source) const {
  return encode(split_phrases(comma_separated), source);
}

PromptEmbedding TextEmbedder::null_embedding() const { return encode({}, PromptSource::kNull); }

PromptEmbedding TextEmbedder::negative_embedding(const std::string& text) const {
  auto e = encode_text(text, PromptSource::kNegative);
  e.source = PromptSource::kNegative;
  return e;
}

torch::Tensor stack_prompts(const std::vector<PromptEmbedding>& prompts) {
  std::vector<torch::Tensor> v;
  v.reserve(prompts.size());
  for (const auto& p : prompts) {
    v.push_back(p.vectors);
  }
  return torch::stack(v);
}

torch::Tensor repeat_prompt(const PromptEmbedding& prompt, int64_t batch) {
  return prompt.vectors.unsqueeze(0).expand({batch, -1, -1}).contiguous();
}

// ---------------------------------------------------------------------------
// UNet

namespace {

void declare_attention(LayerTable& t, const std::string& name, int64_t channels,
                       int64_t text_dim) {
  t.norm(name + ".norm", channels);
  t.linear(name + ".q", channels, channels, true);
  t.linear(name + ".k", text_dim, channels, true);
  t.linear(name + ".v", text_dim, channels, true);
  t.linear(name + ".out", channels, channels, true);
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim, torch::ScalarType dtype) {
  const int64_t half = dim / 2;
  auto idx = torch::arange(half, torch::TensorOptions().dtype(torch::kDouble));
  auto freqs = torch::exp(-std::log(10000.0) * idx / static_cast<double>(half));
  auto args = t.to(torch::kDouble).view({-1, 1}) * freqs.view({1, -1});
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  if (dim % 2 == 1) {
    emb = torch::cat({emb, torch::zeros({emb.size(0), 1}, emb.options())}, 1);
  }
  return emb.to(dtype);
}

}  // namespace

LayerTable Denoiser::build_table(const DenoiserConfig& c) {
  if (c.width < 4 || c.width % c.heads != 0 || c.latent_channels < 1 || c.text_dim < 1) {
    throw ConfigError("invalid denoiser config (width must be a positive multiple of heads)");
  }
  const int64_t u = c.width;
  LayerTable t;
  t.linear("unet.time1", u, 4 * u, false);
  t.linear("unet.time2", 4 * u, 4 * u, false);
  t.conv("unet.conv_in", c.latent_channels, u, 3, true);
  blocks::declare_res(t, "unet.down0.res", u, u, 4 * u, true);
  declare_attention(t, "unet.down0.attn", u, c.text_dim);
  t.conv("unet.down0.downsample", u, 2 * u, 3, true);
  blocks::declare_res(t, "unet.down1.res", 2 * u, 2 * u, 4 * u, true);
  declare_attention(t, "unet.down1.attn", 2 * u, c.text_dim);
  blocks::declare_res(t, "unet.mid.res", 2 * u, 2 * u, 4 * u, true);
  blocks::declare_res(t, "unet.up1.res", 4 * u, 2 * u, 4 * u, true);
  declare_attention(t, "unet.up1.attn", 2 * u, c.text_dim);
  t.conv("unet.up1.upsample", 2 * u, u, 3, true);
  blocks::declare_res(t, "unet.up0.res", 2 * u, u, 4 * u, true);
  declare_attention(t, "unet.up0.attn", u, c.text_dim);
  t.norm("unet.norm_out", u);
  t.conv("unet.conv_out", u, c.latent_channels, 3, true);
  return t;
}

Denoiser::Denoiser(DenoiserConfig config, WeightMap weights)
    : config_(config), table_(build_table(config)), weights_(std::move(weights)) {
  for (const auto& s : table_.specs()) {
    if (weights_.count(s.name + ".weight") == 0) {
      throw ConfigError("denoiser weights missing '" + s.name + ".weight'");
    }
  }
}

Denoiser::Denoiser(const Denoiser& other)
    : config_(other.config_),
      table_(other.table_),
      weights_(other.weights_),
      max_t_(other.max_t_),
      forward_count_(0) {}

Denoiser& Denoiser::operator=(const Denoiser& other) {
  if (this != &other) {
    config_ = other.config_;
    table_ = other.table_;
    weights_ = other.weights_;
    max_t_ = other.max_t_;
    forward_count_.store(0);
  }
  return *this;
}

Denoiser Denoiser::create(const DenoiserConfig& config, uint64_t seed, torch::ScalarType dtype) {
  auto gen = make_generator(seed);
  return Denoiser(config, build_table(config).initialize(gen, dtype));
}

torch::Tensor Denoiser::attention(const WeightView& w, const std::string& name,
                                  const torch::Tensor& x, const torch::Tensor& context) const {
  const int64_t b = x.size(0);
  const int64_t c = x.size(1);
  const int64_t hgt = x.size(2);
  const int64_t wid = x.size(3);
  const int64_t heads = config_.heads;
  const int64_t hd = c / heads;
  auto h = ops::group_norm(w, name + ".norm", x, ops::norm_groups(c));
  h = h.flatten(2).transpose(1, 2);  // [B, HW, C]
  auto q = ops::linear(w, name + ".q", h).view({b, -1, heads, hd}).transpose(1, 2);
  auto k = ops::linear(w, name + ".k", context).view({b, -1, heads, hd}).transpose(1, 2);
  auto v = ops::linear(w, name + ".v", context).view({b, -1, heads, hd}).transpose(1, 2);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-1, -2)) / std::sqrt(double(hd)), -1);
  auto o = torch::matmul(attn, v).transpose(1, 2).reshape({b, -1, c});
  o = ops::linear(w, name + ".out", o).transpose(1, 2).reshape({b, c, hgt, wid});
  return x + o;
}

torch::Tensor Denoiser::predict_noise(const torch::Tensor& z_t, const torch::Tensor& t_in,
                                      const torch::Tensor& context_in,
                                      const AdapterSet* adapters) const {
  if (z_t.dim() != 4 || z_t.size(1) != config_.latent_channels) {
    throw DimensionError("denoiser expects [B," + std::to_string(config_.latent_channels) +
                         ",h,w] latents");
  }
  if (z_t.size(2) % 2 != 0 || z_t.size(3) % 2 != 0) {
    throw DimensionError("denoiser latent spatial size must be even");
  }
  const int64_t b = z_t.size(0);
  auto t = t_in.to(torch::kLong).reshape({-1});
  if (t.numel() == 1 && b > 1) {
    t = t.expand({b});
  }
  if (t.numel() != b) {
    throw DimensionError("denoiser needs one timestep per sample");
  }
  if (t.numel() > 0) {
    const auto lo = t.min().item<int64_t>();
    const auto hi = t.max().item<int64_t>();
    if (lo < 1 || (max_t_ > 0 && hi > max_t_)) {
      throw RangeError("denoiser timestep outside [1, " + std::to_string(max_t_) + "]");
    }
  }
  auto context = context_in.dim() == 2 ? context_in.unsqueeze(0).expand({b, -1, -1}) : context_in;
  if (context.dim() != 3 || context.size(0) != b || context.size(2) != config_.text_dim) {
    throw DimensionError("prompt context must be [B, tokens, " + std::to_string(config_.text_dim) +
                         "]");
  }
  context = context.to(z_t.scalar_type());
  forward_count_.fetch_add(1);

  const WeightView w{&weights_, adapters};
  const int64_t u = config_.width;
  auto temb = timestep_embedding(t, u, z_t.scalar_type());
  temb = ops::linear(w, "unet.time2", F::silu(ops::linear(w, "unet.time1", temb)));

  auto h0 = ops::conv2d(w, "unet.conv_in", z_t);
  auto h1 = blocks::res(w, "unet.down0.res", h0, temb);
  h1 = attention(w, "unet.down0.attn", h1, context);
  auto h2 = ops::conv2d(w, "unet.down0.downsample", h1, 2);
  h2 = blocks::res(w, "unet.down1.res", h2, temb);
  h2 = attention(w, "unet.down1.attn", h2, context);
  auto h = blocks::res(w, "unet.mid.res", h2, temb);
  h = blocks::res(w, "unet.up1.res", torch::cat({h, h2}, 1), temb);
  h = attention(w, "unet.up1.attn", h, context);
  h = F::interpolate(h, F::InterpolateFuncOptions()
                            .scale_factor(std::vector<double>{2.0, 2.0})
                            .mode(torch::kNearest));
  h = ops::conv2d(w, "unet.up1.upsample", h);
  h = blocks::res(w, "unet.up0.res", torch::cat({h, h1}, 1), temb);
  h = attention(w, "unet.up0.attn", h, context);
  h = F::silu(ops::group_norm(w, "unet.norm_out", h, ops::norm_groups(u)));
  return ops::conv2d(w, "unet.conv_out", h);
}

torch::Tensor Denoiser::predict_noise(const torch::Tensor& z_t, int64_t t,
                                      const torch::Tensor& context,
                                      const AdapterSet* adapters) const {
  return predict_noise(z_t, torch::full({1}, t, torch::kLong), context, adapters);
}

torch::Tensor guidance_combine(const torch::Tensor& eps_cond, const torch::Tensor& eps_neg,
                               double scale) {
  if (scale < 0.0) {
    throw ConfigError("guidance scale must be >= 0");
  }
  if (scale == 1.0) {
    return eps_cond;
  }
  return eps_neg + scale * (eps_cond - eps_neg);
}

torch::Tensor cfg_predict(const Denoiser& denoiser, const torch::Tensor& z_t,
                          const torch::Tensor& t, const torch::Tensor& cond,
                          const torch::Tensor& negative, double scale,
                          const AdapterSet* adapters) {
  if (scale < 0.0) {
    throw ConfigError("guidance scale must be >= 0");
  }
  const int64_t b = z_t.size(0);
  auto batch_ctx = [&](const torch::Tensor& c) {
    return c.dim() == 2 ? c.unsqueeze(0).expand({b, -1, -1}) : c;
  };
  auto c_cond = batch_ctx(cond);
  auto c_neg = batch_ctx(negative);
  if (scale == 1.0) {
    return denoiser.predict_noise(z_t, t, c_cond, adapters);
  }
  if (torch::equal(c_cond, c_neg)) {
    auto eps = denoiser.predict_noise(z_t, t, c_cond, adapters);
    return guidance_combine(eps, eps, scale);
  }
  auto tt = t.to(torch::kLong).reshape({-1});
  if (tt.numel() == 1) {
    tt = tt.expand({b});
  }
  auto eps = denoiser.predict_noise(torch::cat({z_t, z_t}), torch::cat({tt, tt}),
                                    torch::cat({c_cond, c_neg}), adapters);
  auto parts = eps.chunk(2, 0);
  return guidance_combine(parts[0], parts[1], scale);
}

}  // namespace osediff
