#include "osediff/layers.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include <cmath>

#include "osediff/errors.hpp"
#include "osediff/lora.hpp"

namespace osediff {

void LayerTable::linear(const std::string& name, int64_t in, int64_t out, bool adaptable) {
  specs_.push_back({name, LayerKind::kLinear, in, out, 1, adaptable});
}

void LayerTable::conv(const std::string& name, int64_t in, int64_t out, int64_t kernel,
                      bool adaptable) {
  specs_.push_back({name, LayerKind::kConv, in, out, kernel, adaptable});
}

void LayerTable::norm(const std::string& name, int64_t channels) {
  specs_.push_back({name, LayerKind::kNorm, channels, channels, 1, false});
}

std::vector<LayerSpec> LayerTable::adaptable() const {
  std::vector<LayerSpec> out;
  for (const auto& s : specs_) {
    if (s.adaptable) {
      out.push_back(s);
    }
  }
  return out;
}

const LayerSpec& LayerTable::at(const std::string& name) const {
  for (const auto& s : specs_) {
    if (s.name == name) {
      return s;
    }
  }
  throw ConfigError("no layer named '" + name + "'");
}

WeightMap LayerTable::initialize(at::Generator& gen, torch::ScalarType dtype) const {
  torch::NoGradGuard no_grad;
  WeightMap w;
  const auto opts = torch::TensorOptions().dtype(dtype);
  for (const auto& s : specs_) {
    if (s.kind == LayerKind::kNorm) {
      w[s.name + ".weight"] = torch::ones({s.out_features}, opts);
      w[s.name + ".bias"] = torch::zeros({s.out_features}, opts);
      continue;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.d_in()));
    std::vector<int64_t> shape = {s.out_features, s.in_features};
    if (s.kind == LayerKind::kConv) {
      shape = {s.out_features, s.in_features, s.kernel, s.kernel};
    }
    auto weight = torch::empty(shape, opts);
    weight.uniform_(-bound, bound, gen);
    auto bias = torch::empty({s.out_features}, opts);
    bias.uniform_(-bound, bound, gen);
    w[s.name + ".weight"] = weight;
    w[s.name + ".bias"] = bias;
  }
  return w;
}

const torch::Tensor& WeightView::get(const std::string& name) const {
  auto it = base->find(name);
  if (it == base->end()) {
    throw ConfigError("missing weight '" + name + "'");
  }
  return it->second;
}

namespace ops {

torch::Tensor linear(const WeightView& w, const std::string& name, const torch::Tensor& x) {
  auto y = torch::nn::functional::linear(x, w.get(name + ".weight"), w.get(name + ".bias"));
  if (w.adapters != nullptr) {
    if (const auto* lora = w.adapters->find(name)) {
      auto low = torch::nn::functional::linear(x, lora->down);
      y = y + lora->scale * torch::nn::functional::linear(low, lora->up);
    }
  }
  return y;
}

torch::Tensor conv2d(const WeightView& w, const std::string& name, const torch::Tensor& x,
                     int64_t stride) {
  const auto& weight = w.get(name + ".weight");
  const int64_t k = weight.size(2);
  const int64_t pad = k / 2;
  auto y = torch::conv2d(x, weight, w.get(name + ".bias"), {stride, stride}, {pad, pad});
  if (w.adapters != nullptr) {
    if (const auto* lora = w.adapters->find(name)) {
      auto down = lora->down.view({lora->rank, lora->in_features, k, k});
      auto up = lora->up.view({lora->out_features, lora->rank, 1, 1});
      auto low = torch::conv2d(x, down, {}, {stride, stride}, {pad, pad});
      y = y + lora->scale * torch::conv2d(low, up);
    }
  }
  return y;
}

torch::Tensor group_norm(const WeightView& w, const std::string& name, const torch::Tensor& x,
                         int64_t groups) {
  return torch::group_norm(x, groups, w.get(name + ".weight"), w.get(name + ".bias"), 1e-5);
}

int64_t norm_groups(int64_t channels, int64_t preferred) {
  for (int64_t g = std::min(preferred, channels); g > 1; --g) {
    if (channels % g == 0) {
      return g;
    }
  }
  return 1;
}

}  // namespace ops

WeightMap clone_weights(const WeightMap& weights) {
  WeightMap out;
  for (const auto& [name, t] : weights) {
    out[name] = t.detach().clone();
  }
  return out;
}

WeightMap cast_weights(const WeightMap& weights, torch::ScalarType dtype) {
  WeightMap out;
  for (const auto& [name, t] : weights) {
    out[name] = t.detach().to(dtype).clone();
  }
  return out;
}

bool weights_equal(const WeightMap& a, const WeightMap& b) {
  if (a.size() != b.size()) {
    return false;
  }
  for (const auto& [name, t] : a) {
    auto it = b.find(name);
    if (it == b.end() || !torch::equal(t, it->second)) {
      return false;
    }
  }
  return true;
}

at::Generator make_generator(uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b) {
  auto mix = [](uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ b) & 0x7fffffffffffffffULL;
}

}  // namespace osediff
