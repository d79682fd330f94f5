#include "osediff/lora.hpp"

#include <torch/torch.h>

#include <algorithm>

#include "osediff/errors.hpp"

namespace osediff {

torch::Tensor LoraLayer::delta() const {
  auto d = scale * torch::matmul(up, down);
  if (kind == LayerKind::kConv) {
    return d.view({out_features, in_features, kernel, kernel});
  }
  return d;
}

std::string to_string(AdapterOwner owner) {
  return owner == AdapterOwner::kGenerator ? "generator-theta" : "regularizer-phi-prime";
}

void AdapterSet::insert(LoraLayer layer) {
  if (layers_.count(layer.target) != 0) {
    throw ConfigError("adapter target '" + layer.target + "' injected twice");
  }
  auto key = layer.target;
  layers_.emplace(std::move(key), std::move(layer));
}

const LoraLayer* AdapterSet::find(const std::string& target) const {
  auto it = layers_.find(target);
  return it == layers_.end() ? nullptr : &it->second;
}

std::vector<torch::Tensor> AdapterSet::parameters() const {
  std::vector<torch::Tensor> out;
  out.reserve(layers_.size() * 2);
  for (const auto& [name, l] : layers_) {
    out.push_back(l.down);
    out.push_back(l.up);
  }
  return out;
}

int64_t AdapterSet::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, l] : layers_) {
    n += l.parameter_count();
  }
  return n;
}

WeightMap AdapterSet::named_tensors(const std::string& prefix) const {
  WeightMap out;
  for (const auto& [name, l] : layers_) {
    out[prefix + name + ".down"] = l.down;
    out[prefix + name + ".up"] = l.up;
  }
  return out;
}

void AdapterSet::load_named(const WeightMap& arrays, const std::string& prefix) {
  torch::NoGradGuard no_grad;
  for (auto& [name, l] : layers_) {
    for (auto* slot : {&l.down, &l.up}) {
      const auto key = prefix + name + (slot == &l.down ? ".down" : ".up");
      auto it = arrays.find(key);
      if (it == arrays.end()) {
        throw ConfigError("adapter array '" + key + "' missing");
      }
      if (it->second.sizes() != slot->sizes()) {
        throw DimensionError("adapter array '" + key + "' has the wrong shape");
      }
      slot->copy_(it->second);
    }
  }
}

AdapterSet AdapterSet::clone() const {
  AdapterSet out(owner_);
  for (const auto& [name, l] : layers_) {
    LoraLayer copy = l;
    copy.down = l.down.detach().clone().set_requires_grad(l.down.requires_grad());
    copy.up = l.up.detach().clone().set_requires_grad(l.up.requires_grad());
    out.insert(std::move(copy));
  }
  return out;
}

void AdapterSet::set_requires_grad(bool flag) {
  for (auto& [name, l] : layers_) {
    l.down.set_requires_grad(flag);
    l.up.set_requires_grad(flag);
  }
}

void AdapterSet::zero_grad() {
  for (auto& [name, l] : layers_) {
    for (auto* t : {&l.down, &l.up}) {
      if (t->grad().defined()) {
        t->mutable_grad().zero_();
      }
    }
  }
}

void AdapterSet::reset_up() {
  torch::NoGradGuard no_grad;
  for (auto& [name, l] : layers_) {
    l.up.zero_();
  }
}

namespace {

std::vector<LayerSpec> select_targets(const std::vector<LayerSpec>& layers,
                                      const std::vector<std::string>& targets) {
  std::vector<LayerSpec> adaptable;
  for (const auto& s : layers) {
    if (s.adaptable) {
      adaptable.push_back(s);
    }
  }
  if (targets.size() == 1 && targets.front() == "all") {
    return adaptable;
  }
  std::vector<LayerSpec> chosen;
  auto already = [&](const std::string& name) {
    return std::any_of(chosen.begin(), chosen.end(),
                       [&](const LayerSpec& s) { return s.name == name; });
  };
  for (const auto& pattern : targets) {
    const bool is_prefix = !pattern.empty() && pattern.back() == '*';
    const auto stem = is_prefix ? pattern.substr(0, pattern.size() - 1) : pattern;
    bool matched = false;
    for (const auto& s : adaptable) {
      const bool hit = is_prefix ? s.name.rfind(stem, 0) == 0 : s.name == stem;
      if (!hit) {
        continue;
      }
      matched = true;
      if (!is_prefix && already(s.name)) {
        throw ConfigError("adapter target '" + s.name + "' listed twice");
      }
      if (!already(s.name)) {
        chosen.push_back(s);
      }
    }
    if (!matched) {
      throw ConfigError("unknown adapter target '" + pattern + "'");
    }
  }
  return chosen;
}

}  // namespace

AdapterSet inject(const std::vector<LayerSpec>& layers, const WeightMap& base,
                  const std::vector<std::string>& targets, int64_t rank, double scale,
                  AdapterOwner owner, at::Generator& gen) {
  if (rank < 1) {
    throw ConfigError("adapter rank must be >= 1");
  }
  AdapterSet set(owner);
  for (const auto& spec : select_targets(layers, targets)) {
    auto it = base.find(spec.name + ".weight");
    if (it == base.end()) {
      throw ConfigError("adapter target '" + spec.name + "' has no base weight");
    }
    if (rank > std::min(spec.d_in(), spec.d_out())) {
      throw ConfigError("adapter rank " + std::to_string(rank) + " exceeds min(d_in, d_out) of '" +
                        spec.name + "'");
    }
    const auto opts = torch::TensorOptions().dtype(it->second.scalar_type());
    LoraLayer l;
    l.target = spec.name;
    l.kind = spec.kind;
    l.in_features = spec.in_features;
    l.out_features = spec.out_features;
    l.kernel = spec.kernel;
    l.rank = rank;
    l.scale = scale;
    {
      torch::NoGradGuard no_grad;
      l.down = torch::empty({rank, spec.d_in()}, opts);
      l.down.normal_(0.0, 1.0 / static_cast<double>(rank), gen);
    }
    l.up = torch::zeros({spec.d_out(), rank}, opts);
    l.down.set_requires_grad(true);
    l.up.set_requires_grad(true);
    set.insert(std::move(l));
  }
  return set;
}

AdapterSet select_adapters(const AdapterSet& set, const std::string& prefix) {
  AdapterSet out(set.owner());
  for (const auto& [name, l] : set) {
    if (name.rfind(prefix, 0) == 0) {
      out.insert(l);
    }
  }
  return out;
}

WeightMap merge(const AdapterSet& adapters, const WeightMap& base) {
  torch::NoGradGuard no_grad;
  WeightMap out = clone_weights(base);
  for (const auto& [name, l] : adapters) {
    auto it = out.find(name + ".weight");
    if (it == out.end()) {
      throw ConfigError("cannot merge adapter '" + name + "': base has no such layer");
    }
    auto delta = l.delta().to(it->second.scalar_type());
    if (delta.sizes() != it->second.sizes()) {
      throw ConfigError("cannot merge adapter '" + name + "': base weight shape differs");
    }
    it->second = it->second + delta;
  }
  return out;
}

}  // namespace osediff
