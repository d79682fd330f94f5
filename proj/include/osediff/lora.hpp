#pragma once

#include <ATen/core/Generator.h>
#include <torch/types.h>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "osediff/layers.hpp"

namespace osediff {

/// Low-rank delta on one channel-mixing map: W' = W + scale * up * down, with
/// `down` shaped [rank, d_in] and `up` shaped [d_out, rank]. Convolutions are
/// handled by viewing the kernel as [d_out, in * k * k].
struct LoraLayer {
  std::string target;
  LayerKind kind = LayerKind::kLinear;
  int64_t in_features = 0;
  int64_t out_features = 0;
  int64_t kernel = 1;
  int64_t rank = 0;
  double scale = 1.0;
  torch::Tensor down;
  torch::Tensor up;

  int64_t parameter_count() const { return rank * (in_features * kernel * kernel + out_features); }

  /// scale * up @ down reshaped to the base weight's shape.
  torch::Tensor delta() const;
};

enum class AdapterOwner { kGenerator, kRegularizer };

std::string to_string(AdapterOwner owner);

/// Trainable low-rank parameters attached to one or more base networks.
/// Each target appears at most once.
class AdapterSet {
 public:
  explicit AdapterSet(AdapterOwner owner = AdapterOwner::kGenerator) : owner_(owner) {}

  AdapterOwner owner() const { return owner_; }

  void insert(LoraLayer layer);
  const LoraLayer* find(const std::string& target) const;
  bool contains(const std::string& target) const { return layers_.count(target) != 0; }

  size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }
  auto begin() const { return layers_.begin(); }
  auto end() const { return layers_.end(); }

  /// `down`/`up` tensors in target order.
  std::vector<torch::Tensor> parameters() const;
  int64_t parameter_count() const;

  /// Arrays named `<prefix><target>.down` and `<prefix><target>.up`.
  WeightMap named_tensors(const std::string& prefix = "") const;

  /// Overwrites adapter values from arrays produced by `named_tensors`.
  void load_named(const WeightMap& arrays, const std::string& prefix = "");

  /// Deep copy with fresh leaf tensors.
  AdapterSet clone() const;

  void set_requires_grad(bool flag);
  void zero_grad();

  /// Sets every `up` matrix to zero, restoring the base network exactly.
  void reset_up();

 private:
  AdapterOwner owner_;
  std::map<std::string, LoraLayer> layers_;
};

/// Builds adapters for every requested target. Targets are exact layer names
/// or prefixes ending in '*'; the single entry "all" selects every adaptable
/// layer. `up` starts at zero and `down` is drawn from N(0, 1/rank^2).
AdapterSet inject(const std::vector<LayerSpec>& layers, const WeightMap& base,
                  const std::vector<std::string>& targets, int64_t rank, double scale,
                  AdapterOwner owner, at::Generator& gen);

/// Layers of `set` whose target starts with `prefix` (tensors shared).
AdapterSet select_adapters(const AdapterSet& set, const std::string& prefix);

/// Fuses adapters into a copy of the base weights.
WeightMap merge(const AdapterSet& adapters, const WeightMap& base);

}  // namespace osediff
