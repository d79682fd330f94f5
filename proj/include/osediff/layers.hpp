#pragma once

#include <ATen/core/Generator.h>
#include <torch/types.h>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace osediff {

/// Named parameter tensors of one network. Ordered so that iteration,
/// serialization and optimizer registration are deterministic.
using WeightMap = std::map<std::string, torch::Tensor>;

class AdapterSet;

enum class LayerKind { kLinear, kConv, kNorm };

/// Declaration of one parametrized layer. Linear and conv layers own
/// `<name>.weight` and `<name>.bias`; norm layers own the affine pair.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::kLinear;
  int64_t in_features = 0;
  int64_t out_features = 0;
  int64_t kernel = 1;
  bool adaptable = false;

  /// Width of the flattened input seen by the channel-mixing map.
  int64_t d_in() const { return in_features * kernel * kernel; }
  int64_t d_out() const { return out_features; }
};

/// Collects layer declarations for a network and builds its initial weights.
class LayerTable {
 public:
  void linear(const std::string& name, int64_t in, int64_t out, bool adaptable);
  void conv(const std::string& name, int64_t in, int64_t out, int64_t kernel, bool adaptable);
  void norm(const std::string& name, int64_t channels);

  const std::vector<LayerSpec>& specs() const { return specs_; }
  std::vector<LayerSpec> adaptable() const;
  const LayerSpec& at(const std::string& name) const;

  /// PyTorch-default initialisation (uniform in +-1/sqrt(fan_in)) drawn from
  /// `gen` in declaration order.
  WeightMap initialize(at::Generator& gen, torch::ScalarType dtype = torch::kFloat) const;

 private:
  std::vector<LayerSpec> specs_;
};

/// Read-only view used by forward passes: base weights plus optional
/// low-rank adapters keyed by layer name.
struct WeightView {
  const WeightMap* base = nullptr;
  const AdapterSet* adapters = nullptr;

  const torch::Tensor& get(const std::string& name) const;
};

namespace ops {

torch::Tensor linear(const WeightView& w, const std::string& name, const torch::Tensor& x);

/// Same-padded convolution (padding = kernel / 2).
torch::Tensor conv2d(const WeightView& w, const std::string& name, const torch::Tensor& x,
                     int64_t stride = 1);

torch::Tensor group_norm(const WeightView& w, const std::string& name, const torch::Tensor& x,
                         int64_t groups);

/// Largest group count <= `preferred` dividing `channels`.
int64_t norm_groups(int64_t channels, int64_t preferred = 8);

}  // namespace ops

/// Deep copy of every tensor (detached, same dtype).
WeightMap clone_weights(const WeightMap& weights);

/// Casts every tensor to `dtype`.
WeightMap cast_weights(const WeightMap& weights, torch::ScalarType dtype);

bool weights_equal(const WeightMap& a, const WeightMap& b);

/// Deterministic CPU generator for a seed.
at::Generator make_generator(uint64_t seed);

/// Mixes a base seed with stream identifiers (splitmix64), so that
/// independent consumers draw from unrelated streams.
uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0);

}  // namespace osediff
