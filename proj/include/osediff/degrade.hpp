#pragma once

#include <torch/types.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace osediff {

enum class TextureClass { kStripes, kChecker, kBlobs, kGradient, kNoise };
inline constexpr int kTextureClasses = 5;
std::string to_string(TextureClass c);

/// Two-colour procedural texture [3, size, size] in [-1, 1]. The class
/// determines the mask; colours, frequencies and phases come from `seed`.
torch::Tensor procedural_texture(TextureClass cls, int64_t size, uint64_t seed);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// One blur -> resize -> noise -> JPEG round. A zero-width range at 0
/// disables blur or noise; `jpeg = false` disables compression.
struct StageConfig {
  Range blur_sigma{0.2, 1.0};
  int64_t blur_kernel = 7;
  /// Relative to the current size.
  Range resize{0.5, 1.0};
  /// Gaussian noise std on the 0..255 scale.
  Range gaussian_noise{1.0, 10.0};
  double poisson_prob = 0.0;
  /// log10 of the Poisson photon count at full intensity.
  Range poisson_log_peak{2.0, 3.0};
  bool jpeg = true;
  Range jpeg_quality{30.0, 95.0};
};

struct DegradationConfig {
  int64_t scale = 4;
  std::vector<StageConfig> stages{StageConfig{}, StageConfig{{0.2, 0.8}, 7, {0.5, 1.0}, {1.0, 8.0}}};
  void validate() const;
};

/// Every value sampled while degrading one image.
struct StageRecord {
  double blur_sigma = 0.0;
  int64_t blur_kernel = 7;
  int64_t height = 0;
  int64_t width = 0;
  std::string resize_mode = "bicubic";
  std::string noise = "none";  // none | gaussian | poisson
  double noise_level = 0.0;
  uint64_t noise_seed = 0;
  int jpeg_quality = 0;  // 0 = skipped
};

struct DegradationRecord {
  std::vector<StageRecord> stages;
  int64_t height = 0;
  int64_t width = 0;
};

struct TrainingPair {
  torch::Tensor x_H;      // [3, H, W]
  torch::Tensor x_L_raw;  // [3, H/scale, W/scale], on the 8-bit grid
  torch::Tensor x_L;      // bicubic upsample of x_L_raw to [3, H, W]
  DegradationRecord record;
};

/// Samples a degradation from `seed` and applies it.
TrainingPair degrade(const torch::Tensor& x_H, const DegradationConfig& cfg, uint64_t seed);

/// Re-applies a stored record; reproduces x_L_raw bit for bit.
torch::Tensor replay(const torch::Tensor& x_H, const DegradationRecord& record);

/// x_L_raw -> target resolution.
torch::Tensor upsample_lq(const torch::Tensor& x_L_raw, int64_t height, int64_t width);

nlohmann::json to_json(const DegradationConfig& c);
DegradationConfig degradation_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DegradationRecord& r);
DegradationRecord record_from_json(const nlohmann::json& j);

/// 16-hex-digit FNV-1a hash of a JSON document's compact dump.
std::string json_hash(const nlohmann::json& j);

/// Writes `<out>/hq/NNNN.png`, `<out>/lq/NNNN.png` and `<out>/manifest.json`.
/// `source` is "procedural" or a directory of PNGs.
nlohmann::json synthesize_dataset(const std::string& source, int64_t count,
                                  const DegradationConfig& cfg, uint64_t seed,
                                  const std::filesystem::path& out, int64_t size = 32);

/// Loaded pairs, in manifest order.
struct Dataset {
  torch::Tensor hq;      // [N, 3, H, W]
  torch::Tensor lq_raw;  // [N, 3, H/s, W/s]
  torch::Tensor lq;      // [N, 3, H, W]
  std::vector<int> labels;  // -1 when unknown
  nlohmann::json manifest;
  int64_t size() const { return hq.defined() ? hq.size(0) : 0; }
  Dataset slice(int64_t begin, int64_t end) const;
};

Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace osediff
