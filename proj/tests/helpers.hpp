#pragma once

#include <torch/torch.h>
#include <unistd.h>

#include <filesystem>
#include <string>

#include "osediff/degrade.hpp"
#include "osediff/image.hpp"
#include "osediff/denoiser.hpp"
#include "osediff/schedule.hpp"
#include "osediff/toyvae.hpp"
#include "osediff/trainer.hpp"

namespace testing {

inline osediff::VaeConfig tiny_vae_config() { return {4, 4, 8}; }
inline osediff::DenoiserConfig tiny_denoiser_config() { return {4, 16, 2, 8}; }
inline osediff::TextEmbedder tiny_embedder() { return osediff::TextEmbedder(4, 8, 0); }

inline osediff::ToyVae tiny_vae(uint64_t seed = 1) {
  return osediff::ToyVae::create(tiny_vae_config(), seed);
}

inline osediff::Denoiser tiny_denoiser(uint64_t seed = 2) {
  auto d = osediff::Denoiser::create(tiny_denoiser_config(), seed);
  d.set_max_timestep(1000);
  return d;
}

inline osediff::NoiseSchedule default_schedule() {
  return osediff::make_schedule(1000, osediff::ScheduleKind::kLinearVariance);
}

/// In-memory pairs built from procedural textures with the default degradation.
inline osediff::Dataset tiny_dataset(int64_t n, uint64_t seed = 3, int64_t size = 16) {
  osediff::DegradationConfig cfg;
  std::vector<torch::Tensor> hq, lq_raw, lq;
  osediff::Dataset d;
  for (int64_t i = 0; i < n; ++i) {
    auto cls = static_cast<osediff::TextureClass>(i % osediff::kTextureClasses);
    auto x = osediff::quantize(osediff::procedural_texture(cls, size, seed * 1000 + i));
    auto p = osediff::degrade(x, cfg, seed * 7919 + i);
    hq.push_back(p.x_H);
    lq_raw.push_back(p.x_L_raw);
    lq.push_back(p.x_L);
    d.labels.push_back(static_cast<int>(i % osediff::kTextureClasses));
  }
  d.hq = torch::stack(hq);
  d.lq_raw = torch::stack(lq_raw);
  d.lq = torch::stack(lq);
  return d;
}

inline osediff::TrainerConfig tiny_trainer_config() {
  osediff::TrainerConfig c;
  c.batch = 4;
  c.iterations = 10;
  c.seed = 11;
  return c;
}

inline osediff::OsediffTrainer tiny_trainer(const osediff::TrainerConfig& cfg,
                                            int64_t pairs = 8) {
  osediff::OsediffTrainer t(tiny_vae(), tiny_denoiser(), default_schedule(), tiny_embedder(), cfg);
  t.set_dataset(tiny_dataset(pairs));
  return t;
}

inline bool same(const torch::Tensor& a, const torch::Tensor& b) {
  return a.sizes().equals(b.sizes()) && torch::equal(a, b);
}

inline double max_abs(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kDouble) - b.to(torch::kDouble)).abs().max().item<double>();
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() /
           ("osediff-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
