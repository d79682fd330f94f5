#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "osediff/checkpoint.hpp"
#include "osediff/config.hpp"
#include "osediff/degrade.hpp"
#include "osediff/denoiser.hpp"
#include "osediff/generator.hpp"
#include "osediff/losses.hpp"
#include "osediff/lora.hpp"
#include "osediff/metrics.hpp"
#include "osediff/schedule.hpp"
#include "osediff/toyvae.hpp"
#include "osediff/vsd.hpp"

namespace osediff {

using LogFn = std::function<void(const nlohmann::json&)>;

NoiseSchedule schedule_from(const Config& c);
VaeConfig vae_config_from(const Config& c);
DenoiserConfig denoiser_config_from(const Config& c);
TextEmbedder embedder_from(const Config& c);
DegradationConfig degradation_from(const Config& c);

/// Algorithm knobs of the distillation stage.
struct TrainerConfig {
  double lambda1 = 2.0;
  double lambda2 = 1.0;
  double lr = 5e-5;
  int64_t batch = 16;
  int64_t iterations = 1000;
  double weight_decay = 0.01;
  /// Global-norm clip per optimizer; <= 0 disables.
  double grad_clip = 1.0;
  VsdConfig vsd;
  int64_t reg_t_min = 1;
  int64_t reg_t_max = 0;
  std::string negative_prompt = kDefaultNegativePrompt;
  std::string extractor = "tag-stub";
  int64_t rank = 4;
  double lora_scale = 1.0;
  std::vector<std::string> targets{"all"};
  bool precondition = false;
  int64_t checkpoint_every = 0;
  int64_t eval_every = 0;
  uint64_t seed = 0;
};

TrainerConfig trainer_config_from(const Config& c);

// ---------------------------------------------------------------------------
// Pretraining

struct VaeResult {
  ToyVae vae;
  double holdout_psnr = 0.0;
  double roundtrip_mae = 0.0;
  double roundtrip_threshold = 0.0;
};

/// Mean |E(D(z)) - z| over the given latents.
double roundtrip_error(const ToyVae& vae, const torch::Tensor& latents);

/// Reconstruction + small-KL training of a fresh VAE on HQ images. Throws
/// TrainingFailure when held-out PSNR stays below `vae.psnr_floor`.
VaeResult pretrain_vae(const torch::Tensor& train_hq, const torch::Tensor& holdout_hq,
                       const Config& c, uint64_t seed, const LogFn& log = {});

struct TeacherResult {
  Denoiser denoiser;
  /// Held-out denoising loss (fixed t, eps) at every evaluation point.
  std::vector<double> heldout_curve;
  double sample_frechet = 0.0;
};

/// Denoising score matching on HQ latents conditioned on tag-stub prompts of
/// the HQ image, with prompt dropout to the null embedding. A fraction
/// `teacher.negative_prob` of samples carries the negative-prompt embedding
/// instead, on HQ latents (`teacher.negative_latents` = hq) or on the LQ
/// latents of the same pairs (lq).
TeacherResult pretrain_teacher(const ToyVae& vae, const Dataset& train, const Dataset& holdout,
                               const NoiseSchedule& schedule, const TextEmbedder& embedder,
                               const Config& c, uint64_t seed, const LogFn& log = {});

/// Deterministic DDIM sampling from `noise` [B,C,h,w] over `steps` evenly
/// spaced timesteps ending at 1; returns latents. steps == 1 is accepted
/// (a single jump from pure noise) and reported through `ill_posed`.
torch::Tensor sample_teacher_latents(const torch::Tensor& noise, int64_t steps,
                                     const torch::Tensor& context, const Denoiser& teacher,
                                     const NoiseSchedule& schedule, bool* ill_posed = nullptr);

/// Same, decoded to images.
torch::Tensor sample_teacher(const torch::Tensor& noise, int64_t steps, const torch::Tensor& context,
                             const Denoiser& teacher, const NoiseSchedule& schedule,
                             const ToyVae& vae, bool* ill_posed = nullptr);

// ---------------------------------------------------------------------------
// Distillation

struct StepLog {
  int64_t iteration = 0;
  double l_data = 0.0;
  double l_reg = 0.0;
  double l_diff = 0.0;
  double omega = 0.0;
  int64_t t = 0;
  double lr = 0.0;
  /// Norm of lambda2 * d(L_reg)/d(z_hat).
  double reg_grad_norm = 0.0;
  bool vsd_skipped = false;
  nlohmann::json to_json() const;
};

/// Which loss terms to differentiate in `theta_gradients`.
enum class GradTerms { kData, kReg, kBoth };

/// Frechet values stay 0 when the held-out set is too small to fit them.
struct HeldoutMetrics {
  double student_psnr = 0.0;
  double student_ssim = 0.0;
  double student_frechet = 0.0;
  double bicubic_psnr = 0.0;
  double bicubic_ssim = 0.0;
  double bicubic_frechet = 0.0;
  nlohmann::json to_json() const;
};

/// Owns the frozen models, the generator adapters theta, the finetuned
/// regularizer adapters phi', and one AdamW optimizer for each.
class OsediffTrainer {
 public:
  OsediffTrainer(ToyVae vae, Denoiser denoiser, NoiseSchedule schedule, TextEmbedder embedder,
                 TrainerConfig cfg);

  const TrainerConfig& config() const { return cfg_; }
  const ToyVae& vae() const { return vae_; }
  const Denoiser& denoiser() const { return denoiser_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const TextEmbedder& embedder() const { return embedder_; }
  AdapterSet& theta() { return theta_; }
  AdapterSet& phi_prime() { return phi_prime_; }
  const AdapterSet& theta() const { return theta_; }
  const AdapterSet& phi_prime() const { return phi_prime_; }
  int64_t iteration() const { return iteration_; }
  const PromptExtractor& extractor() const { return *extractor_; }

  GeneratorBundle bundle(const PromptExtractor* extractor = nullptr) const;
  torch::Tensor negative_context(int64_t batch) const;

  /// Prompt tokens for every LQ image of a dataset (cached per trainer).
  void set_dataset(Dataset train);
  const Dataset& dataset() const { return train_; }

  /// Indices of the batch drawn at `iteration`.
  torch::Tensor batch_indices(int64_t iteration) const;

  /// One iteration: generator forward, theta update from
  /// L_data + lambda2 * L_reg, then phi' update from L_diff on the detached
  /// generator latents.
  StepLog step();
  /// Runs until `iterations` steps have been taken in total.
  void train(int64_t iterations, const LogFn& log = {},
             const std::function<void(int64_t)>& on_iteration = {});

  /// Gradients on theta for the batch of `iteration` without updating
  /// anything; uses the same random draws as `step` would.
  std::vector<torch::Tensor> theta_gradients(int64_t iteration, GradTerms terms);

  /// Called with 1 after the theta update and 2 after the phi' update of
  /// every step.
  void set_phase_observer(std::function<void(int)> fn) { phase_observer_ = std::move(fn); }

  HeldoutMetrics evaluate(const Dataset& holdout, const PromptExtractor* extractor = nullptr) const;

  /// Adapter and optimizer arrays (`adapters/...`, `optim/...`).
  WeightMap state_arrays() const;
  /// Restores adapters and optimizer state saved by `state_arrays`.
  void load_state_arrays(const WeightMap& arrays, int64_t iteration);

 private:
  struct ThetaForward {
    torch::Tensor z_hat;
    torch::Tensor context;
    torch::Tensor l_data;
    std::optional<RegGradient> reg;
  };
  ThetaForward forward_theta(int64_t iteration, bool with_reg) const;
  void build_optimizers();
  void check_finite(double v, const char* what, int64_t it) const;

  ToyVae vae_;
  Denoiser denoiser_;
  NoiseSchedule schedule_;
  TextEmbedder embedder_;
  TrainerConfig cfg_;
  AdapterSet theta_{AdapterOwner::kGenerator};
  AdapterSet phi_prime_{AdapterOwner::kRegularizer};
  std::unique_ptr<torch::optim::AdamW> opt_theta_;
  std::unique_ptr<torch::optim::AdamW> opt_phi_;
  std::unique_ptr<PromptExtractor> extractor_;
  Dataset train_;
  torch::Tensor contexts_;
  int64_t iteration_ = 0;
  std::function<void(int)> phase_observer_;
};

// ---------------------------------------------------------------------------
// Checkpoint helpers shared by the CLI and the bindings

/// `vae/...`, `denoiser/...`, `schedule/...` arrays plus the manifest fields
/// needed to rebuild the frozen models.
void put_models(Checkpoint& ckpt, const ToyVae* vae, const Denoiser* denoiser,
                const NoiseSchedule* schedule);
/// Rebuilt from the checkpoint's own config echo and manifest.
ToyVae vae_from_checkpoint(const Checkpoint& ckpt);
Denoiser denoiser_from_checkpoint(const Checkpoint& ckpt);
/// Generator adapters stored under `adapters/theta/`.
AdapterSet theta_from_checkpoint(const Checkpoint& ckpt, const ToyVae& vae, const Denoiser& den);

/// Student checkpoint of a trainer: models, adapters, optimizer state.
Checkpoint trainer_checkpoint(const OsediffTrainer& trainer, const Config& c,
                              const nlohmann::json& base_manifest);

std::string git_hash();

}  // namespace osediff
