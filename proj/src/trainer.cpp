#include "osediff/trainer.hpp"

#include <torch/torch.h>

#include <cmath>
#include <cstdio>
#include <sstream>

#include "osediff/errors.hpp"

#ifndef OSEDIFF_GIT_HASH
#define OSEDIFF_GIT_HASH "unknown"
#endif

namespace osediff {

using nlohmann::json;

namespace {

constexpr uint64_t kStreamBatch = 10;
constexpr uint64_t kStreamVsd = 11;
constexpr uint64_t kStreamDiff = 12;
constexpr uint64_t kStreamVaeInit = 100;
constexpr uint64_t kStreamVaeData = 101;
constexpr uint64_t kStreamTeacherInit = 200;
constexpr uint64_t kStreamTeacherData = 201;
constexpr uint64_t kStreamTeacherEval = 202;
constexpr uint64_t kStreamTeacherSample = 203;
constexpr uint64_t kStreamTheta = 300;
constexpr uint64_t kStreamPhiPrime = 301;

constexpr int64_t kChunk = 128;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    const auto b = item.find_last_not_of(" \t");
    if (a != std::string::npos) {
      out.push_back(item.substr(a, b - a + 1));
    }
  }
  return out;
}

/// Applies `fn` to [begin, end) chunks of the leading dimension and
/// concatenates the results.
template <typename Fn>
torch::Tensor chunked(const torch::Tensor& x, Fn fn) {
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < x.size(0); i += kChunk) {
    parts.push_back(fn(x.slice(0, i, std::min(x.size(0), i + kChunk))));
  }
  return torch::cat(parts);
}

void freeze(WeightMap& w) {
  for (auto& [name, t] : w) {
    t = t.detach();
    t.set_requires_grad(false);
  }
}

struct TargetSplit {
  std::vector<std::string> encoder;
  std::vector<std::string> unet;
};

TargetSplit split_targets(const std::vector<std::string>& targets) {
  TargetSplit out;
  for (const auto& t : targets) {
    if (t == "all") {
      out.encoder.push_back("encoder.*");
      out.unet.push_back("unet.*");
    } else if (t.rfind("encoder.", 0) == 0) {
      out.encoder.push_back(t);
    } else if (t.rfind("unet.", 0) == 0) {
      out.unet.push_back(t);
    } else {
      throw ConfigError("adapter target '" + t + "' names neither an encoder. nor a unet. layer");
    }
  }
  return out;
}

AdapterSet build_theta(const ToyVae& vae, const Denoiser& den, const std::vector<std::string>& targets,
                       int64_t rank, double scale, uint64_t seed) {
  const auto split = split_targets(targets);
  auto gen = make_generator(derive_seed(seed, kStreamTheta));
  AdapterSet theta(AdapterOwner::kGenerator);
  if (!split.encoder.empty()) {
    for (const auto& [name, layer] : inject(vae.encoder_layers(), vae.weights(), split.encoder, rank,
                                            scale, AdapterOwner::kGenerator, gen)) {
      theta.insert(layer);
    }
  }
  if (!split.unet.empty()) {
    for (const auto& [name, layer] : inject(den.layers().adaptable(), den.weights(), split.unet, rank,
                                            scale, AdapterOwner::kGenerator, gen)) {
      theta.insert(layer);
    }
  }
  if (theta.empty()) {
    throw ConfigError("no adapter targets selected");
  }
  return theta;
}

double mean_psnr(const torch::Tensor& pred, const torch::Tensor& ref) {
  double sum = 0.0;
  for (int64_t i = 0; i < pred.size(0); ++i) {
    sum += psnr(pred[i], ref[i]);
  }
  return sum / static_cast<double>(pred.size(0));
}

using AdamWState = torch::optim::AdamWParamState;

std::string optim_key(const std::string& which, size_t i, const char* field) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "optim/%s/%04zu/%s", which.c_str(), i, field);
  return buf;
}

void save_optimizer(WeightMap& out, const std::string& which, torch::optim::AdamW& opt,
                    const std::vector<torch::Tensor>& params) {
  auto& state = opt.state();
  for (size_t i = 0; i < params.size(); ++i) {
    auto it = state.find(params[i].unsafeGetTensorImpl());
    if (it == state.end()) {
      continue;
    }
    auto& s = static_cast<AdamWState&>(*it->second);
    out[optim_key(which, i, "exp_avg")] = s.exp_avg().detach().clone();
    out[optim_key(which, i, "exp_avg_sq")] = s.exp_avg_sq().detach().clone();
    out[optim_key(which, i, "step")] = torch::full({1}, static_cast<double>(s.step()), torch::kFloat);
  }
}

void load_optimizer(const WeightMap& in, const std::string& which, torch::optim::AdamW& opt,
                    const std::vector<torch::Tensor>& params) {
  auto& state = opt.state();
  state.clear();
  for (size_t i = 0; i < params.size(); ++i) {
    auto m = in.find(optim_key(which, i, "exp_avg"));
    auto v = in.find(optim_key(which, i, "exp_avg_sq"));
    auto n = in.find(optim_key(which, i, "step"));
    if (m == in.end() && v == in.end() && n == in.end()) {
      continue;
    }
    if (m == in.end() || v == in.end() || n == in.end()) {
      throw ConfigError("incomplete optimizer state for " + which + " parameter " + std::to_string(i));
    }
    if (!m->second.sizes().equals(params[i].sizes()) || !v->second.sizes().equals(params[i].sizes())) {
      throw DimensionError("optimizer state shape mismatch for " + which + " parameter " +
                           std::to_string(i));
    }
    auto s = std::make_unique<AdamWState>();
    s->step(static_cast<int64_t>(std::llround(n->second.item<double>())));
    s->exp_avg(m->second.to(params[i].scalar_type()).clone());
    s->exp_avg_sq(v->second.to(params[i].scalar_type()).clone());
    state[params[i].unsafeGetTensorImpl()] = std::move(s);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config plumbing

NoiseSchedule schedule_from(const Config& c) {
  return make_schedule(c.integer("schedule.T"), parse_schedule_kind(c.text("schedule.kind")),
                       c.number("schedule.beta_start"), c.number("schedule.beta_end"));
}

VaeConfig vae_config_from(const Config& c) {
  VaeConfig v;
  v.latent_channels = c.integer("vae.latent_channels");
  v.factor = c.integer("vae.factor");
  v.width = c.integer("vae.width");
  return v;
}

DenoiserConfig denoiser_config_from(const Config& c) {
  DenoiserConfig d;
  d.latent_channels = c.integer("vae.latent_channels");
  d.width = c.integer("teacher.width");
  d.heads = c.integer("teacher.heads");
  d.text_dim = c.integer("text.dim");
  return d;
}

TextEmbedder embedder_from(const Config& c) {
  return TextEmbedder(c.integer("text.tokens"), c.integer("text.dim"),
                      static_cast<uint64_t>(c.integer("text.seed")));
}

DegradationConfig degradation_from(const Config& c) {
  auto d = degradation_from_json(json{{"scale", c.at("degrade.scale")}, {"stages", c.at("degrade.stages")}});
  d.validate();
  return d;
}

TrainerConfig trainer_config_from(const Config& c) {
  TrainerConfig t;
  t.lambda1 = c.number("train.lambda1");
  t.lambda2 = c.number("train.lambda2");
  t.lr = c.number("train.lr");
  t.batch = c.integer("train.batch");
  t.iterations = c.integer("train.iterations");
  t.weight_decay = c.number("train.weight_decay");
  t.grad_clip = c.number("train.grad_clip");
  t.vsd.cfg_scale = c.number("train.cfg_scale");
  t.vsd.cfg_on_phi_prime = c.flag("train.cfg_on_phi_prime");
  t.vsd.t_min = c.integer("train.vsd_t_min");
  t.vsd.t_max = c.integer("train.vsd_t_max");
  t.vsd.omega = parse_omega_mode(c.text("train.omega"));
  t.vsd.reduction = parse_reduction(c.text("train.vsd_reduction"));
  t.reg_t_min = c.integer("train.reg_t_min");
  t.reg_t_max = c.integer("train.reg_t_max");
  t.negative_prompt = c.text("prompt.negative");
  t.extractor = c.text("prompt.extractor");
  t.rank = c.integer("lora.rank");
  t.lora_scale = c.number("lora.scale");
  t.targets = split_list(c.text("lora.targets"));
  t.precondition = c.flag("train.precondition");
  t.checkpoint_every = c.integer("train.checkpoint_every");
  t.eval_every = c.integer("train.eval_every");
  t.seed = static_cast<uint64_t>(c.integer("seed"));
  if (t.lambda1 < 0 || t.lambda2 < 0) {
    throw ConfigError("train.lambda1 and train.lambda2 must be >= 0");
  }
  if (t.batch < 1 || t.iterations < 0 || t.lr <= 0) {
    throw ConfigError("train.batch >= 1, train.iterations >= 0 and train.lr > 0 are required");
  }
  if (t.vsd.cfg_scale < 0) {
    throw ConfigError("train.cfg_scale must be >= 0");
  }
  return t;
}

// ---------------------------------------------------------------------------
// VAE pretraining

double roundtrip_error(const ToyVae& vae, const torch::Tensor& latents) {
  torch::NoGradGuard no_grad;
  auto back = chunked(latents, [&](const torch::Tensor& z) { return vae.encode(vae.decode(z)); });
  return (back - latents).abs().mean().item<double>();
}

VaeResult pretrain_vae(const torch::Tensor& train_hq, const torch::Tensor& holdout_hq,
                       const Config& c, uint64_t seed, const LogFn& log) {
  if (!train_hq.defined() || train_hq.size(0) == 0) {
    throw ConfigError("VAE pretraining needs a nonempty dataset");
  }
  const int64_t steps = c.integer("vae.steps");
  const int64_t batch = std::min(c.integer("vae.batch"), train_hq.size(0));
  const double lr = c.number("vae.lr");
  const double kl_weight = c.number("vae.kl_weight");
  const auto decay_at = static_cast<int64_t>(c.number("vae.lr_decay_at") * static_cast<double>(steps));

  auto vae = ToyVae::create(vae_config_from(c), derive_seed(seed, kStreamVaeInit));
  std::vector<torch::Tensor> params;
  for (auto& [name, t] : vae.mutable_weights()) {
    t.set_requires_grad(true);
    params.push_back(t);
  }
  torch::optim::Adam opt(params, torch::optim::AdamOptions(lr));
  auto gen = make_generator(derive_seed(seed, kStreamVaeData));
  const int64_t n = train_hq.size(0);

  for (int64_t step = 0; step < steps; ++step) {
    if (step == decay_at) {
      for (auto& g : opt.param_groups()) {
        static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr * c.number("vae.lr_decay"));
      }
    }
    auto idx = torch::randint(n, {batch}, gen, torch::kLong);
    auto x = train_hq.index_select(0, idx);
    auto [mu, logvar] = vae.moments(x);
    auto eps = torch::randn(mu.sizes(), gen, mu.options().requires_grad(false));
    auto z = mu + torch::exp(0.5 * logvar) * eps;
    auto rec = torch::mse_loss(vae.decode_unscaled(z), x);
    auto kl = 0.5 * (mu.square() + logvar.exp() - 1.0 - logvar).mean();
    auto loss = rec + kl_weight * kl;
    opt.zero_grad();
    loss.backward();
    opt.step();
    const double v = loss.item<double>();
    if (!std::isfinite(v)) {
      throw TrainingFailure("VAE loss became non-finite at step " + std::to_string(step));
    }
    if (log && (step % 100 == 0 || step + 1 == steps)) {
      log(json{{"stage", "vae"}, {"step", step}, {"loss", v}, {"rec", rec.item<double>()}});
    }
  }
  freeze(vae.mutable_weights());

  VaeResult r{vae, 0.0, 0.0, 0.0};
  torch::NoGradGuard no_grad;
  auto mu = chunked(train_hq, [&](const torch::Tensor& x) { return r.vae.moments(x).first; });
  r.vae.set_latent_scale(1.0 / mu.std().item<double>());

  const auto& eval = holdout_hq.defined() && holdout_hq.size(0) > 0 ? holdout_hq : train_hq;
  auto rec = chunked(eval, [&](const torch::Tensor& x) { return r.vae.decode(r.vae.encode(x)); });
  r.holdout_psnr = mean_psnr(rec, eval);
  auto lat = chunked(eval.slice(0, 0, std::min<int64_t>(100, eval.size(0))),
                     [&](const torch::Tensor& x) { return r.vae.encode(x); });
  r.roundtrip_mae = roundtrip_error(r.vae, lat);
  r.roundtrip_threshold = 1.5 * r.roundtrip_mae;
  if (log) {
    log(json{{"stage", "vae"},
             {"holdout_psnr", r.holdout_psnr},
             {"roundtrip_mae", r.roundtrip_mae},
             {"latent_scale", r.vae.latent_scale()}});
  }
  const double floor = c.number("vae.psnr_floor");
  if (r.holdout_psnr < floor) {
    throw TrainingFailure("VAE held-out PSNR " + std::to_string(r.holdout_psnr) +
                          " dB is below the floor of " + std::to_string(floor) + " dB after " +
                          std::to_string(steps) + " steps (lr " + std::to_string(lr) + ")");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Teacher

TeacherResult pretrain_teacher(const ToyVae& vae, const Dataset& train, const Dataset& holdout,
                               const NoiseSchedule& schedule, const TextEmbedder& embedder,
                               const Config& c, uint64_t seed, const LogFn& log) {
  if (train.size() == 0) {
    throw ConfigError("teacher pretraining needs a nonempty dataset");
  }
  const int64_t steps = c.integer("teacher.steps");
  const int64_t batch = std::min(c.integer("teacher.batch"), train.size());
  const double uncond = c.number("teacher.uncond_prob");
  const double negative_prob = c.number("teacher.negative_prob");
  const std::string negative_latents = c.text("teacher.negative_latents");
  if (negative_latents != "lq" && negative_latents != "hq") {
    throw ConfigError("teacher.negative_latents must be lq or hq, got " + negative_latents);
  }
  const int64_t eval_every = std::max<int64_t>(1, c.integer("teacher.eval_every"));
  const int64_t T = schedule.T;

  auto tags_of = [&](const torch::Tensor& images) {
    std::vector<PromptEmbedding> p;
    for (int64_t i = 0; i < images.size(0); ++i) {
      p.push_back(embedder.encode(stub_tags(images[i]), PromptSource::kTagStub));
    }
    return stack_prompts(p);
  };

  torch::Tensor z_hq, z_lq, ctx, eval_z, eval_ctx, eval_t, eval_eps;
  {
    torch::NoGradGuard no_grad;
    z_hq = chunked(train.hq, [&](const torch::Tensor& x) { return vae.encode(x); });
    z_lq = chunked(train.lq, [&](const torch::Tensor& x) { return vae.encode(x); });
    ctx = tags_of(train.hq);
    const auto& ev = holdout.size() > 0 ? holdout : train;
    eval_z = chunked(ev.hq, [&](const torch::Tensor& x) { return vae.encode(x); });
    eval_ctx = tags_of(ev.hq);
    auto eg = make_generator(derive_seed(seed, kStreamTeacherEval));
    eval_t = torch::randint(1, T + 1, {eval_z.size(0)}, eg, torch::kLong);
    eval_eps = torch::randn(eval_z.sizes(), eg, eval_z.options());
  }
  const auto null_ctx = embedder.null_embedding().vectors;
  const auto neg_ctx = embedder.negative_embedding(c.text("prompt.negative")).vectors;

  TeacherResult r{Denoiser::create(denoiser_config_from(c), derive_seed(seed, kStreamTeacherInit)), {}, 0.0};
  r.denoiser.set_max_timestep(T);
  std::vector<torch::Tensor> params;
  for (auto& [name, t] : r.denoiser.mutable_weights()) {
    t.set_requires_grad(true);
    params.push_back(t);
  }
  torch::optim::Adam opt(params, torch::optim::AdamOptions(c.number("teacher.lr")));
  auto gen = make_generator(derive_seed(seed, kStreamTeacherData));

  auto heldout_loss = [&] {
    torch::NoGradGuard no_grad;
    double sum = 0.0;
    for (int64_t i = 0; i < eval_z.size(0); i += kChunk) {
      const int64_t j = std::min(eval_z.size(0), i + kChunk);
      auto t = eval_t.slice(0, i, j);
      auto eps = eval_eps.slice(0, i, j);
      auto zt = forward_diffuse(eval_z.slice(0, i, j), t, eps, schedule);
      auto pred = r.denoiser.predict_noise(zt, t, eval_ctx.slice(0, i, j));
      sum += (pred - eps).square().sum().item<double>();
    }
    return sum / static_cast<double>(eval_z.numel());
  };

  const int64_t n = train.size();
  for (int64_t step = 0; step < steps; ++step) {
    auto idx = torch::randint(n, {batch}, gen, torch::kLong);
    auto use_neg = torch::rand({batch}, gen) < negative_prob;
    auto drop = torch::rand({batch}, gen) < uncond;
    auto m4 = (use_neg & (negative_latents == "lq")).view({-1, 1, 1, 1});
    auto z0 = torch::where(m4, z_lq.index_select(0, idx), z_hq.index_select(0, idx));
    auto cb = ctx.index_select(0, idx);
    cb = torch::where(drop.view({-1, 1, 1}), null_ctx.unsqueeze(0), cb);
    cb = torch::where(use_neg.view({-1, 1, 1}), neg_ctx.unsqueeze(0), cb);
    auto t = torch::randint(1, T + 1, {batch}, gen, torch::kLong);
    auto eps = torch::randn(z0.sizes(), gen, z0.options());
    auto zt = forward_diffuse(z0, t, eps, schedule);
    auto loss = torch::mse_loss(r.denoiser.predict_noise(zt, t, cb), eps);
    opt.zero_grad();
    loss.backward();
    opt.step();
    const double v = loss.item<double>();
    if (!std::isfinite(v)) {
      throw TrainingFailure("teacher loss became non-finite at step " + std::to_string(step));
    }
    if ((step + 1) % eval_every == 0 || step + 1 == steps) {
      r.heldout_curve.push_back(heldout_loss());
      if (log) {
        log(json{{"stage", "teacher"}, {"step", step + 1}, {"loss", v}, {"heldout", r.heldout_curve.back()}});
      }
    }
  }
  freeze(r.denoiser.mutable_weights());
  r.denoiser.reset_forward_count();

  const int64_t count = c.integer("teacher.sample_count");
  const int64_t sample_steps = c.integer("teacher.sample_steps");
  if (count > 0) {
    torch::NoGradGuard no_grad;
    auto sg = make_generator(derive_seed(seed, kStreamTeacherSample));
    auto pick = torch::randint(n, {count}, sg, torch::kLong);
    auto noise = torch::randn({count, z_hq.size(1), z_hq.size(2), z_hq.size(3)}, sg, z_hq.options());
    auto images = sample_teacher(noise, sample_steps, ctx.index_select(0, pick), r.denoiser, schedule, vae);
    r.sample_frechet = toy_frechet(frechet_features(vae, images), frechet_features(vae, train.hq));
    if (log) {
      log(json{{"stage", "teacher"}, {"sample_frechet", r.sample_frechet}, {"sample_steps", sample_steps}});
    }
    const double floor = c.number("teacher.frechet_floor");
    if (floor > 0 && r.sample_frechet > floor) {
      throw TrainingFailure("teacher " + std::to_string(sample_steps) + "-step samples reach toy-Frechet " +
                            std::to_string(r.sample_frechet) + ", above the floor of " +
                            std::to_string(floor));
    }
  }
  return r;
}

torch::Tensor sample_teacher_latents(const torch::Tensor& noise, int64_t steps,
                                     const torch::Tensor& context, const Denoiser& teacher,
                                     const NoiseSchedule& schedule, bool* ill_posed) {
  if (steps < 1) {
    throw RangeError("sampler needs at least one step");
  }
  if (ill_posed != nullptr) {
    *ill_posed = steps == 1;
  }
  const int64_t T = schedule.T;
  std::vector<int64_t> ts;
  if (steps == 1) {
    ts.push_back(T);
  } else {
    const int64_t k = std::min(steps, T);
    for (int64_t i = 0; i < k; ++i) {
      ts.push_back(static_cast<int64_t>(std::llround(
          static_cast<double>(T) - static_cast<double>(i) * static_cast<double>(T - 1) / static_cast<double>(k - 1))));
    }
  }
  torch::NoGradGuard no_grad;
  auto z = noise;
  for (size_t i = 0; i < ts.size(); ++i) {
    const int64_t t = ts[i];
    auto eps = teacher.predict_noise(z, t, context);
    auto x0 = one_step_denoise(z, eps, t, schedule);
    if (i + 1 < ts.size()) {
      const int64_t next = ts[i + 1];
      z = schedule.alpha_at(next) * x0 + schedule.beta_at(next) * eps;
    } else {
      z = x0;
    }
  }
  return z;
}

torch::Tensor sample_teacher(const torch::Tensor& noise, int64_t steps, const torch::Tensor& context,
                             const Denoiser& teacher, const NoiseSchedule& schedule,
                             const ToyVae& vae, bool* ill_posed) {
  auto z = sample_teacher_latents(noise, steps, context, teacher, schedule, ill_posed);
  torch::NoGradGuard no_grad;
  return vae.decode(z);
}

// ---------------------------------------------------------------------------
// Distillation

json StepLog::to_json() const {
  return json{{"iteration", iteration}, {"L_data", l_data},   {"L_reg", l_reg},
              {"L_diff", l_diff},       {"omega", omega},     {"t", t},
              {"lr", lr},               {"reg_grad_norm", reg_grad_norm}, {"vsd_skipped", vsd_skipped}};
}

json HeldoutMetrics::to_json() const {
  return json{{"student", {{"psnr", student_psnr}, {"ssim", student_ssim}, {"toy_frechet", student_frechet}}},
              {"bicubic", {{"psnr", bicubic_psnr}, {"ssim", bicubic_ssim}, {"toy_frechet", bicubic_frechet}}}};
}

OsediffTrainer::OsediffTrainer(ToyVae vae, Denoiser denoiser, NoiseSchedule schedule,
                               TextEmbedder embedder, TrainerConfig cfg)
    : vae_(std::move(vae)),
      denoiser_(std::move(denoiser)),
      schedule_(std::move(schedule)),
      embedder_(std::move(embedder)),
      cfg_(std::move(cfg)) {
  if (cfg_.lambda2 < 0) {
    throw ConfigError("lambda2 must be >= 0");
  }
  denoiser_.set_max_timestep(schedule_.T);
  freeze(vae_.mutable_weights());
  freeze(denoiser_.mutable_weights());
  extractor_ = make_extractor(cfg_.extractor);
  theta_ = build_theta(vae_, denoiser_, cfg_.targets, cfg_.rank, cfg_.lora_scale, cfg_.seed);
  auto unet_targets = split_targets(cfg_.targets).unet;
  if (unet_targets.empty()) {
    unet_targets = {"unet.*"};
  }
  auto gen = make_generator(derive_seed(cfg_.seed, kStreamPhiPrime));
  phi_prime_ = inject(denoiser_.layers().adaptable(), denoiser_.weights(), unet_targets, cfg_.rank,
                      cfg_.lora_scale, AdapterOwner::kRegularizer, gen);
  build_optimizers();
}

void OsediffTrainer::build_optimizers() {
  theta_.set_requires_grad(true);
  phi_prime_.set_requires_grad(true);
  auto opts = torch::optim::AdamWOptions(cfg_.lr).weight_decay(cfg_.weight_decay);
  opt_theta_ = std::make_unique<torch::optim::AdamW>(theta_.parameters(), opts);
  opt_phi_ = std::make_unique<torch::optim::AdamW>(phi_prime_.parameters(), opts);
}

GeneratorBundle OsediffTrainer::bundle(const PromptExtractor* extractor) const {
  GeneratorBundle b;
  b.vae = &vae_;
  b.denoiser = &denoiser_;
  b.schedule = schedule_;
  b.adapters = &theta_;
  b.embedder = &embedder_;
  b.extractor = extractor != nullptr ? extractor : extractor_.get();
  b.precondition = cfg_.precondition;
  return b;
}

torch::Tensor OsediffTrainer::negative_context(int64_t batch) const {
  return repeat_prompt(embedder_.negative_embedding(cfg_.negative_prompt), batch);
}

void OsediffTrainer::set_dataset(Dataset train) {
  if (train.size() == 0) {
    throw ConfigError("training dataset is empty");
  }
  train_ = std::move(train);
  torch::NoGradGuard no_grad;
  contexts_ = extract_prompts(train_.lq, bundle());
}

torch::Tensor OsediffTrainer::batch_indices(int64_t iteration) const {
  auto gen = make_generator(derive_seed(cfg_.seed, kStreamBatch, static_cast<uint64_t>(iteration)));
  return torch::randint(train_.size(), {cfg_.batch}, gen, torch::kLong);
}

OsediffTrainer::ThetaForward OsediffTrainer::forward_theta(int64_t iteration, bool with_reg) const {
  if (train_.size() == 0) {
    throw ConfigError("no training dataset attached to the trainer");
  }
  auto idx = batch_indices(iteration);
  auto x_L = train_.lq.index_select(0, idx);
  auto x_H = train_.hq.index_select(0, idx);
  ThetaForward f;
  f.context = contexts_.index_select(0, idx);
  const auto b = bundle();
  f.z_hat = generate_latent(x_L, f.context, b);
  auto x_hat = vae_.decode_unscaled(f.z_hat / vae_.latent_scale());
  f.l_data = data_loss(x_hat, x_H, DataLossConfig{cfg_.lambda1, {}});
  if (with_reg) {
    auto gen = make_generator(derive_seed(cfg_.seed, kStreamVsd, static_cast<uint64_t>(iteration)));
    f.reg = reg_gradient(f.z_hat, f.context, negative_context(idx.size(0)), denoiser_, phi_prime_,
                         schedule_, gen, cfg_.vsd);
  }
  return f;
}

void OsediffTrainer::check_finite(double v, const char* what, int64_t it) const {
  if (!std::isfinite(v)) {
    throw TrainingFailure(std::string("non-finite ") + what + " at iteration " + std::to_string(it) +
                          " (batch seed " +
                          std::to_string(derive_seed(cfg_.seed, kStreamBatch, static_cast<uint64_t>(it))) +
                          ", vsd seed " +
                          std::to_string(derive_seed(cfg_.seed, kStreamVsd, static_cast<uint64_t>(it))) + ")");
  }
}

StepLog OsediffTrainer::step() {
  const int64_t it = iteration_;
  StepLog log;
  log.iteration = it;
  log.lr = cfg_.lr;

  // Generator update.
  opt_theta_->zero_grad();
  auto f = forward_theta(it, cfg_.lambda2 > 0);
  auto total = f.l_data;
  log.l_data = f.l_data.item<double>();
  check_finite(log.l_data, "L_data", it);
  if (f.reg) {
    const auto& r = *f.reg;
    log.omega = r.pred.omega;
    log.t = r.pred.t;
    log.vsd_skipped = r.pred.degenerate;
    double denom = cfg_.vsd.reduction == Reduction::kMean ? static_cast<double>(f.z_hat.numel()) : 1.0;
    log.l_reg = 0.5 * r.grad.square().sum().item<double>() / denom;
    log.reg_grad_norm = cfg_.lambda2 * r.grad.norm().item<double>() / denom;
    check_finite(log.l_reg, "L_reg", it);
    total = total + cfg_.lambda2 * r.surrogate;
  }
  total.backward();
  if (cfg_.grad_clip > 0) {
    torch::nn::utils::clip_grad_norm_(theta_.parameters(), cfg_.grad_clip);
  }
  opt_theta_->step();
  if (phase_observer_) {
    phase_observer_(1);
  }

  // Regularizer update on the detached generator latents.
  opt_phi_->zero_grad();
  auto gen = make_generator(derive_seed(cfg_.seed, kStreamDiff, static_cast<uint64_t>(it)));
  auto l_diff = regularizer_loss(f.z_hat.detach(), f.context, denoiser_, phi_prime_, schedule_, gen,
                                 cfg_.reg_t_min, cfg_.reg_t_max);
  log.l_diff = l_diff.item<double>();
  check_finite(log.l_diff, "L_diff", it);
  l_diff.backward();
  if (cfg_.grad_clip > 0) {
    torch::nn::utils::clip_grad_norm_(phi_prime_.parameters(), cfg_.grad_clip);
  }
  opt_phi_->step();
  opt_theta_->zero_grad();
  if (phase_observer_) {
    phase_observer_(2);
  }

  ++iteration_;
  return log;
}

void OsediffTrainer::train(int64_t iterations, const LogFn& log,
                           const std::function<void(int64_t)>& on_iteration) {
  while (iteration_ < iterations) {
    auto s = step();
    if (log) {
      log(s.to_json());
    }
    if (on_iteration) {
      on_iteration(iteration_);
    }
  }
}

std::vector<torch::Tensor> OsediffTrainer::theta_gradients(int64_t iteration, GradTerms terms) {
  auto f = forward_theta(iteration, terms != GradTerms::kData);
  torch::Tensor loss;
  switch (terms) {
    case GradTerms::kData:
      loss = f.l_data;
      break;
    case GradTerms::kReg:
      loss = cfg_.lambda2 * f.reg->surrogate;
      break;
    case GradTerms::kBoth:
      loss = f.l_data + cfg_.lambda2 * f.reg->surrogate;
      break;
  }
  const auto params = theta_.parameters();
  auto grads = torch::autograd::grad({loss}, params, {}, false, false, true);
  for (size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].defined()) {
      grads[i] = torch::zeros_like(params[i]);
    }
  }
  return grads;
}

HeldoutMetrics OsediffTrainer::evaluate(const Dataset& holdout, const PromptExtractor* extractor) const {
  torch::NoGradGuard no_grad;
  const auto b = bundle(extractor);
  auto pred = chunked(holdout.lq, [&](const torch::Tensor& x) { return restore(x, b); });
  const ToyVae* feat = holdout.size() > frechet_feature_dim(vae_) ? &vae_ : nullptr;
  auto student = evaluate_images(pred, holdout.hq, feat);
  auto bicubic = evaluate_images(holdout.lq, holdout.hq, feat);
  HeldoutMetrics m;
  m.student_psnr = student.mean_psnr();
  m.student_ssim = student.mean_ssim();
  m.student_frechet = student.frechet.value_or(0.0);
  m.bicubic_psnr = bicubic.mean_psnr();
  m.bicubic_ssim = bicubic.mean_ssim();
  m.bicubic_frechet = bicubic.frechet.value_or(0.0);
  return m;
}

WeightMap OsediffTrainer::state_arrays() const {
  WeightMap out;
  put_prefix(out, "adapters/theta/", theta_.named_tensors());
  put_prefix(out, "adapters/phi_prime/", phi_prime_.named_tensors());
  save_optimizer(out, "theta", *opt_theta_, theta_.parameters());
  save_optimizer(out, "phi_prime", *opt_phi_, phi_prime_.parameters());
  return out;
}

void OsediffTrainer::load_state_arrays(const WeightMap& arrays, int64_t iteration) {
  theta_.load_named(select_prefix(arrays, "adapters/theta/"));
  phi_prime_.load_named(select_prefix(arrays, "adapters/phi_prime/"));
  load_optimizer(arrays, "theta", *opt_theta_, theta_.parameters());
  load_optimizer(arrays, "phi_prime", *opt_phi_, phi_prime_.parameters());
  iteration_ = iteration;
}

// ---------------------------------------------------------------------------
// Checkpoints

void put_models(Checkpoint& ckpt, const ToyVae* vae, const Denoiser* denoiser,
                const NoiseSchedule* schedule) {
  if (vae != nullptr) {
    put_prefix(ckpt.arrays, "vae/", vae->weights());
    ckpt.manifest["latent_scale"] = vae->latent_scale();
  }
  if (denoiser != nullptr) {
    put_prefix(ckpt.arrays, "denoiser/", denoiser->weights());
  }
  if (schedule != nullptr) {
    ckpt.arrays["schedule/alpha"] = torch::tensor(schedule->alpha, torch::kDouble).to(torch::kFloat);
    ckpt.arrays["schedule/beta"] = torch::tensor(schedule->beta, torch::kDouble).to(torch::kFloat);
  }
}

ToyVae vae_from_checkpoint(const Checkpoint& ckpt) {
  auto w = select_prefix(ckpt.arrays, "vae/");
  if (w.empty()) {
    throw ConfigError("checkpoint holds no VAE weights");
  }
  if (!ckpt.manifest.contains("latent_scale")) {
    throw ConfigError("checkpoint manifest lacks latent_scale");
  }
  return ToyVae(vae_config_from(Config(ckpt.config)), std::move(w),
                ckpt.manifest.at("latent_scale").get<double>());
}

Denoiser denoiser_from_checkpoint(const Checkpoint& ckpt) {
  auto w = select_prefix(ckpt.arrays, "denoiser/");
  if (w.empty()) {
    throw ConfigError("checkpoint holds no teacher weights");
  }
  const Config c(ckpt.config);
  Denoiser d(denoiser_config_from(c), std::move(w));
  d.set_max_timestep(c.integer("schedule.T"));
  return d;
}

AdapterSet theta_from_checkpoint(const Checkpoint& ckpt, const ToyVae& vae, const Denoiser& den) {
  const Config c(ckpt.config);
  auto theta = build_theta(vae, den, split_list(c.text("lora.targets")), c.integer("lora.rank"),
                           c.number("lora.scale"), static_cast<uint64_t>(c.integer("seed")));
  auto arrays = select_prefix(ckpt.arrays, "adapters/theta/");
  if (arrays.empty()) {
    throw ConfigError("checkpoint holds no generator adapters");
  }
  theta.load_named(arrays);
  theta.set_requires_grad(false);
  return theta;
}

Checkpoint trainer_checkpoint(const OsediffTrainer& trainer, const Config& c,
                              const json& base_manifest) {
  Checkpoint ckpt;
  ckpt.config = c.values();
  ckpt.manifest = base_manifest.is_object() ? base_manifest : json::object();
  put_models(ckpt, &trainer.vae(), &trainer.denoiser(), &trainer.schedule());
  for (const auto& [name, t] : trainer.state_arrays()) {
    ckpt.arrays[name] = t;
  }
  ckpt.manifest["iteration"] = trainer.iteration();
  ckpt.manifest["git"] = git_hash();
  ckpt.manifest["config_hash"] = json_hash(c.values());
  return ckpt;
}

std::string git_hash() { return OSEDIFF_GIT_HASH; }

}  // namespace osediff
