// End-to-end acceptance run: one PASS/FAIL line per criterion.
//
//   osediff_acceptance [work-dir]
//
// Criteria 8, 9 and 11 run the toy-32 recipe through the CLI inside
// work-dir (default: a fresh directory under the system temp dir).

#include <torch/torch.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include "helpers.hpp"
#include "osediff/checkpoint.hpp"
#include "osediff/cli.hpp"
#include "osediff/config.hpp"
#include "osediff/generator.hpp"
#include "osediff/lora.hpp"
#include "osediff/metrics.hpp"
#include "osediff/vsd.hpp"

using namespace osediff;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kNegativeReference =
    "painting, oil painting, illustration, drawing, art, sketch, oil painting, cartoon, "
    "CG Style, 3D render, unreal engine, blurring, dirty, messy, worst quality, low quality, "
    "frames, watermark, signature, jpeg artifacts, deformed, lowres, over-smooth";

/// Collects sub-checks of one criterion.
struct Verdict {
  bool ok = true;
  std::ostringstream note;
  std::string failures;
  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      failures += " [failed: " + what + "]";
    }
  }
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

void randomize(AdapterSet& set, uint64_t seed, double scale) {
  auto gen = make_generator(seed);
  torch::NoGradGuard no_grad;
  for (auto& p : set.parameters()) p.add_(torch::randn(p.sizes(), gen, p.scalar_type()) * scale);
}

int run_cli(const std::vector<std::string>& args, std::ostream& log) {
  std::ostringstream err;
  const int code = dispatch(args, log, err);
  if (code != 0) std::cerr << "osediff " << args.front() << " failed: " << err.str();
  return code;
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

// ---------------------------------------------------------------------------

void schedule_algebra(Verdict& v) {
  double worst_id = 0.0;
  for (auto kind : {ScheduleKind::kLinearVariance, ScheduleKind::kCosine}) {
    auto s = make_schedule(1000, kind);
    for (int64_t t = 1; t <= 1000; ++t) {
      worst_id = std::max(worst_id, std::abs(s.alpha_at(t) * s.alpha_at(t) + s.beta_at(t) * s.beta_at(t) - 1.0));
    }
  }
  auto s = testing::default_schedule();
  auto gen = make_generator(101);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const int64_t t = torch::randint(1, 1001, {1}, gen).item<int64_t>();
    auto z = torch::randn({1, 4, 8, 8}, gen, torch::kDouble);
    auto e = torch::randn({1, 4, 8, 8}, gen, torch::kDouble);
    worst = std::max(worst, testing::max_abs(one_step_denoise(forward_diffuse(z, t, e, s), e, t, s), z));
  }
  v.expect(worst_id <= 1e-6, "alpha^2 + beta^2 = 1");
  v.expect(worst <= 1e-5, "round trip");
  v.note << "max identity error " << fmt(worst_id) << ", max round-trip error " << fmt(worst);
}

void lora_equivalence(Verdict& v) {
  Config c;
  auto vae = ToyVae::create(vae_config_from(c), 1);
  auto den = Denoiser::create(denoiser_config_from(c), 2);
  den.set_max_timestep(1000);
  auto gen = make_generator(102);
  auto z = torch::randn({100, vae.config().latent_channels, 8, 8}, gen);
  auto t = torch::randint(1, 1001, {100}, gen);
  auto ctx = torch::randn({100, c.integer("text.tokens"), c.integer("text.dim")}, gen);
  auto x = torch::rand({100, 3, 32, 32}, gen) * 2 - 1;
  double zero_err = 0.0, merge_err = 0.0;
  int targets = 0;
  {
    torch::NoGradGuard no_grad;
    auto ref = den.predict_noise(z, t, ctx);
    for (const auto& spec : den.layers().adaptable()) {
      auto set = inject(den.layers().adaptable(), den.weights(), {spec.name}, 4, 1.0, AdapterOwner::kGenerator, gen);
      zero_err = std::max(zero_err, testing::max_abs(den.predict_noise(z, t, ctx, &set), ref));
      randomize(set, 103 + targets, 0.3);
      Denoiser merged(den.config(), merge(set, den.weights()));
      merged.set_max_timestep(1000);
      merge_err = std::max(merge_err, testing::max_abs(merged.predict_noise(z, t, ctx), den.predict_noise(z, t, ctx, &set)));
      ++targets;
    }
    auto eref = vae.encode(x);
    for (const auto& spec : vae.encoder_layers()) {
      auto set = inject(vae.encoder_layers(), vae.weights(), {spec.name}, 4, 1.0, AdapterOwner::kGenerator, gen);
      zero_err = std::max(zero_err, testing::max_abs(vae.encode(x, &set), eref));
      randomize(set, 103 + targets, 0.3);
      ToyVae merged(vae.config(), merge(set, vae.weights()), vae.latent_scale());
      merge_err = std::max(merge_err, testing::max_abs(merged.encode(x), vae.encode(x, &set)));
      ++targets;
    }
  }
  v.expect(zero_err <= 1e-6, "zero-init");
  v.expect(merge_err <= 1e-5, "merge");
  v.note << targets << " targets x 100 inputs, zero-init " << fmt(zero_err) << ", merge " << fmt(merge_err);
}

void vsd_oracle(Verdict& v) {
  // 2x4x4 latents; generator z = tanh(A x + b) with 18 parameters
  auto den = Denoiser::create({2, 16, 2, 8}, 5, torch::kDouble);
  den.set_max_timestep(1000);
  auto s = testing::default_schedule();
  auto gen = make_generator(104);
  auto phi_prime = inject(den.layers().adaptable(), den.weights(), {"all"}, 2, 1.0, AdapterOwner::kRegularizer, gen);
  randomize(phi_prime, 105, 0.2);
  auto cond = torch::randn({1, 4, 8}, gen, torch::kDouble);
  auto neg = repeat_prompt(testing::tiny_embedder().negative_embedding(), 1).to(torch::kDouble);
  auto A = (torch::randn({2, 8}, gen, torch::kDouble) * 0.4).requires_grad_(true);
  auto b = (torch::randn({2}, gen, torch::kDouble) * 0.1).requires_grad_(true);
  auto x = torch::randn({1, 8, 4, 4}, gen, torch::kDouble);
  auto g = [&](const torch::Tensor& a, const torch::Tensor& bias) {
    return torch::tanh(torch::einsum("ck,nkhw->nchw", {a, x}) + bias.view({1, 2, 1, 1}));
  };
  const int64_t t = 300;
  auto eps = torch::randn({1, 2, 4, 4}, gen, torch::kDouble);
  VsdConfig cfg;
  auto z_hat = g(A, b);
  auto r = reg_gradient(z_hat, cond, neg, den, phi_prime, s, t, eps, cfg);
  r.surrogate.backward();

  torch::Tensor w;
  {
    torch::NoGradGuard no_grad;
    auto zh = z_hat.detach();
    auto z_t = s.alpha_at(t) * zh + s.beta_at(t) * eps;
    auto e_c = den.predict_noise(z_t, t, cond);
    auto e_n = den.predict_noise(z_t, t, neg);
    auto e_phi = e_n + 7.5 * (e_c - e_n);
    auto e_pp = den.predict_noise(z_t, t, cond, &phi_prime);
    auto z_phi = (z_t - s.beta_at(t) * e_phi) / s.alpha_at(t);
    auto z_pp = (z_t - s.beta_at(t) * e_pp) / s.alpha_at(t);
    const double omega = 1.0 / (z_phi - zh).abs().mean().item<double>();
    w = omega * (z_pp - z_phi) / static_cast<double>(zh.numel());
  }
  const double h = 1e-6;
  double num2 = 0.0, diff2 = 0.0;
  for (int k = 0; k < 2; ++k) {
    auto analytic = (k == 0 ? A : b).grad().flatten();
    for (int64_t i = 0; i < analytic.numel(); ++i) {
      torch::NoGradGuard no_grad;
      auto pa = A.detach().clone(), pb = b.detach().clone();
      auto ma = A.detach().clone(), mb = b.detach().clone();
      (k == 0 ? pa : pb).view({-1})[i] += h;
      (k == 0 ? ma : mb).view({-1})[i] -= h;
      const double numeric = (((g(pa, pb) - g(ma, mb)) / (2 * h)) * w).sum().item<double>();
      const double a = analytic[i].item<double>();
      num2 += numeric * numeric;
      diff2 += (a - numeric) * (a - numeric);
    }
  }
  const double rel = std::sqrt(diff2 / num2);

  double ident = 0.0;
  for (int64_t tt : {20, 300, 700, 980}) {
    auto p = regularizer_predict(z_hat.detach(), cond, neg, den, phi_prime, s, tt, eps, cfg);
    auto lhs = p.omega * (p.z_phi_prime - p.z_phi);
    auto rhs = p.omega * (s.beta_at(tt) / s.alpha_at(tt)) * (p.eps_phi - p.eps_phi_prime);
    ident = std::max(ident, testing::max_abs(lhs, rhs));
  }
  v.expect(rel <= 1e-3, "finite-difference gradient");
  v.expect(ident <= 1e-6, "beta/alpha identity");
  v.note << "18 parameters, relative error " << fmt(rel) << ", identity error " << fmt(ident);
}

void stop_gradient(Verdict& v) {
  auto den = testing::tiny_denoiser();
  auto s = testing::default_schedule();
  auto gen = make_generator(106);
  auto phi_prime = inject(den.layers().adaptable(), den.weights(), {"all"}, 4, 1.0, AdapterOwner::kRegularizer, gen);
  randomize(phi_prime, 107, 0.2);
  for (auto& [n, w] : den.mutable_weights()) w.set_requires_grad(true);
  phi_prime.set_requires_grad(true);
  auto theta = torch::randn({2, 4, 4, 4}, gen).requires_grad_(true);
  auto cond = torch::randn({2, 4, 8}, gen);
  auto neg = repeat_prompt(testing::tiny_embedder().negative_embedding(), 2);

  auto r = reg_gradient(theta * 1.5, cond, neg, den, phi_prime, s, gen, VsdConfig{});
  r.surrogate.backward();
  bool leak = false;
  for (auto& [n, w] : den.mutable_weights()) leak |= w.grad().defined();
  for (auto& p : phi_prime.parameters()) leak |= p.grad().defined();
  v.expect(!leak && theta.grad().abs().max().item<double>() > 0, "reg_gradient reaches only theta");

  theta.mutable_grad() = torch::Tensor();
  for (auto& [n, w] : den.mutable_weights()) w.set_requires_grad(false);
  regularizer_loss(theta * 1.5, cond, den, phi_prime, s, gen).backward();
  bool phi_moved = true;
  for (auto& p : phi_prime.parameters()) phi_moved &= p.grad().defined();
  bool leak2 = theta.grad().defined();
  for (auto& [n, w] : den.mutable_weights()) leak2 |= w.grad().defined();
  v.expect(!leak2 && phi_moved, "regularizer_loss reaches only phi'");

  auto trainer = testing::tiny_trainer(testing::tiny_trainer_config());
  auto snap = [](const AdapterSet& a) {
    std::vector<torch::Tensor> o;
    for (const auto& p : a.parameters()) o.push_back(p.detach().clone());
    return o;
  };
  auto same_as = [](const std::vector<torch::Tensor>& before, const AdapterSet& a) {
    auto now = a.parameters();
    for (size_t i = 0; i < now.size(); ++i) {
      if (!torch::equal(before[i], now[i])) return false;
    }
    return true;
  };
  const auto vae0 = clone_weights(trainer.vae().weights());
  const auto den0 = clone_weights(trainer.denoiser().weights());
  auto th = snap(trainer.theta());
  auto ph = snap(trainer.phi_prime());
  bool phases_ok = true;
  trainer.set_phase_observer([&](int phase) {
    if (phase == 1) {
      phases_ok &= !same_as(th, trainer.theta()) && same_as(ph, trainer.phi_prime());
      th = snap(trainer.theta());
    } else {
      phases_ok &= same_as(th, trainer.theta()) && !same_as(ph, trainer.phi_prime());
      ph = snap(trainer.phi_prime());
    }
  });
  for (int i = 0; i < 3; ++i) trainer.step();
  phases_ok &= weights_equal(trainer.vae().weights(), vae0) && weights_equal(trainer.denoiser().weights(), den0);
  v.expect(phases_ok, "two-phase step");
  v.note << "reg_gradient, regularizer_loss and 3 two-phase steps audited";
}

void cfg_identities(Verdict& v) {
  auto den = testing::tiny_denoiser();
  auto gen = make_generator(108);
  auto z = torch::randn({4, 4, 4, 4}, gen);
  auto t = torch::randint(1, 1001, {4}, gen);
  auto cond = torch::randn({4, 4, 8}, gen);
  auto neg = torch::randn({4, 4, 8}, gen);
  torch::NoGradGuard no_grad;
  const auto e_cond = den.predict_noise(z, t, cond);
  v.expect(torch::equal(cfg_predict(den, z, t, cond, neg, 1.0), e_cond), "s = 1");
  bool equal_prompt = true;
  for (double s : {0.0, 2.0, 7.5, 20.0}) {
    equal_prompt &= torch::equal(cfg_predict(den, z, t, cond, cond, s), e_cond);
  }
  v.expect(equal_prompt, "equal prompts");
  auto resolved = json::parse(Config().echo());
  v.expect(resolved.at("train.cfg_scale") == 7.5, "default scale");
  v.expect(resolved.at("prompt.negative") == kNegativeReference, "negative prompt");
  v.note << "resolved cfg_scale " << resolved.at("train.cfg_scale").get<double>();
}

void determinism(Verdict& v) {
  auto base = fs::temp_directory_path() / ("osediff-accept-det-" + std::to_string(::getpid()));
  fs::remove_all(base);
  DegradationConfig dc;
  synthesize_dataset("procedural", 40, dc, 7, base / "a", 32);
  synthesize_dataset("procedural", 40, dc, 7, base / "b", 32);
  bool bytes_equal = true;
  for (const auto& e : fs::recursive_directory_iterator(base / "a")) {
    if (!e.is_regular_file()) continue;
    bytes_equal &= read_file(e.path()) == read_file(base / "b" / fs::relative(e.path(), base / "a"));
  }
  v.expect(bytes_equal, "degrade");
  fs::remove_all(base);

  auto cfg = testing::tiny_trainer_config();
  auto full = testing::tiny_trainer(cfg);
  auto twin = testing::tiny_trainer(cfg);
  std::vector<json> la, lb;
  full.train(10, [&](const json& j) { la.push_back(j); });
  twin.train(10, [&](const json& j) { lb.push_back(j); });
  v.expect(la == lb && weights_equal(full.state_arrays(), twin.state_arrays()), "train");

  auto d = testing::tiny_dataset(6, 9);
  v.expect(torch::equal(restore(d.lq, full.bundle()), restore(d.lq, twin.bundle())), "restore");

  auto first = testing::tiny_trainer(cfg);
  std::vector<json> lr;
  first.train(4, [&](const json& j) { lr.push_back(j); });
  Checkpoint ck;
  ck.arrays = first.state_arrays();
  auto dir = fs::temp_directory_path() / ("osediff-accept-resume-" + std::to_string(::getpid()));
  save_checkpoint(dir, ck);
  auto second = testing::tiny_trainer(cfg);
  second.load_state_arrays(load_checkpoint(dir).arrays, 4);
  second.train(10, [&](const json& j) { lr.push_back(j); });
  fs::remove_all(dir);
  v.expect(lr == la && weights_equal(second.state_arrays(), full.state_arrays()), "resume");
  v.note << "40-pair degrade, 10-step train, restore, resume at step 4";
}

void metric_oracles(Verdict& v) {
  auto x = procedural_texture(TextureClass::kChecker, 32, 3);
  v.expect(psnr(x, x) == 99.0, "PSNR cap");
  v.expect(std::abs(ssim(x, x) - 1.0) <= 1e-12, "SSIM one");
  auto g = make_generator(109);
  auto base = torch::rand({3, 32, 32}, g) * 0.4 - 0.2;
  const double closed = 20.0 * std::log10(255.0 / 16.0);
  const double got = psnr(base + 2.0 * 16.0 / 219.0, base);
  v.expect(std::abs(got - closed) <= 0.01, "luma offset");
  const double r = 1.0 / std::sqrt(2.0);
  auto col = [](std::vector<double> a) { return torch::tensor(a, torch::kDouble).view({-1, 1}); };
  const double f1 = toy_frechet(col({r, -r}), col({std::sqrt(2.0), -std::sqrt(2.0)}));
  const double f2 = toy_frechet(col({r, -r}), col({1 + r, 1 - r}));
  v.expect(std::abs(f1 - 1.0) <= 1e-6 && std::abs(f2 - 1.0) <= 1e-6, "1-D Frechet");
  v.note << "16-level luma offset " << fmt(got) << " dB (closed form " << fmt(closed) << "), Frechet " << fmt(f1)
         << ", " << fmt(f2);
}

void single_step(Verdict& v, const fs::path& student) {
  auto t = testing::tiny_trainer(testing::tiny_trainer_config());
  auto d = testing::tiny_dataset(5, 4);
  const auto& den = t.denoiser();
  bool ok = true;
  for (int64_t n : {1, 5}) {
    den.reset_forward_count();
    restore(d.lq.slice(0, 0, n), t.bundle());
    ok &= den.forward_count() == 1;
  }
  if (!student.empty() && fs::exists(student)) {
    auto ck = load_checkpoint(student);
    Config c(ck.config);
    auto vae = vae_from_checkpoint(ck);
    auto sd = denoiser_from_checkpoint(ck);
    auto theta = theta_from_checkpoint(ck, vae, sd);
    auto emb = embedder_from(c);
    auto ex = make_extractor(c.text("prompt.extractor"));
    GeneratorBundle b{&vae, &sd, schedule_from(c), &theta, &emb, ex.get(), c.flag("train.precondition")};
    auto x = torch::rand({8, 3, 32, 32}, make_generator(110)) * 2 - 1;
    sd.reset_forward_count();
    restore(x, b);
    ok &= sd.forward_count() == 1;
    v.note << "toy-32 student and tiny model: ";
  }
  v.expect(ok, "one forward per restore");
  v.note << "one denoiser forward per restore call";
}

// ---------------------------------------------------------------------------
// toy-32 pipeline

struct Pipeline {
  fs::path dir;
  std::string config;
  bool built = false;
  bool ok = false;

  std::vector<std::string> common(const std::string& out) const {
    return {"--config", config, "--data", (dir / "data").string(), "--out", (dir / out).string()};
  }

  void run(std::ostream& log) {
    if (built) return;
    built = true;
    auto cat = [](std::vector<std::string> a, const std::vector<std::string>& b) {
      a.insert(a.end(), b.begin(), b.end());
      return a;
    };
    const auto teacher = (dir / "teacher" / "checkpoint").string();
    ok = run_cli({"degrade", "--config", config, "--out", (dir / "data").string()}, log) == 0 &&
         run_cli(cat({"pretrain-vae"}, common("vae")), log) == 0 &&
         run_cli(cat(cat({"pretrain-teacher"}, common("teacher")),
                     {"--from", (dir / "vae" / "checkpoint").string()}),
                 log) == 0 &&
         run_cli(cat(cat({"train-osediff"}, common("student")), {"--from", teacher}), log) == 0;
  }
};

void end_to_end(Verdict& v, Pipeline& p, std::ostream& log) {
  p.run(log);
  v.expect(p.ok, "pipeline completed");
  if (!p.ok) return;
  auto m = load_checkpoint(p.dir / "student" / "checkpoint").manifest.at("heldout");
  const double sp = m["student"]["psnr"], bp = m["bicubic"]["psnr"];
  const double sf = m["student"]["toy_frechet"], bf = m["bicubic"]["toy_frechet"];
  auto tm = load_checkpoint(p.dir / "teacher" / "checkpoint").manifest;
  v.expect(sp >= bp + 0.5, "PSNR margin");
  v.expect(sf < bf, "toy-Frechet");
  v.note << "student " << fmt(sp) << " dB vs bicubic " << fmt(bp) << " dB; toy-Frechet " << fmt(sf) << " vs "
         << fmt(bf) << "; teacher 50-step Frechet " << fmt(tm.value("teacher_sample_frechet", -1.0));
}

double median_seconds(const std::function<void()>& fn, int reps) {
  fn();
  std::vector<double> t;
  for (int i = 0; i < reps; ++i) {
    auto a = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

void speedup(Verdict& v, Pipeline& p, std::ostream& log) {
  p.run(log);
  v.expect(p.ok, "pipeline completed");
  if (!p.ok) return;
  auto ck = load_checkpoint(p.dir / "student" / "checkpoint");
  Config c(ck.config);
  auto vae = vae_from_checkpoint(ck);
  auto den = denoiser_from_checkpoint(ck);
  auto theta = theta_from_checkpoint(ck, vae, den);
  auto emb = embedder_from(c);
  auto ex = make_extractor(c.text("prompt.extractor"));
  const auto schedule = schedule_from(c);
  GeneratorBundle b{&vae, &den, schedule, &theta, &emb, ex.get(), c.flag("train.precondition")};
  auto data = load_dataset(p.dir / "data");
  const int64_t n = 16;
  auto lq = data.lq.slice(0, data.size() - n, data.size());
  torch::NoGradGuard no_grad;
  auto ctx = extract_prompts(lq, b);
  auto z_shape = vae.encode(lq.slice(0, 0, 1)).sizes().vec();
  z_shape[0] = n;
  auto noise = torch::randn(z_shape, make_generator(111));
  const double student = median_seconds([&] { restore(lq, b); }, 7);
  const double teacher = median_seconds([&] { sample_teacher(noise, 50, ctx, den, schedule, vae); }, 3);
  v.expect(teacher >= 10.0 * student, "10x");
  v.note << "batch " << n << " at 32x32: one-step " << fmt(student * 1e3) << " ms, 50-step teacher "
         << fmt(teacher * 1e3) << " ms, ratio " << fmt(teacher / student);
}

void ablations(Verdict& v, Pipeline& p, std::ostream& log) {
  p.run(log);
  v.expect(p.ok, "pipeline completed");
  if (!p.ok) return;
  const auto teacher = (p.dir / "teacher" / "checkpoint").string();
  auto train = [&](const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> a{"train-osediff"};
    for (const auto& s : p.common(out)) a.push_back(s);
    a.insert(a.end(), {"--from", teacher, "--set", "train.iterations=40"});
    a.insert(a.end(), extra.begin(), extra.end());
    return run_cli(a, log) == 0;
  };
  const bool runs = train("abl-default", {}) && train("abl-lambda0", {"--set", "train.lambda2=0"}) &&
                    train("abl-null", {"--set", "prompt.extractor=null"});
  v.expect(runs, "ablation runs completed");
  if (!runs) return;
  auto reg_norms = [&](const std::string& out) {
    std::vector<double> r;
    for (const auto& j : read_jsonl(p.dir / out / "train.jsonl")) {
      if (j.contains("reg_grad_norm")) r.push_back(j["reg_grad_norm"]);
    }
    return r;
  };
  auto d0 = reg_norms("abl-default");
  auto l0 = reg_norms("abl-lambda0");
  const double max_l0 = l0.empty() ? -1 : *std::max_element(l0.begin(), l0.end());
  double mean_d = 0;
  for (double x : d0) mean_d += x / d0.size();
  v.expect(l0.size() == 40 && max_l0 == 0.0 && mean_d > 0.0, "lambda2 = 0");

  const auto lq = (p.dir / "data" / "lq").string();
  auto infer = [&](const std::string& ck, const std::string& out) {
    return run_cli({"infer", "--checkpoint", (p.dir / ck / "checkpoint").string(), "--input", lq, "--output",
                    (p.dir / out).string()},
                   log) == 0;
  };
  bool differ = false;
  if (infer("abl-default", "out-tag") && infer("abl-null", "out-null")) {
    auto a = list_pngs(p.dir / "out-tag");
    for (size_t i = 0; i < a.size() && !differ; ++i) {
      differ = read_file(a[i]) != read_file(p.dir / "out-null" / a[i].filename());
    }
  }
  v.expect(differ, "null vs tag-stub outputs differ");
  v.note << "lambda2=0 max reg grad norm " << fmt(max_l0) << " vs default mean " << fmt(mean_d)
         << "; null and tag-stub students " << (differ ? "differ" : "agree");
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(std::max(1, static_cast<int>(std::thread::hardware_concurrency())));
  Pipeline pipe;
  pipe.dir = argc > 1 ? fs::path(argv[1])
                      : fs::temp_directory_path() / ("osediff-acceptance-" + std::to_string(::getpid()));
  pipe.config = (fs::path(OSEDIFF_SOURCE_DIR) / "configs" / "toy-32.json").string();
  fs::remove_all(pipe.dir);
  fs::create_directories(pipe.dir);
  std::ofstream log(pipe.dir / "acceptance.log");

  const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> criteria{
      {"schedule algebra", schedule_algebra},
      {"LoRA zero-init and merge", lora_equivalence},
      {"VSD gradient oracle", vsd_oracle},
      {"stop-gradient audit", stop_gradient},
      {"CFG identities", cfg_identities},
      {"determinism", determinism},
      {"metric oracles", metric_oracles},
      {"toy-32 distillation beats bicubic", [&](Verdict& v) { end_to_end(v, pipe, log); }},
      {"one-step speedup", [&](Verdict& v) { speedup(v, pipe, log); }},
      {"single-step audit", [&](Verdict& v) { single_step(v, pipe.ok ? pipe.dir / "student" / "checkpoint" : fs::path()); }},
      {"ablation switches", [&](Verdict& v) { ablations(v, pipe, log); }},
  };

  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      criteria[i].second(v);
    } catch (const std::exception& e) {
      v.ok = false;
      v.failures += std::string(" [exception: ") + e.what() + "]";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += v.ok ? 0 : 1;
    std::ostringstream line;
    line << (v.ok ? "PASS " : "FAIL ") << (i + 1) << " " << criteria[i].first << ": " << v.note.str() << v.failures << " ("
         << fmt(secs) << " s)";
    std::cout << line.str() << std::endl;
    log << line.str() << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  if (failed == 0 && argc <= 1) fs::remove_all(pipe.dir);
  return failed == 0 ? 0 : 1;
}
