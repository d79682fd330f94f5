#include <torch/torch.h>

#undef CHECK  // c10 logging macro
#include "doctest.h"
#include "helpers.hpp"
#include "osediff/checkpoint.hpp"
#include "osediff/errors.hpp"
#include "osediff/trainer.hpp"

using namespace osediff;

namespace {

std::vector<torch::Tensor> snapshot(const AdapterSet& set) {
  std::vector<torch::Tensor> out;
  for (const auto& p : set.parameters()) out.push_back(p.detach().clone());
  return out;
}

bool unchanged(const std::vector<torch::Tensor>& before, const AdapterSet& set) {
  auto now = set.parameters();
  for (size_t i = 0; i < now.size(); ++i) {
    if (!torch::equal(before[i], now[i])) return false;
  }
  return true;
}

double total_norm(const std::vector<torch::Tensor>& g) {
  double s = 0;
  for (const auto& t : g) s += t.square().sum().item<double>();
  return std::sqrt(s);
}

Config tiny_config() {
  Config c;
  for (const char* kv :
       {"vae.width=8", "vae.steps=4", "vae.batch=4", "vae.psnr_floor=0", "text.tokens=4", "text.dim=8",
        "teacher.width=16", "teacher.heads=2", "teacher.steps=4", "teacher.batch=4", "teacher.eval_every=2",
        "teacher.sample_steps=3", "teacher.sample_count=24"}) {
    c.apply_override(kv);
  }
  return c;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("without the distillation term only the data loss drives theta") {
    auto cfg = testing::tiny_trainer_config();
    cfg.lambda2 = 0.0;
    auto t = testing::tiny_trainer(cfg);
    auto reg = t.theta_gradients(0, GradTerms::kReg);
    CHECK(total_norm(reg) == 0.0);
    auto both = t.theta_gradients(0, GradTerms::kBoth);
    auto data = t.theta_gradients(0, GradTerms::kData);
    for (size_t i = 0; i < both.size(); ++i) CHECK(testing::same(both[i], data[i]));
    auto log = t.step();
    CHECK(log.reg_grad_norm == 0.0);
    CHECK(log.l_reg == 0.0);
  }

  TEST_CASE("coinciding scores leave only the data gradient") {
    auto cfg = testing::tiny_trainer_config();
    cfg.vsd.cfg_scale = 1.0;
    auto t = testing::tiny_trainer(cfg);
    // phi' at its zero init equals phi; guidance at scale one ignores the negative prompt
    auto both = t.theta_gradients(0, GradTerms::kBoth);
    auto data = t.theta_gradients(0, GradTerms::kData);
    CHECK(total_norm(t.theta_gradients(0, GradTerms::kReg)) == 0.0);
    for (size_t i = 0; i < both.size(); ++i) CHECK(testing::max_abs(both[i], data[i]) <= 1e-7);
  }

  TEST_CASE("gradient of the sum is the sum of the gradients") {
    auto t = testing::tiny_trainer(testing::tiny_trainer_config());
    auto both = t.theta_gradients(3, GradTerms::kBoth);
    auto data = t.theta_gradients(3, GradTerms::kData);
    auto reg = t.theta_gradients(3, GradTerms::kReg);
    CHECK(total_norm(reg) > 0.0);
    // float32 accumulation order differs between the fused and split backward passes
    for (size_t i = 0; i < both.size(); ++i) {
      CHECK((both[i] - data[i] - reg[i]).norm().item<double>() <= 1e-5 * both[i].norm().item<double>() + 1e-9);
    }
  }

  TEST_CASE("each phase moves only its own adapters") {
    auto t = testing::tiny_trainer(testing::tiny_trainer_config());
    const auto vae_before = clone_weights(t.vae().weights());
    const auto den_before = clone_weights(t.denoiser().weights());
    auto theta0 = snapshot(t.theta());
    auto phi0 = snapshot(t.phi_prime());
    std::vector<int> phases;
    bool ok1 = false, ok2 = false;
    t.set_phase_observer([&](int phase) {
      phases.push_back(phase);
      if (phase == 1) {
        ok1 = !unchanged(theta0, t.theta()) && unchanged(phi0, t.phi_prime());
        theta0 = snapshot(t.theta());
      } else {
        ok2 = unchanged(theta0, t.theta()) && !unchanged(phi0, t.phi_prime());
      }
    });
    t.step();
    CHECK(phases == std::vector<int>{1, 2});
    CHECK(ok1);
    CHECK(ok2);
    CHECK(weights_equal(t.vae().weights(), vae_before));
    CHECK(weights_equal(t.denoiser().weights(), den_before));
  }

  TEST_CASE("identical seeds give identical trajectories") {
    auto cfg = testing::tiny_trainer_config();
    auto a = testing::tiny_trainer(cfg);
    auto b = testing::tiny_trainer(cfg);
    for (int i = 0; i < 3; ++i) {
      auto la = a.step();
      auto lb = b.step();
      CHECK(la.to_json() == lb.to_json());
    }
    auto pa = a.theta().parameters();
    auto pb = b.theta().parameters();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(testing::same(pa[i], pb[i]));
    cfg.seed = 12;
    auto c = testing::tiny_trainer(cfg);
    CHECK(c.step().to_json() != testing::tiny_trainer(testing::tiny_trainer_config()).step().to_json());
  }

  TEST_CASE("zero iterations reproduce the teacher composition") {
    auto t = testing::tiny_trainer(testing::tiny_trainer_config());
    auto d = testing::tiny_dataset(4, 9);
    auto b = t.bundle();
    auto student = restore(d.lq, b);
    b.adapters = nullptr;
    CHECK(testing::same(student, restore(d.lq, b)));
  }

  TEST_CASE("resume through a checkpoint matches an uninterrupted run") {
    auto cfg = testing::tiny_trainer_config();
    auto full = testing::tiny_trainer(cfg);
    std::vector<nlohmann::json> logs_full;
    full.train(10, [&](const nlohmann::json& j) { logs_full.push_back(j); });

    auto first = testing::tiny_trainer(cfg);
    std::vector<nlohmann::json> logs;
    first.train(4, [&](const nlohmann::json& j) { logs.push_back(j); });
    auto dir = testing::scratch_dir("resume");
    Checkpoint ck;
    ck.arrays = first.state_arrays();
    save_checkpoint(dir / "ckpt", ck);

    auto second = testing::tiny_trainer(cfg);
    second.load_state_arrays(load_checkpoint(dir / "ckpt").arrays, 4);
    CHECK(second.iteration() == 4);
    second.train(10, [&](const nlohmann::json& j) { logs.push_back(j); });
    REQUIRE(logs.size() == logs_full.size());
    for (size_t i = 0; i < logs.size(); ++i) CHECK(logs[i] == logs_full[i]);
    auto a = full.state_arrays();
    auto b = second.state_arrays();
    CHECK(weights_equal(a, b));
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("non-finite losses abort with the offending seeds") {
    auto cfg = testing::tiny_trainer_config();
    auto t = testing::tiny_trainer(cfg);
    {
      torch::NoGradGuard no_grad;
      t.theta().parameters().back().fill_(std::numeric_limits<float>::quiet_NaN());
    }
    try {
      t.step();
      FAIL("expected a training failure");
    } catch (const TrainingFailure& e) {
      CHECK(std::string(e.what()).find("batch seed") != std::string::npos);
    }
  }

  TEST_CASE("configuration checks") {
    auto cfg = testing::tiny_trainer_config();
    cfg.lambda2 = -1;
    CHECK_THROWS_AS(testing::tiny_trainer(cfg), ConfigError);
    cfg = testing::tiny_trainer_config();
    cfg.targets = {"decoder.*"};
    CHECK_THROWS_AS(testing::tiny_trainer(cfg), ConfigError);
    cfg = testing::tiny_trainer_config();
    cfg.extractor = "dape";
    CHECK_THROWS_AS(testing::tiny_trainer(cfg), ConfigError);
    OsediffTrainer empty(testing::tiny_vae(), testing::tiny_denoiser(), testing::default_schedule(),
                         testing::tiny_embedder(), testing::tiny_trainer_config());
    CHECK_THROWS_AS(empty.step(), ConfigError);
    CHECK_THROWS_AS(empty.set_dataset(Dataset{}), ConfigError);
    Config c;
    c.set("train.omega", "l7");
    CHECK_THROWS_AS(trainer_config_from(c), ConfigError);
  }

  TEST_CASE("adapter targets split between encoder and denoiser") {
    auto cfg = testing::tiny_trainer_config();
    cfg.targets = {"encoder.*"};
    auto t = testing::tiny_trainer(cfg);
    for (const auto& [name, l] : t.theta()) CHECK(name.rfind("encoder.", 0) == 0);
    CHECK(t.phi_prime().size() == t.denoiser().layers().adaptable().size());
    cfg.targets = {"unet.conv_in", "encoder.conv_in"};
    auto u = testing::tiny_trainer(cfg);
    CHECK(u.theta().size() == 2);
    CHECK(u.phi_prime().size() == 1);
  }

  TEST_CASE("teacher sampler") {
    auto den = testing::tiny_denoiser();
    auto s = testing::default_schedule();
    auto noise = torch::randn({2, 4, 4, 4}, make_generator(1));
    auto ctx = torch::randn({2, 4, 8}, make_generator(2));
    bool ill = true;
    auto a = sample_teacher_latents(noise, 5, ctx, den, s, &ill);
    CHECK_FALSE(ill);
    CHECK(testing::same(a, sample_teacher_latents(noise, 5, ctx, den, s)));
    den.reset_forward_count();
    sample_teacher_latents(noise, 5, ctx, den, s);
    CHECK(den.forward_count() == 5);
    sample_teacher_latents(noise, 1, ctx, den, s, &ill);
    CHECK(ill);
    CHECK_THROWS_AS(sample_teacher_latents(noise, 0, ctx, den, s), RangeError);
  }

  TEST_CASE("pretraining is seeded") {
    auto c = tiny_config();
    auto d = testing::tiny_dataset(24, 4, 16);
    auto v1 = pretrain_vae(d.hq, d.hq.slice(0, 0, 4), c, 3);
    auto v2 = pretrain_vae(d.hq, d.hq.slice(0, 0, 4), c, 3);
    CHECK(weights_equal(v1.vae.weights(), v2.vae.weights()));
    CHECK(v1.vae.latent_scale() == v2.vae.latent_scale());
    CHECK(v1.roundtrip_threshold == doctest::Approx(1.5 * v1.roundtrip_mae));
    CHECK_THROWS_AS(pretrain_vae(torch::Tensor(), torch::Tensor(), c, 3), ConfigError);
    auto floor = c;
    floor.set("vae.psnr_floor", 98.0);
    CHECK_THROWS_AS(pretrain_vae(d.hq, d.hq, floor, 3), TrainingFailure);

    auto s = testing::default_schedule();
    auto emb = embedder_from(c);
    auto t1 = pretrain_teacher(v1.vae, d, d.slice(0, 4), s, emb, c, 5);
    auto t2 = pretrain_teacher(v1.vae, d, d.slice(0, 4), s, emb, c, 5);
    CHECK(weights_equal(t1.denoiser.weights(), t2.denoiser.weights()));
    CHECK(t1.heldout_curve == t2.heldout_curve);
    CHECK(t1.heldout_curve.size() == 2);
    CHECK(t1.sample_frechet == t2.sample_frechet);
    auto strict = c;
    strict.set("teacher.frechet_floor", 1e-12);
    CHECK_THROWS_AS(pretrain_teacher(v1.vae, d, d.slice(0, 4), s, emb, strict, 5), TrainingFailure);
    CHECK_THROWS_AS(pretrain_teacher(v1.vae, Dataset{}, d, s, emb, c, 5), ConfigError);
    auto lq_negative = c;
    lq_negative.set("teacher.negative_latents", "lq");
    auto t3 = pretrain_teacher(v1.vae, d, d.slice(0, 4), s, emb, lq_negative, 5);
    CHECK_FALSE(weights_equal(t3.denoiser.weights(), t1.denoiser.weights()));
    lq_negative.set("teacher.negative_latents", "mid");
    CHECK_THROWS_AS(pretrain_teacher(v1.vae, d, d.slice(0, 4), s, emb, lq_negative, 5), ConfigError);
  }
}
