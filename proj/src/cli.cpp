#include "osediff/cli.hpp"

#include <fcntl.h>
#include <signal.h>
#include <torch/torch.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "osediff/errors.hpp"
#include "osediff/image.hpp"
#include "osediff/trainer.hpp"

namespace osediff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Exclusive claim on an output directory for the lifetime of a run.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".osediff.lock") {
    fs::create_directories(dir);
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const auto pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
        return;
      }
      if (attempt == 0 && stale()) {
        fs::remove(path_);
        continue;
      }
    }
    throw ConfigError("output directory " + dir.string() + " is in use by another run (" +
                      path_.string() + ")");
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  bool stale() const {
    std::ifstream in(path_);
    long pid = 0;
    if (!(in >> pid) || pid <= 0) {
      return true;
    }
    return ::kill(static_cast<pid_t>(pid), 0) != 0 && errno == ESRCH;
  }
  fs::path path_;
};

void check_device() {
  const char* env = std::getenv("OSD_DEVICE");
  const std::string dev = env == nullptr ? "cpu" : env;
  if (dev.empty() || dev == "cpu") {
    return;
  }
  throw ConfigError("OSD_DEVICE=" + dev + " is not available; this build runs on cpu only");
}

Config load_config(const std::string& path, const std::vector<std::string>& overrides,
                   std::optional<int64_t> seed) {
  Config c;
  if (!path.empty()) {
    c = Config::from_file(path, overrides);
  } else {
    for (const auto& o : overrides) {
      c.apply_override(o);
    }
  }
  if (seed) {
    c.set("seed", *seed);
  }
  return c;
}

void write_echo(const fs::path& out, const Config& c) {
  write_file_atomic(out / "config.resolved.json", c.echo() + "\n");
}

std::pair<Dataset, Dataset> split_dataset(const fs::path& dir, const Config& c) {
  auto all = load_dataset(dir);
  const int64_t hold = c.integer("data.holdout");
  if (hold < 0 || hold >= all.size()) {
    throw ConfigError("data.holdout = " + std::to_string(hold) + " leaves no training pairs in " +
                      dir.string() + " (" + std::to_string(all.size()) + " pairs)");
  }
  return {all.slice(0, all.size() - hold), all.slice(all.size() - hold, all.size())};
}

/// Keys that fix the architecture of a stored model; a downstream stage
/// must agree with its upstream checkpoint on all of them.
void require_same(const Config& c, const Checkpoint& upstream, const std::vector<std::string>& keys) {
  const Config up(upstream.config);
  for (const auto& k : keys) {
    if (c.at(k) != up.at(k)) {
      throw ConfigError("config key '" + k + "' is " + c.at(k).dump() + " but the upstream checkpoint used " +
                        up.at(k).dump());
    }
  }
}

const std::vector<std::string> kVaeKeys{"vae.latent_channels", "vae.factor", "vae.width"};
const std::vector<std::string> kTeacherKeys{"vae.latent_channels", "vae.factor", "vae.width",
                                            "teacher.width", "teacher.heads", "text.tokens",
                                            "text.dim", "text.seed", "schedule.T",
                                            "schedule.kind", "schedule.beta_start",
                                            "schedule.beta_end"};

json dataset_ref(const fs::path& dir, const Dataset& d) {
  return json{{"path", fs::absolute(dir).string()},
              {"config_hash", d.manifest.value("config_hash", std::string())},
              {"seed", d.manifest.value("seed", json(nullptr))}};
}

LogFn jsonl_logger(std::ostream& file, std::ostream& console, bool echo) {
  return [&file, &console, echo](const json& j) {
    file << j.dump() << "\n";
    file.flush();
    if (echo) {
      console << j.dump() << "\n";
    }
  };
}

struct Common {
  std::string config;
  std::string data;
  std::string out;
  std::optional<int64_t> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Common& c, bool data_required) {
  sub->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  auto* d = sub->add_option("--data", c.data, "dataset directory");
  if (data_required) {
    d->required();
  }
  sub->add_option("--out", c.out, "output directory")->required();
  sub->add_option("--seed", c.seed, "seed (overrides the config)");
  sub->add_option("--set", c.overrides, "key=value override (repeatable)");
}

// ---------------------------------------------------------------------------

int cmd_degrade(const std::string& source, std::optional<int64_t> count, Common& a, std::ostream& out) {
  const auto c = load_config(a.config, a.overrides, a.seed);
  const fs::path dir(a.out);
  OutputLock lock(dir);
  const int64_t n = count ? *count : c.integer("data.count") + c.integer("data.holdout");
  auto manifest = synthesize_dataset(source, n, degradation_from(c), static_cast<uint64_t>(c.integer("seed")),
                                     dir, c.integer("data.size"));
  write_echo(dir, c);
  out << "wrote " << n << " pairs to " << dir.string() << " (config " << manifest.value("config_hash", "")
      << ")\n";
  return 0;
}

int cmd_pretrain_vae(Common& a, std::ostream& out) {
  const auto c = load_config(a.config, a.overrides, a.seed);
  const fs::path dir(a.out);
  OutputLock lock(dir);
  write_echo(dir, c);
  auto [train, hold] = split_dataset(a.data, c);
  std::ofstream log(dir / "pretrain-vae.jsonl");
  const auto seed = static_cast<uint64_t>(c.integer("seed"));
  auto r = pretrain_vae(train.hq, hold.hq, c, seed, jsonl_logger(log, out, false));
  Checkpoint ckpt;
  ckpt.config = c.values();
  put_models(ckpt, &r.vae, nullptr, nullptr);
  ckpt.manifest["stage"] = "vae";
  ckpt.manifest["seed"] = seed;
  ckpt.manifest["data"] = dataset_ref(a.data, train);
  ckpt.manifest["vae_holdout_psnr"] = r.holdout_psnr;
  ckpt.manifest["roundtrip_mae"] = r.roundtrip_mae;
  ckpt.manifest["roundtrip_threshold"] = r.roundtrip_threshold;
  ckpt.manifest["git"] = git_hash();
  ckpt.manifest["config_hash"] = json_hash(c.values());
  save_checkpoint(dir / "checkpoint", ckpt);
  out << "vae: held-out PSNR " << r.holdout_psnr << " dB, round-trip MAE " << r.roundtrip_mae << "\n";
  return 0;
}

int cmd_pretrain_teacher(Common& a, const std::string& from, std::ostream& out) {
  const auto c = load_config(a.config, a.overrides, a.seed);
  const auto up = load_checkpoint(from);
  require_same(c, up, kVaeKeys);
  const fs::path dir(a.out);
  OutputLock lock(dir);
  write_echo(dir, c);
  auto vae = vae_from_checkpoint(up);
  auto [train, hold] = split_dataset(a.data, c);
  std::ofstream log(dir / "pretrain-teacher.jsonl");
  const auto seed = static_cast<uint64_t>(c.integer("seed"));
  const auto schedule = schedule_from(c);
  auto r = pretrain_teacher(vae, train, hold, schedule, embedder_from(c), c, seed,
                            jsonl_logger(log, out, false));
  Checkpoint ckpt;
  ckpt.config = c.values();
  ckpt.manifest = up.manifest;
  put_models(ckpt, &vae, &r.denoiser, &schedule);
  ckpt.manifest["stage"] = "teacher";
  ckpt.manifest["seed"] = seed;
  ckpt.manifest["data"] = dataset_ref(a.data, train);
  ckpt.manifest["teacher_heldout_curve"] = r.heldout_curve;
  ckpt.manifest["teacher_sample_frechet"] = r.sample_frechet;
  ckpt.manifest["teacher_frechet_floor"] = c.number("teacher.frechet_floor");
  ckpt.manifest["git"] = git_hash();
  ckpt.manifest["config_hash"] = json_hash(c.values());
  save_checkpoint(dir / "checkpoint", ckpt);
  out << "teacher: " << c.integer("teacher.sample_steps") << "-step sample toy-Frechet " << r.sample_frechet
      << "\n";
  return 0;
}

int cmd_train(Common& a, const std::string& from, const std::string& resume, std::ostream& out) {
  const auto c = load_config(a.config, a.overrides, a.seed);
  if (from.empty()) {
    throw ConfigError("train-osediff needs --from <teacher checkpoint>");
  }
  const auto up = load_checkpoint(from);
  if (select_prefix(up.arrays, "denoiser/").empty()) {
    throw ConfigError("checkpoint " + from + " holds no teacher; run pretrain-teacher first");
  }
  require_same(c, up, kTeacherKeys);
  const fs::path dir(a.out);
  OutputLock lock(dir);
  write_echo(dir, c);
  auto [train, hold] = split_dataset(a.data, c);
  const auto tc = trainer_config_from(c);
  OsediffTrainer trainer(vae_from_checkpoint(up), denoiser_from_checkpoint(up), schedule_from(c),
                         embedder_from(c), tc);
  trainer.set_dataset(train);
  if (!resume.empty()) {
    const auto r = load_checkpoint(resume);
    trainer.load_state_arrays(r.arrays, r.manifest.at("iteration").get<int64_t>());
  }

  std::ofstream log(dir / "train.jsonl", resume.empty() ? std::ios::trunc : std::ios::app);
  auto logger = jsonl_logger(log, out, false);
  json base = up.manifest;
  base["stage"] = "osediff";
  base["seed"] = tc.seed;
  base["data"] = dataset_ref(a.data, train);
  base["teacher_checkpoint"] = fs::absolute(from).string();

  trainer.train(tc.iterations, logger, [&](int64_t it) {
    if (tc.eval_every > 0 && it % tc.eval_every == 0 && hold.size() > 0) {
      logger(json{{"iteration", it}, {"heldout", trainer.evaluate(hold).to_json()}});
    }
    if (tc.checkpoint_every > 0 && it % tc.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "step-%06lld", static_cast<long long>(it));
      save_checkpoint(dir / name, trainer_checkpoint(trainer, c, base));
    }
  });

  if (hold.size() > 0) {
    const auto m = trainer.evaluate(hold);
    base["heldout"] = m.to_json();
    out << "student PSNR " << m.student_psnr << " dB vs bicubic " << m.bicubic_psnr << " dB; toy-Frechet "
        << m.student_frechet << " vs " << m.bicubic_frechet << "\n";
  }
  save_checkpoint(dir / "checkpoint", trainer_checkpoint(trainer, c, base));
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& input, const std::string& output,
              const std::string& extractor_spec, bool merge_lora, std::optional<int64_t> upscale,
              std::ostream& out) {
  const auto ckpt = load_checkpoint(ckpt_path);
  const Config c(ckpt.config);
  auto vae = vae_from_checkpoint(ckpt);
  auto den = denoiser_from_checkpoint(ckpt);
  auto theta = theta_from_checkpoint(ckpt, vae, den);
  const auto embedder = embedder_from(c);
  const auto extractor = make_extractor(extractor_spec.empty() ? c.text("prompt.extractor") : extractor_spec);
  const int64_t scale = upscale ? *upscale : c.integer("degrade.scale");
  if (scale < 1) {
    throw ConfigError("--scale must be >= 1");
  }

  std::vector<fs::path> files;
  if (fs::is_directory(input)) {
    files = list_pngs(input);
  } else if (fs::exists(input)) {
    files.push_back(input);
  } else {
    throw IoError("input not found: " + input);
  }
  if (files.empty()) {
    throw IoError("no PNG images in " + input);
  }

  const fs::path dir(output);
  OutputLock lock(dir);
  GeneratorBundle g;
  g.schedule = schedule_from(c);
  g.embedder = &embedder;
  g.extractor = extractor.get();
  g.precondition = c.flag("train.precondition");
  ToyVae merged_vae;
  Denoiser merged_den;
  if (merge_lora) {
    merged_vae = ToyVae(vae.config(), merge(select_adapters(theta, "encoder."), vae.weights()), vae.latent_scale());
    merged_den = Denoiser(den.config(), merge(select_adapters(theta, "unet."), den.weights()));
    merged_den.set_max_timestep(g.schedule.T);
    g.vae = &merged_vae;
    g.denoiser = &merged_den;
    Checkpoint fused;
    fused.config = ckpt.config;
    fused.manifest = ckpt.manifest;
    fused.manifest["merged_lora"] = true;
    put_models(fused, &merged_vae, &merged_den, &g.schedule);
    save_checkpoint(dir / "merged-checkpoint", fused);
  } else {
    g.vae = &vae;
    g.denoiser = &den;
    g.adapters = &theta;
  }

  for (const auto& f : files) {
    auto x = load_png(f);
    if (scale > 1) {
      x = upsample_lq(x, x.size(1) * scale, x.size(2) * scale);
    }
    save_png(dir / f.filename(), restore(x, g));
  }
  out << "restored " << files.size() << " image(s) into " << dir.string() << "\n";
  return 0;
}

int cmd_evaluate(const std::string& pred_dir, const std::string& ref_dir, const std::string& report,
                 const std::string& ckpt_path, std::ostream& out) {
  const auto preds = list_pngs(pred_dir);
  if (preds.empty()) {
    throw IoError("no PNG images in " + pred_dir);
  }
  std::vector<torch::Tensor> p, r;
  std::vector<std::string> names;
  for (const auto& f : preds) {
    const auto ref = fs::path(ref_dir) / f.filename();
    if (!fs::exists(ref)) {
      throw IoError("reference image missing: " + ref.string());
    }
    p.push_back(load_png(f));
    r.push_back(load_png(ref));
    if (!p.back().sizes().equals(r.back().sizes())) {
      throw DimensionError(f.filename().string() + " differs in size from its reference");
    }
    names.push_back(f.filename().string());
  }
  std::optional<ToyVae> featurizer;
  if (!ckpt_path.empty()) {
    featurizer = vae_from_checkpoint(load_checkpoint(ckpt_path));
  }
  const auto pred = torch::stack(p);
  const auto ref = torch::stack(r);
  MetricReport m = evaluate_images(pred, ref, nullptr, names);
  if (featurizer && pred.size(0) > frechet_feature_dim(*featurizer)) {
    m.frechet = toy_frechet(frechet_features(*featurizer, pred), frechet_features(*featurizer, ref));
  }
  auto j = m.to_json();
  j["pred"] = fs::absolute(pred_dir).string();
  j["ref"] = fs::absolute(ref_dir).string();
  const fs::path rp(report);
  if (rp.has_parent_path()) {
    fs::create_directories(rp.parent_path());
  }
  write_file_atomic(rp, j.dump(2) + "\n");
  out << "PSNR " << m.mean_psnr() << " dB, SSIM " << m.mean_ssim() << " over " << names.size() << " image(s)\n";
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"OSEDiff toy distillation pipeline", "osediff"};
  app.require_subcommand(1);

  Common common;
  std::string source = "procedural";
  std::optional<int64_t> count;
  auto* degrade = app.add_subcommand("degrade", "synthesize LQ-HQ training pairs");
  add_common(degrade, common, false);
  degrade->add_option("--source", source, "HQ image directory or 'procedural'");
  degrade->add_option("--count", count, "number of pairs");

  auto* vae = app.add_subcommand("pretrain-vae", "train the toy VAE");
  add_common(vae, common, true);

  std::string from;
  auto* teacher = app.add_subcommand("pretrain-teacher", "train the teacher denoiser");
  add_common(teacher, common, true);
  teacher->add_option("--from", from, "VAE checkpoint")->required()->check(CLI::ExistingDirectory);

  std::string resume;
  auto* train = app.add_subcommand("train-osediff", "distill the one-step student");
  add_common(train, common, true);
  train->add_option("--from", from, "teacher checkpoint")->required()->check(CLI::ExistingDirectory);
  train->add_option("--resume", resume, "student checkpoint to continue from")->check(CLI::ExistingDirectory);

  std::string ckpt, input, output, extractor;
  bool merge_lora = false;
  std::optional<int64_t> upscale;
  auto* infer = app.add_subcommand("infer", "restore LQ images with a student checkpoint");
  infer->add_option("--checkpoint", ckpt, "student checkpoint")->required()->check(CLI::ExistingDirectory);
  infer->add_option("--input", input, "PNG file or directory")->required();
  infer->add_option("--output", output, "output directory")->required();
  infer->add_option("--prompt-extractor", extractor, "null, tag-stub or cmd:<exe>");
  infer->add_flag("--merge-lora", merge_lora, "fuse adapters into the base weights and export them");
  infer->add_option("--scale", upscale, "bicubic pre-upsampling factor (default: degrade.scale)");

  std::string pred, ref, report;
  auto* evaluate = app.add_subcommand("evaluate", "full-reference metrics between two PNG directories");
  evaluate->add_option("--pred", pred, "restored images")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--ref", ref, "reference images")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--out", report, "report path")->required();
  evaluate->add_option("--checkpoint", ckpt, "checkpoint whose encoder provides Frechet features");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code != 0) {
      err << app.help();
      return 1;
    }
    return 0;
  }

  try {
    check_device();
    if (*degrade) return cmd_degrade(source, count, common, out);
    if (*vae) return cmd_pretrain_vae(common, out);
    if (*teacher) return cmd_pretrain_teacher(common, from, out);
    if (*train) return cmd_train(common, from, resume, out);
    if (*infer) return cmd_infer(ckpt, input, output, extractor, merge_lora, upscale, out);
    if (*evaluate) return cmd_evaluate(pred, ref, report, ckpt, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const RangeError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const ExtractorError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    err << "internal error: " << e.what() << "\n" << e.backtrace() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

int dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace osediff
