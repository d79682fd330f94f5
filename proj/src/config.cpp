#include "osediff/config.hpp"

#include "osediff/degrade.hpp"
#include "osediff/denoiser.hpp"
#include "osediff/errors.hpp"
#include "osediff/image.hpp"

namespace osediff {

using nlohmann::json;

const json& config_defaults() {
  static const json defaults = [] {
    const auto deg = to_json(DegradationConfig{});
    return json{
        {"seed", 0},
        {"schedule.T", 1000},
        {"schedule.kind", "linear-variance"},
        {"schedule.beta_start", 1e-4},
        {"schedule.beta_end", 0.02},

        {"data.size", 32},
        {"data.count", 1000},
        {"data.holdout", 100},
        {"degrade.scale", deg["scale"]},
        {"degrade.stages", deg["stages"]},

        {"vae.latent_channels", 4},
        {"vae.factor", 4},
        {"vae.width", 32},
        {"vae.steps", 1500},
        {"vae.batch", 32},
        {"vae.lr", 2e-3},
        {"vae.lr_decay_at", 0.67},
        {"vae.lr_decay", 0.25},
        {"vae.kl_weight", 1e-6},
        {"vae.psnr_floor", 28.0},

        {"text.tokens", 8},
        {"text.dim", 32},
        {"text.seed", 0},

        {"teacher.width", 64},
        {"teacher.heads", 4},
        {"teacher.steps", 2000},
        {"teacher.batch", 32},
        {"teacher.lr", 5e-4},
        {"teacher.uncond_prob", 0.15},
        {"teacher.negative_prob", 0.25},
        {"teacher.negative_latents", "hq"},
        {"teacher.eval_every", 500},
        {"teacher.sample_steps", 50},
        {"teacher.sample_count", 200},
        {"teacher.frechet_floor", 0.0},

        {"prompt.extractor", "tag-stub"},
        {"prompt.negative", kDefaultNegativePrompt},

        {"lora.rank", 4},
        {"lora.scale", 1.0},
        {"lora.targets", "all"},

        {"train.lambda1", 2.0},
        {"train.lambda2", 1.0},
        {"train.lr", 5e-5},
        {"train.batch", 16},
        {"train.iterations", 1000},
        {"train.weight_decay", 0.01},
        {"train.grad_clip", 1.0},
        {"train.cfg_scale", 7.5},
        {"train.cfg_on_phi_prime", false},
        {"train.vsd_t_min", 0},
        {"train.vsd_t_max", 0},
        {"train.reg_t_min", 1},
        {"train.reg_t_max", 0},
        {"train.omega", "l1"},
        {"train.vsd_reduction", "mean"},
        {"train.precondition", false},
        {"train.checkpoint_every", 0},
        {"train.eval_every", 0},
    };
  }();
  return defaults;
}

namespace {

void flatten(const json& doc, const std::string& prefix, json& out) {
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const auto key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it.value().is_object() && config_defaults().count(key) == 0) {
      flatten(it.value(), key, out);
    } else {
      out[key] = it.value();
    }
  }
}

bool same_type(const json& want, const json& got) {
  if (want.is_number_float()) return got.is_number();
  if (want.is_number_integer()) return got.is_number_integer();
  if (want.is_boolean()) return got.is_boolean();
  if (want.is_string()) return got.is_string();
  if (want.is_array()) return got.is_array();
  return want.type() == got.type();
}

std::string type_name(const json& v) {
  if (v.is_number_float()) return "number";
  if (v.is_number_integer()) return "integer";
  return v.type_name();
}

}  // namespace

Config::Config() : values_(config_defaults()) {}

Config::Config(json values) : values_(config_defaults()) {
  json flat = json::object();
  flatten(values, "", flat);
  for (auto it = flat.begin(); it != flat.end(); ++it) {
    set(it.key(), it.value());
  }
}

void Config::set(const std::string& key, const json& value) {
  const auto& defaults = config_defaults();
  auto it = defaults.find(key);
  if (it == defaults.end()) {
    throw ConfigError("unknown config key '" + key + "'");
  }
  if (!same_type(*it, value)) {
    throw ConfigError("config key '" + key + "' expects " + type_name(*it) + ", got " +
                      type_name(value));
  }
  values_[key] = it->is_number_float() ? json(value.get<double>()) : value;
  if (key == "degrade.scale" || key == "degrade.stages") {
    degradation_from_json({{"scale", values_["degrade.scale"]}, {"stages", values_["degrade.stages"]}});
  }
}

const json& Config::at(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) {
    throw ConfigError("unknown config key '" + key + "'");
  }
  return *it;
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not key=value");
  }
  const auto key = assignment.substr(0, eq);
  const auto raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) {
    value = raw;
  }
  const auto& defaults = config_defaults();
  auto it = defaults.find(key);
  if (it != defaults.end() && it->is_string() && !value.is_string()) {
    value = raw;
  }
  set(key, value);
}

Config Config::from_json(const json& doc, const std::vector<std::string>& overrides) {
  if (!doc.is_object()) {
    throw ConfigError("config document must be a JSON object");
  }
  Config c(doc);
  for (const auto& o : overrides) {
    c.apply_override(o);
  }
  return c;
}

Config Config::from_file(const std::filesystem::path& path,
                         const std::vector<std::string>& overrides) {
  std::vector<uint8_t> bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError&) {
    throw ConfigError("cannot read config file " + path.string());
  }
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw ConfigError("parse error in " + path.string() + ": " + e.what());
  }
  return from_json(doc, overrides);
}

std::string Config::echo() const { return values_.dump(2) + "\n"; }

}  // namespace osediff
