#include "osediff/degrade.hpp"

#include <torch/torch.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "osediff/errors.hpp"
#include "osediff/image.hpp"
#include "osediff/layers.hpp"

namespace osediff {

namespace F = torch::nn::functional;
namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(TextureClass c) {
  switch (c) {
    case TextureClass::kStripes:
      return "stripes";
    case TextureClass::kChecker:
      return "checker";
    case TextureClass::kBlobs:
      return "blobs";
    case TextureClass::kGradient:
      return "gradient";
    case TextureClass::kNoise:
      return "noise";
  }
  return "stripes";
}

namespace {

constexpr double kPi = 3.14159265358979323846;

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}
  double uniform(double lo, double hi) {
    if (hi <= lo) {
      return lo;
    }
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }
  double uniform(const Range& r) { return uniform(r.lo, r.hi); }
  int64_t integer(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(eng_);
  }
  uint64_t bits() { return eng_(); }

 private:
  std::mt19937_64 eng_;
};

}  // namespace

torch::Tensor procedural_texture(TextureClass cls, int64_t size, uint64_t seed) {
  if (size < 4) {
    throw DimensionError("texture size must be >= 4");
  }
  Rng rng(seed);
  const auto opt = torch::TensorOptions().dtype(torch::kDouble);
  auto grid = torch::meshgrid({torch::arange(size, opt), torch::arange(size, opt)}, "ij");
  auto yy = grid[0];
  auto xx = grid[1];
  auto c1 = torch::empty({3}, opt);
  auto c2 = torch::empty({3}, opt);
  // one dark and one bright colour, each a grey level plus a small tint
  const double dark = rng.uniform(-0.9, -0.3);
  const double bright = rng.uniform(0.3, 0.9);
  for (int i = 0; i < 3; ++i) c1[i] = dark + rng.uniform(-0.25, 0.25);
  for (int i = 0; i < 3; ++i) c2[i] = bright + rng.uniform(-0.25, 0.25);
  if (rng.uniform(0, 1) < 0.5) std::swap(c1, c2);
  const double k = static_cast<double>(size) / 32.0;
  const double s = static_cast<double>(size);
  torch::Tensor m;
  switch (cls) {
    case TextureClass::kStripes: {
      const double th = rng.uniform(0, kPi);
      const double per = rng.uniform(10 * k, 20 * k);
      const double ph = rng.uniform(0, 2 * kPi);
      m = torch::sigmoid(
          20.0 * torch::sin(2 * kPi * (xx * std::cos(th) + yy * std::sin(th)) / per + ph));
      break;
    }
    case TextureClass::kChecker: {
      const double per = rng.uniform(10 * k, 20 * k);
      const double ph1 = rng.uniform(0, 2 * kPi);
      const double ph2 = rng.uniform(0, 2 * kPi);
      m = 0.5 + 0.5 * torch::tanh(20.0 * torch::sin(2 * kPi * xx / per + ph1) *
                                  torch::sin(2 * kPi * yy / per + ph2));
      break;
    }
    case TextureClass::kBlobs: {
      m = torch::zeros({size, size}, opt);
      const int64_t n = rng.integer(3, 6);
      for (int64_t i = 0; i < n; ++i) {
        const double cx = rng.uniform(0, s);
        const double cy = rng.uniform(0, s);
        const double sig = rng.uniform(3 * k, 7 * k);
        m = m + torch::exp(-((xx - cx).square() + (yy - cy).square()) / (2 * sig * sig));
      }
      m = torch::sigmoid(20.0 * (m - 0.5));
      break;
    }
    case TextureClass::kGradient: {
      const double th = rng.uniform(0, 2 * kPi);
      m = (((xx - s / 2) * std::cos(th) + (yy - s / 2) * std::sin(th)) / s + 0.5).clamp(0, 1);
      break;
    }
    case TextureClass::kNoise: {
      auto low = torch::empty({1, 1, 6, 6}, opt);
      auto acc = low.accessor<double, 4>();
      for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < 6; ++j) acc[0][0][i][j] = rng.uniform(0, 1);
      m = F::interpolate(low, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{size, size})
                                  .mode(torch::kBicubic)
                                  .align_corners(false))[0][0];
      m = torch::sigmoid(40.0 * (m - 0.5));
      break;
    }
  }
  auto img = c1.view({3, 1, 1}) * (1 - m) + c2.view({3, 1, 1}) * m;
  return img.clamp(-1, 1).to(torch::kFloat);
}

// ---------------------------------------------------------------------------
// Degradation

void DegradationConfig::validate() const {
  if (scale < 1) {
    throw ConfigError("degradation scale must be >= 1");
  }
  auto ordered = [](const Range& r, const char* name) {
    if (!(r.lo <= r.hi) || r.lo < 0) {
      throw ConfigError(std::string("degradation range '") + name + "' must satisfy 0 <= lo <= hi");
    }
  };
  for (const auto& st : stages) {
    ordered(st.blur_sigma, "blur_sigma");
    ordered(st.resize, "resize");
    ordered(st.gaussian_noise, "gaussian_noise");
    ordered(st.poisson_log_peak, "poisson_log_peak");
    ordered(st.jpeg_quality, "jpeg_quality");
    if (st.resize.lo <= 0) {
      throw ConfigError("resize factors must be positive");
    }
    if (st.blur_kernel < 1 || st.blur_kernel % 2 == 0) {
      throw ConfigError("blur kernel size must be odd");
    }
    if (st.poisson_prob < 0 || st.poisson_prob > 1) {
      throw ConfigError("poisson_prob must be in [0, 1]");
    }
    if (st.jpeg && (st.jpeg_quality.lo < 1 || st.jpeg_quality.hi > 100)) {
      throw ConfigError("jpeg_quality must lie in [1, 100]");
    }
  }
}

namespace {

torch::Tensor gaussian_blur(const torch::Tensor& x, double sigma, int64_t ksize) {
  const int64_t r = ksize / 2;
  auto k = torch::arange(-r, r + 1, torch::kDouble);
  k = torch::exp(-k.square() / (2 * sigma * sigma));
  k = k / k.sum();
  auto kernel = (k.view({-1, 1}) * k.view({1, -1})).view({1, 1, ksize, ksize}).repeat({3, 1, 1, 1});
  auto padded = F::pad(x, F::PadFuncOptions({r, r, r, r}).mode(torch::kReplicate));
  return F::conv2d(padded, kernel, F::Conv2dFuncOptions().groups(3));
}

torch::Tensor resize_mode(const torch::Tensor& x, int64_t h, int64_t w, const std::string& mode) {
  if (x.size(2) == h && x.size(3) == w) {
    return x;
  }
  if (mode == "area") {
    return F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions({h, w}));
  }
  const bool down = h < x.size(2) || w < x.size(3);
  auto opts = F::InterpolateFuncOptions()
                  .size(std::vector<int64_t>{h, w})
                  .align_corners(false)
                  .antialias(down);
  if (mode == "bilinear") {
    opts.mode(torch::kBilinear);
  } else {
    opts.mode(torch::kBicubic);
  }
  return F::interpolate(x, opts);
}

torch::Tensor apply_stage(const torch::Tensor& in, const StageRecord& st) {
  auto x = in;
  if (st.blur_sigma > 0) {
    x = gaussian_blur(x, st.blur_sigma, st.blur_kernel).clamp(-1, 1);
  }
  x = resize_mode(x, st.height, st.width, st.resize_mode).clamp(-1, 1);
  if (st.noise == "gaussian") {
    auto gen = make_generator(st.noise_seed);
    x = (x + torch::randn(x.sizes(), gen, torch::kDouble) * (st.noise_level / 127.5)).clamp(-1, 1);
  } else if (st.noise == "poisson") {
    auto gen = make_generator(st.noise_seed);
    const double peak = std::pow(10.0, st.noise_level);
    auto rate = (x + 1.0) * 0.5 * peak;
    x = (torch::poisson(rate, gen) / peak * 2.0 - 1.0).clamp(-1, 1);
  }
  if (st.jpeg_quality > 0) {
    x = from_rgb8(jpeg_roundtrip(to_rgb8(x[0]), st.jpeg_quality)).to(torch::kDouble).unsqueeze(0);
  }
  return x;
}

torch::Tensor finish(const torch::Tensor& x, int64_t h, int64_t w) {
  auto y = resize_mode(x, h, w, "bicubic").clamp(-1, 1);
  return from_rgb8(to_rgb8(y[0]));
}

void check_hq(const torch::Tensor& x_H, int64_t scale) {
  if (x_H.dim() != 3 || x_H.size(0) != 3) {
    throw DimensionError("HQ image must be [3,H,W]");
  }
  if (x_H.size(1) % scale != 0 || x_H.size(2) % scale != 0) {
    throw DimensionError("HQ size " + std::to_string(x_H.size(1)) + "x" +
                         std::to_string(x_H.size(2)) + " not divisible by scale " +
                         std::to_string(scale));
  }
}

}  // namespace

TrainingPair degrade(const torch::Tensor& x_H, const DegradationConfig& cfg, uint64_t seed) {
  cfg.validate();
  check_hq(x_H, cfg.scale);
  Rng rng(seed);
  static const char* kModes[] = {"bilinear", "bicubic", "area"};
  TrainingPair pair;
  pair.x_H = x_H.to(torch::kFloat);
  auto x = x_H.to(torch::kDouble).clamp(-1, 1).unsqueeze(0);
  for (const auto& sc : cfg.stages) {
    StageRecord st;
    st.blur_sigma = rng.uniform(sc.blur_sigma);
    st.blur_kernel = sc.blur_kernel;
    const double f = rng.uniform(sc.resize);
    st.height = std::max<int64_t>(1, std::llround(x.size(2) * f));
    st.width = std::max<int64_t>(1, std::llround(x.size(3) * f));
    st.resize_mode = kModes[rng.integer(0, 2)];
    const bool poisson = rng.uniform(0, 1) < sc.poisson_prob;
    if (poisson) {
      st.noise = "poisson";
      st.noise_level = rng.uniform(sc.poisson_log_peak);
    } else if (sc.gaussian_noise.hi > 0) {
      st.noise = "gaussian";
      st.noise_level = rng.uniform(sc.gaussian_noise);
    }
    st.noise_seed = rng.bits();
    if (sc.jpeg) {
      st.jpeg_quality = static_cast<int>(std::lround(rng.uniform(sc.jpeg_quality)));
    }
    x = apply_stage(x, st);
    pair.record.stages.push_back(st);
  }
  pair.record.height = x_H.size(1) / cfg.scale;
  pair.record.width = x_H.size(2) / cfg.scale;
  pair.x_L_raw = finish(x, pair.record.height, pair.record.width);
  pair.x_L = upsample_lq(pair.x_L_raw, x_H.size(1), x_H.size(2));
  return pair;
}

torch::Tensor replay(const torch::Tensor& x_H, const DegradationRecord& record) {
  auto x = x_H.to(torch::kDouble).clamp(-1, 1).unsqueeze(0);
  for (const auto& st : record.stages) {
    x = apply_stage(x, st);
  }
  return finish(x, record.height, record.width);
}

torch::Tensor upsample_lq(const torch::Tensor& x_L_raw, int64_t height, int64_t width) {
  auto x = x_L_raw.to(torch::kFloat).unsqueeze(0);
  auto y = F::interpolate(x, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{height, width})
                                 .mode(torch::kBicubic)
                                 .align_corners(false));
  return y[0].clamp(-1, 1);
}

// ---------------------------------------------------------------------------
// JSON

namespace {

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }

Range range_from(const json& j, const char* name) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw ConfigError(std::string("'") + name + "' must be a [lo, hi] pair");
  }
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

json to_json(const DegradationConfig& c) {
  json stages = json::array();
  for (const auto& s : c.stages) {
    stages.push_back({{"blur_sigma", range_json(s.blur_sigma)},
                      {"blur_kernel", s.blur_kernel},
                      {"resize", range_json(s.resize)},
                      {"gaussian_noise", range_json(s.gaussian_noise)},
                      {"poisson_prob", s.poisson_prob},
                      {"poisson_log_peak", range_json(s.poisson_log_peak)},
                      {"jpeg", s.jpeg},
                      {"jpeg_quality", range_json(s.jpeg_quality)}});
  }
  return {{"scale", c.scale}, {"stages", stages}};
}

DegradationConfig degradation_from_json(const json& j) {
  DegradationConfig c;
  if (!j.is_object()) {
    throw ConfigError("degradation config must be an object");
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "scale") {
      c.scale = it.value().get<int64_t>();
    } else if (it.key() == "stages") {
      c.stages.clear();
      for (const auto& s : it.value()) {
        StageConfig st;
        for (auto f = s.begin(); f != s.end(); ++f) {
          const auto& k = f.key();
          if (k == "blur_sigma") st.blur_sigma = range_from(f.value(), "blur_sigma");
          else if (k == "blur_kernel") st.blur_kernel = f.value().get<int64_t>();
          else if (k == "resize") st.resize = range_from(f.value(), "resize");
          else if (k == "gaussian_noise") st.gaussian_noise = range_from(f.value(), "gaussian_noise");
          else if (k == "poisson_prob") st.poisson_prob = f.value().get<double>();
          else if (k == "poisson_log_peak") st.poisson_log_peak = range_from(f.value(), "poisson_log_peak");
          else if (k == "jpeg") st.jpeg = f.value().get<bool>();
          else if (k == "jpeg_quality") st.jpeg_quality = range_from(f.value(), "jpeg_quality");
          else throw ConfigError("unknown degradation stage key '" + k + "'");
        }
        c.stages.push_back(st);
      }
    } else {
      throw ConfigError("unknown degradation key '" + it.key() + "'");
    }
  }
  c.validate();
  return c;
}

json to_json(const DegradationRecord& r) {
  json stages = json::array();
  for (const auto& s : r.stages) {
    stages.push_back({{"blur_sigma", s.blur_sigma},
                      {"blur_kernel", s.blur_kernel},
                      {"height", s.height},
                      {"width", s.width},
                      {"resize_mode", s.resize_mode},
                      {"noise", s.noise},
                      {"noise_level", s.noise_level},
                      {"noise_seed", s.noise_seed},
                      {"jpeg_quality", s.jpeg_quality}});
  }
  return {{"height", r.height}, {"width", r.width}, {"stages", stages}};
}

DegradationRecord record_from_json(const json& j) {
  DegradationRecord r;
  r.height = j.at("height").get<int64_t>();
  r.width = j.at("width").get<int64_t>();
  for (const auto& s : j.at("stages")) {
    StageRecord st;
    st.blur_sigma = s.at("blur_sigma").get<double>();
    st.blur_kernel = s.at("blur_kernel").get<int64_t>();
    st.height = s.at("height").get<int64_t>();
    st.width = s.at("width").get<int64_t>();
    st.resize_mode = s.at("resize_mode").get<std::string>();
    st.noise = s.at("noise").get<std::string>();
    st.noise_level = s.at("noise_level").get<double>();
    st.noise_seed = s.at("noise_seed").get<uint64_t>();
    st.jpeg_quality = s.at("jpeg_quality").get<int>();
    r.stages.push_back(st);
  }
  return r;
}

std::string json_hash(const json& j) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Datasets

namespace {

std::string pair_name(int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04lld.png", static_cast<long long>(i));
  return buf;
}

}  // namespace

json synthesize_dataset(const std::string& source, int64_t count, const DegradationConfig& cfg,
                        uint64_t seed, const fs::path& out, int64_t size) {
  if (count < 1) {
    throw RangeError("dataset count must be >= 1");
  }
  cfg.validate();
  const bool procedural = source == "procedural";
  std::vector<fs::path> files;
  if (!procedural) {
    files = list_pngs(source);
    if (files.empty()) {
      throw IoError("no PNG images in " + source);
    }
  }
  fs::create_directories(out / "hq");
  fs::create_directories(out / "lq");
  json pairs = json::array();
  for (int64_t i = 0; i < count; ++i) {
    const uint64_t tex_seed = derive_seed(seed, 1, static_cast<uint64_t>(i));
    const uint64_t deg_seed = derive_seed(seed, 2, static_cast<uint64_t>(i));
    torch::Tensor hq;
    std::string label = "unknown";
    if (procedural) {
      const auto cls = static_cast<TextureClass>(i % kTextureClasses);
      hq = quantize(procedural_texture(cls, size, tex_seed));
      label = to_string(cls);
    } else {
      hq = load_png(files[static_cast<size_t>(i) % files.size()]);
    }
    auto pair = degrade(hq, cfg, deg_seed);
    const auto name = pair_name(i);
    save_png(out / "hq" / name, pair.x_H);
    save_png(out / "lq" / name, pair.x_L_raw);
    pairs.push_back({{"index", i},
                     {"hq", "hq/" + name},
                     {"lq", "lq/" + name},
                     {"class", label},
                     {"seed", deg_seed},
                     {"record", to_json(pair.record)}});
  }
  const auto cfg_json = to_json(cfg);
  json manifest = {{"source", procedural ? "procedural" : fs::absolute(source).string()},
                   {"seed", seed},
                   {"count", count},
                   {"size", size},
                   {"scale", cfg.scale},
                   {"config", cfg_json},
                   {"config_hash", json_hash(cfg_json)},
                   {"pairs", pairs}};
  write_file_atomic(out / "manifest.json", manifest.dump(1));
  return manifest;
}

Dataset Dataset::slice(int64_t begin, int64_t end) const {
  Dataset d;
  d.hq = hq.slice(0, begin, end);
  d.lq_raw = lq_raw.slice(0, begin, end);
  d.lq = lq.slice(0, begin, end);
  d.labels.assign(labels.begin() + begin, labels.begin() + end);
  d.manifest = manifest;
  return d;
}

Dataset load_dataset(const fs::path& dir) {
  const auto mpath = dir / "manifest.json";
  json manifest;
  try {
    const auto bytes = read_file(mpath);
    manifest = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw IoError("cannot parse " + mpath.string() + ": " + e.what());
  }
  if (!manifest.contains("pairs") || manifest["pairs"].empty()) {
    throw IoError("dataset " + dir.string() + " has no pairs");
  }
  std::vector<torch::Tensor> hq, raw, lq;
  Dataset d;
  for (const auto& p : manifest["pairs"]) {
    auto h = load_png(dir / p.at("hq").get<std::string>());
    auto l = load_png(dir / p.at("lq").get<std::string>());
    hq.push_back(h);
    raw.push_back(l);
    lq.push_back(upsample_lq(l, h.size(1), h.size(2)));
    const auto cls = p.value("class", std::string("unknown"));
    int label = -1;
    for (int c = 0; c < kTextureClasses; ++c) {
      if (to_string(static_cast<TextureClass>(c)) == cls) {
        label = c;
      }
    }
    d.labels.push_back(label);
  }
  d.hq = torch::stack(hq);
  d.lq_raw = torch::stack(raw);
  d.lq = torch::stack(lq);
  d.manifest = std::move(manifest);
  return d;
}

}  // namespace osediff
