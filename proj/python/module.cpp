#include <torch/extension.h>

#include <memory>
#include <sstream>

#include "osediff/checkpoint.hpp"
#include "osediff/cli.hpp"
#include "osediff/config.hpp"
#include "osediff/degrade.hpp"
#include "osediff/errors.hpp"
#include "osediff/generator.hpp"
#include "osediff/metrics.hpp"
#include "osediff/schedule.hpp"
#include "osediff/trainer.hpp"

namespace py = pybind11;
using namespace osediff;

namespace {

/// A trained student rebuilt from a checkpoint directory.
class Student {
 public:
  explicit Student(const std::string& path) {
    auto ck = load_checkpoint(path);
    Config c(ck.config);
    vae_ = vae_from_checkpoint(ck);
    den_ = denoiser_from_checkpoint(ck);
    theta_ = std::make_unique<AdapterSet>(theta_from_checkpoint(ck, vae_, den_));
    embedder_ = embedder_from(c);
    extractor_ = make_extractor(c.text("prompt.extractor"));
    bundle_ = GeneratorBundle{&vae_, &den_, schedule_from(c), theta_.get(), &embedder_, extractor_.get(),
                              c.flag("train.precondition")};
    manifest_ = ck.manifest.dump();
  }

  torch::Tensor restore(const torch::Tensor& x_L) const {
    torch::NoGradGuard no_grad;
    return osediff::restore(x_L, bundle_);
  }

  void set_extractor(const std::string& spec) {
    extractor_ = make_extractor(spec);
    bundle_.extractor = extractor_.get();
  }

  int64_t forward_count() const { return den_.forward_count(); }
  void reset_forward_count() const { den_.reset_forward_count(); }
  const std::string& manifest() const { return manifest_; }

 private:
  ToyVae vae_;
  Denoiser den_;
  std::unique_ptr<AdapterSet> theta_;
  TextEmbedder embedder_;
  std::unique_ptr<PromptExtractor> extractor_;
  GeneratorBundle bundle_;
  std::string manifest_;
};

py::tuple run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  int code = 0;
  {
    py::gil_scoped_release release;
    code = dispatch(args, out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_osediff, m) {
  m.doc() = "One-step diffusion distillation toolkit (C++ core)";

  py::register_exception<osediff::Error>(m, "Error");

  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def_readonly("T", &NoiseSchedule::T)
      .def_readonly("alpha", &NoiseSchedule::alpha)
      .def_readonly("beta", &NoiseSchedule::beta)
      .def("alpha_at", &NoiseSchedule::alpha_at)
      .def("beta_at", &NoiseSchedule::beta_at);

  m.def(
      "make_schedule",
      [](int64_t T, const std::string& kind, double beta_start, double beta_end) {
        return make_schedule(T, parse_schedule_kind(kind), beta_start, beta_end);
      },
      py::arg("T") = 1000, py::arg("kind") = "linear-variance", py::arg("beta_start") = 1e-4,
      py::arg("beta_end") = 0.02);
  m.def("forward_diffuse",
        py::overload_cast<const torch::Tensor&, int64_t, const torch::Tensor&, const NoiseSchedule&>(&forward_diffuse),
        py::arg("z"), py::arg("t"), py::arg("eps"), py::arg("schedule"));
  m.def("one_step_denoise",
        py::overload_cast<const torch::Tensor&, const torch::Tensor&, int64_t, const NoiseSchedule&>(
            &one_step_denoise),
        py::arg("z_t"), py::arg("eps_hat"), py::arg("t"), py::arg("schedule"));

  m.def(
      "procedural_texture",
      [](int cls, int64_t size, uint64_t seed) {
        return procedural_texture(static_cast<TextureClass>(cls % kTextureClasses), size, seed);
      },
      py::arg("cls"), py::arg("size"), py::arg("seed"));
  m.def(
      "degrade",
      [](const torch::Tensor& x_H, uint64_t seed, const std::string& config) {
        auto cfg = config.empty() ? DegradationConfig{} : degradation_from_json(nlohmann::json::parse(config));
        auto p = degrade(x_H, cfg, seed);
        py::dict d;
        d["x_H"] = p.x_H;
        d["x_L_raw"] = p.x_L_raw;
        d["x_L"] = p.x_L;
        d["record"] = to_json(p.record).dump();
        return d;
      },
      py::arg("x_H"), py::arg("seed"), py::arg("config") = "");

  m.def("psnr", &psnr, py::arg("a"), py::arg("b"));
  m.def(
      "ssim", [](const torch::Tensor& a, const torch::Tensor& b) { return ssim(a, b); }, py::arg("a"),
      py::arg("b"));
  m.def("toy_frechet", &toy_frechet, py::arg("features_a"), py::arg("features_b"));

  py::class_<Student>(m, "Student")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def("restore", &Student::restore, py::arg("x_L"))
      .def("set_extractor", &Student::set_extractor, py::arg("spec"))
      .def_property_readonly("forward_count", &Student::forward_count)
      .def("reset_forward_count", &Student::reset_forward_count)
      .def_property_readonly("manifest", &Student::manifest);

  m.def("run", &run, py::arg("args"), "Runs one CLI subcommand; returns (exit code, stdout, stderr).");
}
