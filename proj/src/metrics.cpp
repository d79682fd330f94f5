#include "osediff/metrics.hpp"

#include <torch/torch.h>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>

#include "osediff/errors.hpp"
#include "osediff/image.hpp"
#include "osediff/toyvae.hpp"

namespace osediff {

namespace F = torch::nn::functional;

namespace {

void check_pair(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 3 || a.size(0) != 3 || !a.sizes().equals(b.sizes())) {
    throw DimensionError("metrics expect two [3,H,W] images of equal size");
  }
}

}  // namespace

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  check_pair(a, b);
  const double mse = (luma(a) - luma(b)).square().mean().item<double>();
  if (mse == 0.0) {
    return kPsnrCap;
  }
  return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / mse));
}

double ssim(const torch::Tensor& a, const torch::Tensor& b, const SsimWindow& w) {
  check_pair(a, b);
  if (a.size(1) < w.size || a.size(2) < w.size) {
    throw DimensionError("image smaller than the " + std::to_string(w.size) + "-tap SSIM window");
  }
  const int64_t r = w.size / 2;
  auto g = torch::arange(-r, w.size - r, torch::kDouble);
  g = torch::exp(-g.square() / (2 * w.sigma * w.sigma));
  g = g / g.sum();
  auto kernel = (g.view({-1, 1}) * g.view({1, -1})).view({1, 1, w.size, w.size});
  auto x = luma(a).view({1, 1, a.size(1), a.size(2)});
  auto y = luma(b).view({1, 1, b.size(1), b.size(2)});
  auto blur = [&](const torch::Tensor& t) { return F::conv2d(t, kernel); };
  const double c1 = std::pow(w.k1 * 255.0, 2);
  const double c2 = std::pow(w.k2 * 255.0, 2);
  auto mx = blur(x);
  auto my = blur(y);
  auto sxx = blur(x * x) - mx * mx;
  auto syy = blur(y * y) - my * my;
  auto sxy = blur(x * y) - mx * my;
  auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  return map.mean().item<double>();
}

namespace {

using Mat = Eigen::MatrixXd;

Mat to_eigen(const torch::Tensor& t) {
  auto c = t.to(torch::kDouble).contiguous();
  Mat m(c.size(0), c.size(1));
  auto acc = c.accessor<double, 2>();
  for (int64_t i = 0; i < c.size(0); ++i)
    for (int64_t j = 0; j < c.size(1); ++j) m(i, j) = acc[i][j];
  return m;
}

Mat sqrt_psd(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es((m + m.transpose()) * 0.5);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(1e-8).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double toy_frechet(const torch::Tensor& fa, const torch::Tensor& fb) {
  if (fa.dim() != 2 || fb.dim() != 2 || fa.size(1) != fb.size(1)) {
    throw DimensionError("feature sets must be [N, d] with equal d");
  }
  const int64_t d = fa.size(1);
  if (fa.size(0) < d + 1 || fb.size(0) < d + 1) {
    throw RangeError("Frechet distance needs at least d + 1 = " + std::to_string(d + 1) +
                     " samples per set");
  }
  const Mat a = to_eigen(fa);
  const Mat b = to_eigen(fb);
  const Eigen::RowVectorXd mu_a = a.colwise().mean();
  const Eigen::RowVectorXd mu_b = b.colwise().mean();
  const Mat ca = a.rowwise() - mu_a;
  const Mat cb = b.rowwise() - mu_b;
  const Mat sa = ca.transpose() * ca / static_cast<double>(a.rows() - 1);
  const Mat sb = cb.transpose() * cb / static_cast<double>(b.rows() - 1);
  const Mat root_a = sqrt_psd(sa);
  Eigen::SelfAdjointEigenSolver<Mat> es(root_a * sb * root_a);
  const double tr_cross = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double dist = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_cross;
  return std::max(0.0, dist);
}

torch::Tensor frechet_features(const ToyVae& vae, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
  std::vector<torch::Tensor> feats;
  for (int64_t i = 0; i < x.size(0); i += 64) {
    auto z = vae.encode(x.slice(0, i, std::min(i + 64, x.size(0))));
    auto pooled = F::adaptive_avg_pool2d(z, F::AdaptiveAvgPool2dFuncOptions({2, 2})).flatten(1);
    auto spread = z.flatten(2).std(2, /*unbiased=*/false);
    feats.push_back(torch::cat({pooled, spread}, 1));
  }
  return torch::cat(feats).to(torch::kDouble);
}

int64_t frechet_feature_dim(const ToyVae& vae) { return 5 * vae.config().latent_channels; }

double MetricReport::mean_psnr() const {
  return psnr.empty() ? 0.0 : std::accumulate(psnr.begin(), psnr.end(), 0.0) / psnr.size();
}

double MetricReport::mean_ssim() const {
  return ssim.empty() ? 0.0 : std::accumulate(ssim.begin(), ssim.end(), 0.0) / ssim.size();
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json images = nlohmann::json::array();
  for (size_t i = 0; i < psnr.size(); ++i) {
    images.push_back({{"name", i < names.size() ? names[i] : std::to_string(i)},
                      {"psnr", psnr[i]},
                      {"ssim", ssim[i]}});
  }
  return {{"count", psnr.size()},
          {"psnr", mean_psnr()},
          {"ssim", mean_ssim()},
          {"toy_frechet", frechet ? nlohmann::json(*frechet) : nlohmann::json(nullptr)},
          {"images", images}};
}

MetricReport evaluate_images(const torch::Tensor& pred, const torch::Tensor& ref,
                             const ToyVae* featurizer, const std::vector<std::string>& names) {
  if (pred.dim() != 4 || !pred.sizes().equals(ref.sizes())) {
    throw DimensionError("prediction and reference batches differ in shape");
  }
  MetricReport r;
  r.names = names;
  for (int64_t i = 0; i < pred.size(0); ++i) {
    r.psnr.push_back(psnr(pred[i], ref[i]));
    r.ssim.push_back(ssim(pred[i], ref[i]));
  }
  if (featurizer != nullptr) {
    r.frechet = toy_frechet(frechet_features(*featurizer, pred), frechet_features(*featurizer, ref));
  }
  return r;
}

}  // namespace osediff
