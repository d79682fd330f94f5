#include <torch/torch.h>

#include <cmath>

#undef CHECK  // c10 logging macro
#include "doctest.h"
#include "helpers.hpp"
#include "osediff/config.hpp"
#include "osediff/errors.hpp"
#include "osediff/losses.hpp"

using namespace osediff;

namespace {

torch::Tensor blur(const torch::Tensor& x) {
  auto k = torch::tensor({1.0f, 4.0f, 6.0f, 4.0f, 1.0f}) / 16.0f;
  auto kernel = (k.view({-1, 1}) * k.view({1, -1})).view({1, 1, 5, 5}).repeat({3, 1, 1, 1});
  namespace F = torch::nn::functional;
  auto p = F::pad(x.unsqueeze(0), F::PadFuncOptions({2, 2, 2, 2}).mode(torch::kReplicate));
  return F::conv2d(p, kernel, F::Conv2dFuncOptions().groups(3))[0];
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("closed forms") {
    auto x = procedural_texture(TextureClass::kBlobs, 16, 1).unsqueeze(0);
    CHECK(data_loss(x, x, DataLossConfig{}).item<double>() == 0.0);
    CHECK(data_loss(x + 0.1, x, DataLossConfig{0.0, {}}).item<double>() == doctest::Approx(0.01).epsilon(1e-5));
    CHECK(perceptual_distance(x, x, {}).item<double>() == 0.0);
    CHECK_THROWS_AS(data_loss(x, x.slice(3, 0, 8), DataLossConfig{}), DimensionError);
    CHECK_THROWS_AS(data_loss(x, x, DataLossConfig{-1.0, {}}), ConfigError);
  }

  TEST_CASE("weights default to two and one") {
    CHECK(DataLossConfig{}.lambda1 == 2.0);
    Config c;
    CHECK(c.number("train.lambda1") == 2.0);
    CHECK(c.number("train.lambda2") == 1.0);
  }

  TEST_CASE("perceptual distance against a hand-written reference") {
    // identity backbone plus a 2x average pool, so the reference is a direct loop
    FeatureFn fn = [](const torch::Tensor& x) {
      auto b = x.dim() == 3 ? x.unsqueeze(0) : x;
      return std::vector<torch::Tensor>{b, torch::nn::functional::avg_pool2d(b, torch::nn::functional::AvgPool2dFuncOptions(2))};
    };
    auto gen = make_generator(2);
    auto a = torch::randn({2, 3, 4, 4}, gen, torch::kDouble);
    auto b = torch::randn({2, 3, 4, 4}, gen, torch::kDouble);
    auto fa = fn(a);
    auto fb = fn(b);
    double total = 0.0;
    for (size_t l = 0; l < 2; ++l) {
      auto A = fa[l].accessor<double, 4>();
      auto B = fb[l].accessor<double, 4>();
      double layer = 0.0;
      int64_t positions = 0;
      for (int64_t n = 0; n < fa[l].size(0); ++n)
        for (int64_t i = 0; i < fa[l].size(2); ++i)
          for (int64_t j = 0; j < fa[l].size(3); ++j) {
            double na = 0, nb = 0;
            for (int c = 0; c < 3; ++c) {
              na += A[n][c][i][j] * A[n][c][i][j];
              nb += B[n][c][i][j] * B[n][c][i][j];
            }
            na = std::sqrt(na);
            nb = std::sqrt(nb);
            for (int c = 0; c < 3; ++c) {
              const double d = A[n][c][i][j] / na - B[n][c][i][j] / nb;
              layer += d * d;
            }
            ++positions;
          }
      total += layer / positions;
    }
    CHECK(perceptual_distance(a, b, fn).item<double>() == doctest::Approx(total / 2).epsilon(1e-8));
  }

  TEST_CASE("symmetry and batch shape handling") {
    auto gen = make_generator(3);
    auto a = torch::rand({2, 3, 16, 16}, gen) * 2 - 1;
    auto b = torch::rand({2, 3, 16, 16}, gen) * 2 - 1;
    const double ab = perceptual_distance(a, b, {}).item<double>();
    CHECK(ab > 0.0);
    CHECK(ab == doctest::Approx(perceptual_distance(b, a, {}).item<double>()).epsilon(1e-6));
    CHECK(perceptual_distance(a[0], b[0], {}).item<double>() ==
          doctest::Approx(perceptual_distance(a.slice(0, 0, 1), b.slice(0, 0, 1), {}).item<double>()));
  }

  TEST_CASE("blur raises the distance on every texture") {
    int worse = 0;
    for (int i = 0; i < 100; ++i) {
      auto x = procedural_texture(static_cast<TextureClass>(i % kTextureClasses), 32, 500 + i);
      const double clean = perceptual_distance(x, x, {}).item<double>();
      const double blurred = perceptual_distance(blur(x), x, {}).item<double>();
      worse += blurred > clean ? 1 : 0;
    }
    CHECK(worse == 100);
  }

  TEST_CASE("gradient of the data loss matches finite differences") {
    auto gen = make_generator(4);
    auto target = torch::rand({1, 3, 4, 4}, gen, torch::kDouble) * 2 - 1;
    auto x = (torch::rand({1, 3, 4, 4}, gen, torch::kDouble) * 2 - 1).requires_grad_(true);
    DataLossConfig cfg;
    data_loss(x, target, cfg).backward();
    auto analytic = x.grad().flatten();
    auto numeric = torch::zeros_like(analytic);
    const double h = 1e-6;
    for (int64_t i = 0; i < analytic.numel(); ++i) {
      torch::NoGradGuard no_grad;
      auto p = x.detach().clone();
      auto m = x.detach().clone();
      p.view({-1})[i] += h;
      m.view({-1})[i] -= h;
      numeric[i] = (data_loss(p, target, cfg) - data_loss(m, target, cfg)) / (2 * h);
    }
    CHECK((analytic - numeric).norm().item<double>() / numeric.norm().item<double>() <= 1e-4);
  }
}
