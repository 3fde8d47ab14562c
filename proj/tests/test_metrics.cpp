#include <doctest.h>

#include <cmath>

#include "vqr/faces.hpp"
#include "vqr/metrics.hpp"

using namespace vqr;

namespace {
Tensor face_img(uint64_t seed) {
  Rng rng(seed);
  return to_float(render_face(sample_face(rng), 64));
}
}  // namespace

TEST_CASE("psnr values") {
  Tensor a = face_img(1);
  CHECK(std::isinf(psnr(a, a)));

  // constant offset with known mse
  Tensor b = a.clone();
  SUBCASE("mse 0.01 is 20 dB") {
    Tensor x = Tensor::full({8, 8, 3}, 0.5f);
    Tensor y = Tensor::full({8, 8, 3}, 0.6f);
    CHECK(psnr(x, y) == doctest::Approx(20.0).epsilon(1e-4));
  }
  SUBCASE("mse 1 is 0 dB") {
    Tensor x = Tensor::full({4, 4, 3}, 0.f);
    Tensor y = Tensor::full({4, 4, 3}, 1.f);
    CHECK(psnr(x, y) == doctest::Approx(0.0).epsilon(1e-9));
  }
  SUBCASE("symmetry") {
    Tensor y = face_img(2);
    CHECK(psnr(a, y) == doctest::Approx(psnr(y, a)));
  }
  CHECK_THROWS_AS(psnr(a, Tensor::zeros({4, 4, 3})), ShapeError);
}

TEST_CASE("ssim values") {
  Tensor a = face_img(3);
  CHECK(ssim(a, a) == 1.0);

  SUBCASE("identical constants score 1") {
    Tensor x = Tensor::full({16, 16, 3}, 0.5f);
    CHECK(ssim(x, x.clone()) == doctest::Approx(1.0));
  }
  SUBCASE("inversion of a non-constant image scores below 1") {
    Tensor inv(a.shape());
    inv.array() = 1.f - a.array();
    CHECK(ssim(a, inv) < 1.0);
  }
  SUBCASE("symmetry and flip invariance") {
    Tensor b = face_img(4);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-9));
    auto hflip = [](const Tensor& t) {
      Tensor out(t.shape());
      const int h = t.dim(0), w = t.dim(1), c = t.dim(2);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int ch = 0; ch < c; ++ch)
            out.data()[(y * w + x) * c + ch] = t.data()[(y * w + (w - 1 - x)) * c + ch];
      return out;
    };
    CHECK(ssim(hflip(a), hflip(b)) == doctest::Approx(ssim(a, b)).epsilon(1e-6));
    CHECK(psnr(hflip(a), hflip(b)) == doctest::Approx(psnr(a, b)).epsilon(1e-9));
  }
  SUBCASE("images below the window size are rejected") {
    CHECK_THROWS_AS(ssim(Tensor::zeros({8, 8, 3}), Tensor::zeros({8, 8, 3})), ShapeError);
  }
}

TEST_CASE("identity proxy") {
  FeatureExtractor phi(1234);
  Tensor a = face_img(5);
  CHECK(identity_proxy(a, a, phi) == doctest::Approx(1.0).epsilon(1e-6));
  Tensor b = face_img(6);
  CHECK(identity_proxy(a, b, phi) == doctest::Approx(identity_proxy(b, a, phi)).epsilon(1e-9));
  CHECK(identity_proxy(a, b, phi) >= -1.0);
  CHECK(identity_proxy(a, b, phi) <= 1.0);
}

TEST_CASE("eval report formatting") {
  EvalReport rep;
  EvalRow r1{"a.png", 20.0, 0.8, 0.9, 0.5};
  EvalRow r2{"b.png", std::numeric_limits<double>::infinity(), 1.0, 1.0, std::nullopt};
  rep.rows = {r1, r2};
  rep.finalize();
  CHECK(rep.mean_psnr == doctest::Approx(20.0));
  CHECK(rep.infinite_psnr_count == 1);
  CHECK(rep.mean_ssim == doctest::Approx(0.9));
  REQUIRE(rep.mean_code_acc.has_value());
  CHECK(*rep.mean_code_acc == doctest::Approx(0.5));
  const std::string csv = rep.to_csv();
  CHECK(csv.find("image,psnr,ssim,ids_proxy,code_acc") == 0);
  CHECK(csv.find("b.png,inf,") != std::string::npos);
  CHECK(csv.find("a.png,20.000000,0.800000,0.900000,0.500000") != std::string::npos);
}
