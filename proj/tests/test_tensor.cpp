#include <doctest.h>

#include <cmath>

#include "vqr/gradcheck.hpp"
#include "vqr/tensor.hpp"

using namespace vqr;

namespace {

// Independent direct convolution used as the oracle for conv2d.
Tensor naive_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int h = x.dim(0), iw = x.dim(1), cin = x.dim(2);
  const int kh = w.dim(0), kw = w.dim(1), cout = w.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (iw + 2 * pad - kw) / stride + 1;
  Tensor out(Shape{oh, ow, cout});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int co = 0; co < cout; ++co) {
        float acc = b.defined() ? b.data()[co] : 0.f;
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const int iy = oy * stride - pad + ky;
            const int ix = ox * stride - pad + kx;
            if (iy < 0 || iy >= h || ix < 0 || ix >= iw) continue;
            for (int ci = 0; ci < cin; ++ci)
              acc += x.data()[(int64_t(iy) * iw + ix) * cin + ci] *
                     w.data()[((int64_t(ky) * kw + kx) * cin + ci) * cout + co];
          }
        out.data()[(int64_t(oy) * ow + ox) * cout + co] = acc;
      }
  return out;
}

void push_away_from_zero(Tensor& t, float margin) {
  for (int64_t i = 0; i < t.size(); ++i) {
    float& v = t.data()[i];
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
}

}  // namespace

TEST_CASE("softmax of constant row is uniform") {
  Tensor x = Tensor::from_span({3}, std::array<float, 3>{0, 0, 0});
  Tensor y = softmax(x);
  for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-6));
}

TEST_CASE("matmul identity returns the operand") {
  Rng rng(1);
  Tensor x = Tensor::randn({3, 3}, rng);
  Tensor id = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) id.data()[i * 3 + i] = 1.f;
  Tensor y = matmul(id, x);
  for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d matches the hand convolution oracle") {
  SUBCASE("all-ones 3x3 kernel on ones image, zero pad") {
    Tensor x = Tensor::full({5, 5, 1}, 1.f);
    Tensor w = Tensor::full({3, 3, 1, 1}, 1.f);
    Tensor y = conv2d(x, w, {}, 1, 1);
    CHECK(y.dim(0) == 5);
    CHECK(y.data()[(2 * 5 + 2) * 1] == 9.f);   // center: full support
    CHECK(y.data()[0] == 4.f);                 // corner: 2x2 support
  }
  SUBCASE("random cases, strides 1 and 2, bit-exact vs oracle") {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
      const int h = 3 + int(rng.uniform_int(0, 6));
      const int w_ = 3 + int(rng.uniform_int(0, 6));
      const int cin = 1 + int(rng.uniform_int(0, 3));
      const int cout = 1 + int(rng.uniform_int(0, 3));
      const int k = 1 + 2 * int(rng.uniform_int(0, 1));
      const int stride = 1 + int(rng.uniform_int(0, 1));
      const int pad = int(rng.uniform_int(0, k / 2));
      if ((h + 2 * pad - k) < 0 || (w_ + 2 * pad - k) < 0) continue;
      Tensor x = Tensor::randn({h, w_, cin}, rng);
      Tensor wt = Tensor::randn({k, k, cin, cout}, rng);
      Tensor b = Tensor::randn({cout}, rng);
      Tensor got = conv2d(x, wt, b, stride, pad);
      Tensor want = naive_conv2d(x, wt, b, stride, pad);
      REQUIRE(got.shape() == want.shape());
      for (int64_t i = 0; i < got.size(); ++i)
        CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives all-ones gradient") {
    Tensor x = Tensor::zeros({2, 3}, true);
    Tape tape;
    Tensor loss = sum(x);
    tape.backward(loss);
    REQUIRE(x.has_grad());
    for (int i = 0; i < 6; ++i) CHECK(x.grad_array()[i] == 1.f);
  }
  SUBCASE("sum of x*x gives 2x") {
    Tensor x = Tensor::from_span({2}, std::array<float, 2>{1, 2});
    x.set_requires_grad(true);
    Tape tape;
    tape.backward(sum(mul(x, x)));
    CHECK(x.grad_array()[0] == doctest::Approx(2.f));
    CHECK(x.grad_array()[1] == doctest::Approx(4.f));
  }
  SUBCASE("mean of length 4 gives 0.25") {
    Tensor x = Tensor::zeros({4}, true);
    Tape tape;
    tape.backward(mean(x));
    for (int i = 0; i < 4; ++i) CHECK(x.grad_array()[i] == doctest::Approx(0.25f));
  }
  SUBCASE("non-scalar loss is rejected") {
    Tensor x = Tensor::zeros({2}, true);
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), ShapeError);
  }
  SUBCASE("diamond graph sums both paths") {
    Tensor x = Tensor::from_span({2}, std::array<float, 2>{0.5f, -1.f});
    x.set_requires_grad(true);
    Tape tape;
    Tensor f = mul(x, x);
    tape.backward(sum(add(f, f)));  // d/dx 2*x^2 = 4x
    CHECK(x.grad_array()[0] == doctest::Approx(2.f));
    CHECK(x.grad_array()[1] == doctest::Approx(-4.f));
  }
  SUBCASE("intermediate grads are freed, leaves keep theirs") {
    Tensor x = Tensor::zeros({3}, true);
    Tape tape;
    Tensor y = mul(x, x);
    Tensor loss = sum(y);
    tape.backward(loss);
    CHECK(x.has_grad());
    CHECK_FALSE(y.has_grad());
  }
}

TEST_CASE("finite differences validate every op") {
  GradCheckOpts opts;
  auto run = [&](const char* name, const std::function<Tensor(std::vector<Tensor>&)>& f,
                 const std::vector<Shape>& shapes, const GradCheckOpts& o) {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
      auto rep = grad_check(f, shapes, seed, o);
      INFO(std::string(name) << " seed " << seed << ": " << rep.worst);
      CHECK(rep.max_rel_err < o.tol);
    }
  };

  run("add+mul+scale",
      [](std::vector<Tensor>& in) { return sum(scale(mul(add(in[0], in[1]), in[0]), 0.7f)); },
      {{3, 4}, {3, 4}}, opts);
  run("sub", [](std::vector<Tensor>& in) { return sum(mul(sub(in[0], in[1]), in[0])); },
      {{5}, {5}}, opts);
  run("matmul",
      [](std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); }, {{3, 4}, {4, 2}}, opts);
  run("transpose-matmul",
      [](std::vector<Tensor>& in) { return sum(matmul(in[0], transpose(in[1]))); },
      {{3, 4}, {2, 4}}, opts);
  run("conv2d s1",
      [](std::vector<Tensor>& in) { return mean(conv2d(in[0], in[1], in[2], 1, 1)); },
      {{5, 5, 2}, {3, 3, 2, 3}, {3}}, opts);
  run("conv2d s2",
      [](std::vector<Tensor>& in) { return mean(conv2d(in[0], in[1], in[2], 2, 1)); },
      {{6, 6, 2}, {3, 3, 2, 2}, {2}}, opts);
  run("upsample2x",
      [](std::vector<Tensor>& in) { return mean(mul(upsample_nearest2x(in[0]), upsample_nearest2x(in[0]))); },
      {{3, 3, 2}}, opts);
  {
    GradCheckOpts o = opts;
    o.sanitize = [](std::vector<Tensor>& in) { push_away_from_zero(in[0], 0.05f); };
    run("leaky_relu", [](std::vector<Tensor>& in) { return sum(mul(leaky_relu(in[0]), in[0])); },
        {{4, 3}}, o);
  }
  run("sigmoid", [](std::vector<Tensor>& in) { return sum(mul(sigmoid(in[0]), in[0])); },
      {{6}}, opts);
  {
    GradCheckOpts o = opts;
    o.sanitize = [](std::vector<Tensor>& in) {
      in[0].array() = in[0].array().abs() + 0.3f;  // keep log well away from the clamp
    };
    run("log_clamped", [](std::vector<Tensor>& in) { return sum(log_clamped(in[0])); }, {{5}}, o);
  }
  run("softmax", [](std::vector<Tensor>& in) { return sum(mul(softmax(in[0]), in[0])); },
      {{3, 5}}, opts);
  run("layer_norm (2,8)",
      [](std::vector<Tensor>& in) { return sum(mul(layer_norm(in[0], in[1], in[2]), in[0])); },
      {{2, 8}, {8}, {8}}, opts);
  run("concat_last",
      [](std::vector<Tensor>& in) { return sum(mul(concat_last(in[0], in[1]), concat_last(in[1], in[0]))); },
      {{3, 2}, {3, 2}}, opts);
  run("reshape", [](std::vector<Tensor>& in) { return sum(mul(reshape(in[0], {6}), reshape(in[0], {6}))); },
      {{2, 3}}, opts);
  {
    GradCheckOpts o = opts;
    o.sanitize = [](std::vector<Tensor>& in) {
      for (auto& t : in) push_away_from_zero(t, 0.03f);  // |a-b| kink
    };
    run("l1_loss", [](std::vector<Tensor>& in) { return l1_loss(in[0], in[1]); }, {{3, 4}, {3, 4}}, o);
  }
  run("sq_l2", [](std::vector<Tensor>& in) { return sq_l2(in[0], in[1]); }, {{3, 4}, {3, 4}}, opts);
  run("softmax_xent (4,7)",
      [](std::vector<Tensor>& in) {
        return softmax_xent(in[0], {0, 3, 6, 2});
      },
      {{4, 7}}, opts);
  run("add_rowvec", [](std::vector<Tensor>& in) { return sum(mul(add_rowvec(in[0], in[1]), in[0])); },
      {{4, 3}, {3}}, opts);
  run("gather_rows",
      [](std::vector<Tensor>& in) { return sum(mul(gather_rows(in[0], {2, 0, 2, 1}), in[1])); },
      {{3, 4}, {4, 4}}, opts);
  run("mean", [](std::vector<Tensor>& in) { return mean(mul(in[0], in[0])); }, {{7}}, opts);
}

TEST_CASE("conv2d 1x1 kernel gradient equals the matmul gradient exactly") {
  Rng rng(7);
  Tensor x = Tensor::randn({4, 4, 3}, rng);
  Tensor w = Tensor::randn({1, 1, 3, 2}, rng);
  Tensor gscale = Tensor::randn({4, 4, 2}, rng);

  Tensor xc = x.clone(), wc = w.clone();
  xc.set_requires_grad(true);
  wc.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(sum(mul(conv2d(xc, wc, {}, 1, 0), gscale)));
  }

  Tensor xm = reshape(x.clone(), {16, 3}), wm = reshape(w.clone(), {3, 2});
  xm.set_requires_grad(true);
  wm.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(sum(mul(matmul(xm, wm), reshape(gscale, {16, 2}))));
  }

  for (int64_t i = 0; i < xc.size(); ++i) CHECK(xc.grad_array()[i] == xm.grad_array()[i]);
  for (int64_t i = 0; i < wc.size(); ++i) CHECK(wc.grad_array()[i] == wm.grad_array()[i]);
}

TEST_CASE("forward determinism: identical inputs give bit-identical outputs") {
  Rng rng(9);
  Tensor x = Tensor::randn({6, 6, 3}, rng);
  Tensor w = Tensor::randn({3, 3, 3, 4}, rng);
  Tensor a = conv2d(x, w, {}, 2, 1);
  Tensor b = conv2d(x, w, {}, 2, 1);
  for (int64_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
  Tensor s1 = softmax(x), s2 = softmax(x);
  for (int64_t i = 0; i < s1.size(); ++i) CHECK(s1.data()[i] == s2.data()[i]);
}

TEST_CASE("shape mismatches raise errors naming the op") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({4, 4, 2}), Tensor::zeros({3, 3, 3, 1}), {}, 1, 1),
                  ShapeError);
  CHECK_THROWS_AS(layer_norm(a, Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("adam update") {
  AdamConfig cfg;
  CHECK(cfg.lr == doctest::Approx(8e-5f));  // stage I/II default

  SUBCASE("zero gradient leaves the parameter unchanged") {
    std::vector<Tensor> params{Tensor::full({3}, 1.5f)};
    params[0].set_requires_grad(true);
    AdamState st(params, cfg);
    st.step(params);  // no grad accumulated at all
    for (int i = 0; i < 3; ++i) CHECK(params[0].data()[i] == 1.5f);

    params[0].grad_array() = Eigen::ArrayXf::Zero(3);  // explicit zero grad
    st.step(params);
    for (int i = 0; i < 3; ++i) CHECK(params[0].data()[i] == 1.5f);
  }

  SUBCASE("unit gradient from zero state moves by -lr") {
    std::vector<Tensor> params{Tensor::zeros({4})};
    params[0].set_requires_grad(true);
    AdamState st(params, cfg);
    params[0].grad_array() = Eigen::ArrayXf::Ones(4);
    st.step(params);
    CHECK(st.t() == 1);
    for (int i = 0; i < 4; ++i)
      CHECK(params[0].data()[i] == doctest::Approx(-cfg.lr).epsilon(1e-5));
  }

  SUBCASE("two steps against a hand-evaluated reference") {
    AdamConfig c2;
    c2.lr = 0.1f;
    std::vector<Tensor> params{Tensor::zeros({1})};
    params[0].set_requires_grad(true);
    AdamState st(params, c2);
    // g = 1 both steps; hand Adam: theta1 = -0.1; m2, v2 stay bias-corrected to 1
    params[0].grad_array() = Eigen::ArrayXf::Ones(1);
    st.step(params);
    const double theta1 = params[0].data()[0];
    CHECK(theta1 == doctest::Approx(-0.1).epsilon(1e-5));
    params[0].grad_array() = Eigen::ArrayXf::Ones(1);
    st.step(params);
    CHECK(params[0].data()[0] == doctest::Approx(-0.2).epsilon(1e-4));
  }
}

TEST_CASE("ops run pure when no tape is active") {
  Tensor x = Tensor::zeros({3}, true);
  Tensor y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}
