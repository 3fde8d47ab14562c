#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "vqr/gradcheck.hpp"
#include "vqr/vq.hpp"

using namespace vqr;

namespace {

// Reference scan, written independently of the quantizer: plain loops,
// float64 accumulation, strict < so the smallest index wins ties.
std::vector<int> brute_force_nn(const Tensor& z, const Tensor& codes) {
  const int64_t positions = z.size() / z.dim(z.rank() - 1);
  const int d = z.dim(z.rank() - 1);
  const int n = codes.dim(0);
  std::vector<int> out(static_cast<size_t>(positions), 0);
  for (int64_t p = 0; p < positions; ++p) {
    double best = 1e300;
    int arg = 0;
    for (int k = 0; k < n; ++k) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) {
        const double diff = double(z.data()[p * d + j]) - double(codes.data()[int64_t(k) * d + j]);
        acc += diff * diff;
      }
      if (acc < best) {
        best = acc;
        arg = k;
      }
    }
    out[size_t(p)] = arg;
  }
  return out;
}

Codebook make_codebook(const Tensor& codes) {
  Codebook cb;
  cb.codes = codes.clone();
  cb.n = codes.dim(0);
  cb.d = codes.dim(1);
  return cb;
}

}  // namespace

TEST_CASE("quantize picks the nearest code") {
  Tensor codes = Tensor::from_span({2, 2}, std::array<float, 4>{0, 0, 1, 1});
  Codebook cb = make_codebook(codes);
  Tensor z = Tensor::from_span({1, 1, 2}, std::array<float, 2>{0.9f, 1.2f});
  auto res = quantize(z, cb);
  CHECK(res.seq.indices[0] == 1);
  CHECK(res.z_q.data()[0] == 1.f);
  CHECK(res.z_q.data()[1] == 1.f);
  CHECK(res.dists.data()[0] == doctest::Approx(0.05).epsilon(1e-5));
}

TEST_CASE("quantize exact match and tie-breaking") {
  Rng rng(3);
  Tensor codes = Tensor::randn({5, 3}, rng);
  // duplicate rows: c0 == c1
  for (int j = 0; j < 3; ++j) codes.data()[1 * 3 + j] = codes.data()[j];
  Codebook cb = make_codebook(codes);

  Tensor z(Shape{1, 2, 3});
  for (int j = 0; j < 3; ++j) z.data()[j] = codes.data()[3 * 3 + j];  // exactly c3
  for (int j = 0; j < 3; ++j) z.data()[3 + j] = codes.data()[j] + 0.01f;  // near c0 == c1

  auto res = quantize(z, cb);
  CHECK(res.seq.indices[0] == 3);
  CHECK(res.dists.data()[0] == 0.f);
  CHECK(res.seq.indices[1] == 0);  // tie resolved to the smallest index
}

TEST_CASE("quantize agrees with the brute-force oracle" * doctest::timeout(60)) {
  Rng rng(77);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 2 + int(rng.uniform_int(0, 62));
    const int d = 1 + int(rng.uniform_int(0, 15));
    const int m = 1 + int(rng.uniform_int(0, 3));
    const int gn = 1 + int(rng.uniform_int(0, 3));
    Tensor codes = Tensor::randn({n, d}, rng);
    if (trial % 4 == 0 && n >= 4) {
      // plant duplicates and exact hits to exercise ties
      for (int j = 0; j < d; ++j) codes.data()[2 * d + j] = codes.data()[1 * d + j];
    }
    Codebook cb = make_codebook(codes);
    Tensor z = Tensor::randn({m, gn, d}, rng);
    if (trial % 5 == 0)
      for (int j = 0; j < d; ++j) z.data()[j] = codes.data()[(n - 1) * d + j];
    auto res = quantize(z, cb);
    auto want = brute_force_nn(z, codes);
    for (size_t i = 0; i < want.size(); ++i) CHECK(res.seq.indices[i] == want[i]);
  }
  // one full-size instance
  Tensor codes = Tensor::randn({1024, 256}, rng);
  Codebook cb = make_codebook(codes);
  Tensor z = Tensor::randn({2, 2, 256}, rng);
  auto res = quantize(z, cb);
  auto want = brute_force_nn(z, codes);
  for (size_t i = 0; i < want.size(); ++i) CHECK(res.seq.indices[i] == want[i]);
}

TEST_CASE("quantize is idempotent and permutation-consistent") {
  Rng rng(11);
  Tensor codes = Tensor::randn({16, 4}, rng);
  Codebook cb = make_codebook(codes);
  Tensor z = Tensor::randn({3, 3, 4}, rng);
  auto first = quantize(z, cb);
  auto second = quantize(first.z_q, cb);
  for (size_t i = 0; i < first.seq.indices.size(); ++i) {
    CHECK(second.seq.indices[i] == first.seq.indices[i]);
    CHECK(second.dists.data()[i] == 0.f);
  }
  for (int64_t i = 0; i < first.z_q.size(); ++i)
    CHECK(second.z_q.data()[i] == first.z_q.data()[i]);

  // permute codebook rows; indices follow the permutation, z_q unchanged
  std::vector<int> perm(16);
  for (int i = 0; i < 16; ++i) perm[size_t(i)] = i;
  for (int i = 15; i > 0; --i) std::swap(perm[size_t(i)], perm[size_t(rng.uniform_int(0, i))]);
  Tensor permuted(Shape{16, 4});
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 4; ++j) permuted.data()[perm[size_t(i)] * 4 + j] = codes.data()[i * 4 + j];
  auto res_p = quantize(z, make_codebook(permuted));
  for (size_t i = 0; i < first.seq.indices.size(); ++i)
    CHECK(res_p.seq.indices[i] == perm[size_t(first.seq.indices[i])]);
  for (int64_t i = 0; i < first.z_q.size(); ++i)
    CHECK(res_p.z_q.data()[i] == first.z_q.data()[i]);
}

TEST_CASE("straight-through estimator") {
  Rng rng(5);
  Tensor z = Tensor::randn({2, 2}, rng);
  Tensor zq = Tensor::randn({2, 2}, rng);

  SUBCASE("forward equals z_q") {
    Tensor out = straight_through(z, zq);
    for (int64_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == zq.data()[i]);
  }

  SUBCASE("incoming gradient is copied to z bitwise") {
    Tensor zl = z.clone();
    zl.set_requires_grad(true);
    Tensor g = Tensor::randn({2, 2}, rng);
    {
      Tape tape;
      tape.backward(sum(mul(straight_through(zl, zq), g)));
    }
    // d/dout of sum(out*g) is g; straight-through must hand exactly that to z
    for (int64_t i = 0; i < 4; ++i) CHECK(zl.grad_array()[i] == g.data()[i]);
  }

  SUBCASE("z_q producer receives nothing") {
    Tensor zl = z.clone(), zqul = zq.clone();
    zl.set_requires_grad(true);
    zqul.set_requires_grad(true);
    {
      Tape tape;
      tape.backward(sum(straight_through(zl, zqul)));
    }
    CHECK(zl.has_grad());
    CHECK_FALSE(zqul.has_grad());
  }

  SUBCASE("matches finite differences of the surrogate z + sg(z_q - z)") {
    // The op's forward does not depend on z, so the reference differences the
    // surrogate with the offset frozen; the op's gradient must equal the
    // surrogate's exactly, and the surrogate in turn must pass the oracle.
    GradCheckOpts opts;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
      Rng srng(seed * 104729);
      Tensor z0 = Tensor::randn({2, 3}, srng);
      Tensor zq0 = Tensor::randn({2, 3}, srng);
      Tensor target = Tensor::randn({2, 3}, srng);
      Tensor offset(z0.shape());
      offset.array() = zq0.array() - z0.array();  // sg(z_q - z) at the point

      Tensor z_st = z0.clone();
      z_st.set_requires_grad(true);
      {
        Tape tape;
        tape.backward(sq_l2(straight_through(z_st, zq0), target));
      }
      Tensor z_su = z0.clone();
      z_su.set_requires_grad(true);
      {
        Tape tape;
        tape.backward(sq_l2(add(z_su, offset), target));
      }
      // the surrogate re-rounds z + (z_q - z), so equal up to one ulp only
      for (int64_t i = 0; i < z0.size(); ++i)
        CHECK(z_st.grad_array()[i] ==
              doctest::Approx(z_su.grad_array()[i]).epsilon(1e-5));

      auto rep = grad_check(
          [&](std::vector<Tensor>& in) { return sq_l2(add(in[0], offset), target); },
          {{2, 3}}, seed, opts);
      INFO(rep.worst);
      CHECK(rep.max_rel_err < opts.tol);
    }
  }

  SUBCASE("shape mismatch rejected") {
    CHECK_THROWS_AS(straight_through(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
  }
}

TEST_CASE("code_feat_loss value and gradient routing") {
  SUBCASE("hand-evaluated value 1.25") {
    Tensor z = Tensor::from_span({2}, std::array<float, 2>{1, 0});
    Tensor zq = Tensor::from_span({2}, std::array<float, 2>{0, 0});
    CHECK(code_feat_loss(z, zq, 0.25f).item() == doctest::Approx(1.25).epsilon(1e-6));
  }
  SUBCASE("zero at z == z_q with zero gradients") {
    Rng rng(8);
    Tensor z = Tensor::randn({3, 2}, rng);
    Tensor zq = z.clone();
    z.set_requires_grad(true);
    zq.set_requires_grad(true);
    Tape tape;
    Tensor loss = code_feat_loss(z, zq);
    CHECK(loss.item() == 0.f);
    tape.backward(loss);
    if (z.has_grad())
      for (int64_t i = 0; i < z.size(); ++i) CHECK(z.grad_array()[i] == 0.f);
    if (zq.has_grad())
      for (int64_t i = 0; i < zq.size(); ++i) CHECK(zq.grad_array()[i] == 0.f);
  }
  SUBCASE("first term drives z_q only, second drives z only") {
    Rng rng(9);
    Tensor z = Tensor::randn({4}, rng), zq = Tensor::randn({4}, rng);
    z.set_requires_grad(true);
    zq.set_requires_grad(true);
    Tape tape;
    tape.backward(code_feat_loss(z, zq, 0.25f));
    for (int64_t i = 0; i < 4; ++i) {
      const float diff = z.data()[i] - zq.data()[i];
      CHECK(zq.grad_array()[i] == doctest::Approx(-2 * diff).epsilon(1e-4));
      CHECK(z.grad_array()[i] == doctest::Approx(0.25f * 2 * diff).epsilon(1e-4));
    }
  }
}

TEST_CASE("utilization and perplexity") {
  auto seqs_of = [](std::vector<int> idx) {
    CodeSequence s;
    s.indices = std::move(idx);
    s.m = 1;
    s.grid_n = int(s.indices.size());
    return std::vector<CodeSequence>{s};
  };
  SUBCASE("all identical tokens") {
    auto rep = utilization(seqs_of({3, 3, 3, 3}), 8);
    CHECK(rep.fraction_used == doctest::Approx(1.0 / 8));
    CHECK(rep.perplexity == doctest::Approx(1.0));
  }
  SUBCASE("uniform over all N") {
    auto rep = utilization(seqs_of({0, 1, 2, 3}), 4);
    CHECK(rep.fraction_used == doctest::Approx(1.0));
    CHECK(rep.perplexity == doctest::Approx(4.0));
  }
  SUBCASE("hand entropy: {0,0,1,1} with N=4") {
    auto rep = utilization(seqs_of({0, 0, 1, 1}), 4);
    CHECK(rep.fraction_used == doctest::Approx(0.5));
    CHECK(rep.perplexity == doctest::Approx(2.0));
  }
  SUBCASE("empty batch rejected") {
    CHECK_THROWS_AS(utilization({}, 4), ShapeError);
  }
}

TEST_CASE("straight-through makes d(loss)/dZ equal d(loss)/dZq bitwise") {
  Rng rng(21);
  Tensor z = Tensor::randn({2, 2, 3}, rng);
  Tensor codes = Tensor::randn({6, 3}, rng);
  Codebook cb = make_codebook(codes);
  auto q = quantize(z, cb);
  Tensor target = Tensor::randn({2, 2, 3}, rng);

  // route A: loss as a function of z through the straight-through op
  Tensor za = z.clone();
  za.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(sq_l2(straight_through(za, detach(q.z_q)), target));
  }
  // route B: the same loss with z_q treated as the variable directly
  Tensor zb = q.z_q.clone();
  zb.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(sq_l2(zb, target));
  }
  for (int64_t i = 0; i < za.size(); ++i) CHECK(za.grad_array()[i] == zb.grad_array()[i]);
}
