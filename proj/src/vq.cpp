#include "vqr/vq.hpp"

#include <cmath>

namespace vqr {

Codebook::Codebook(int n_, int d_, Rng& rng) {
  n = n_;
  d = d_;
  if (n < 2 || d < 1) throw ShapeError("codebook: need N>=2, d>=1");
  codes = Tensor::rand_uniform(Shape{n, d}, rng, -1.f / float(n), 1.f / float(n));
  codes.set_requires_grad(true);
}

Codebook Codebook::init_uniform(int n, int d, Rng& rng) { return Codebook(n, d, rng); }

QuantizeResult quantize(const Tensor& z, const Codebook& cb) {
  if (z.rank() != 3 || z.dim(2) != cb.d)
    throw ShapeError("quantize: feature " + shape_str(z.shape()) + " vs codebook dim " +
                     std::to_string(cb.d));
  const int m = z.dim(0), gn = z.dim(1), d = cb.d, n = cb.n;

  QuantizeResult res;
  res.seq.m = m;
  res.seq.grid_n = gn;
  res.seq.indices.resize(size_t(m) * gn);
  res.dists = Tensor(Shape{m, gn});

  // codebook rows in float64 once per call; distances accumulate in float64
  // so ties are decided identically to the reference scan
  Eigen::MatrixXd c(n, d);
  for (int k = 0; k < n; ++k)
    for (int j = 0; j < d; ++j) c(k, j) = double(cb.codes.data()[int64_t(k) * d + j]);

  Eigen::VectorXd zv(d);
  for (int p = 0; p < m * gn; ++p) {
    for (int j = 0; j < d; ++j) zv[j] = double(z.data()[int64_t(p) * d + j]);
    int best = 0;
    double best_d = (c.row(0).transpose() - zv).squaredNorm();
    for (int k = 1; k < n; ++k) {
      const double dist = (c.row(k).transpose() - zv).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    res.seq.indices[size_t(p)] = best;
    res.dists.data()[p] = float(best_d);
  }

  res.z_q = reshape(gather_rows(cb.codes, res.seq.indices), Shape{m, gn, d});
  return res;
}

Tensor straight_through(const Tensor& z, const Tensor& z_q) {
  if (!same_shape(z.shape(), z_q.shape()))
    throw ShapeError("straight_through: shape mismatch " + shape_str(z.shape()) + " vs " +
                     shape_str(z_q.shape()));
  Tensor out(z.shape());
  out.array() = z_q.array();
  if (detail::grad_enabled_for({&z})) {
    auto sz = z.st(), so = out.st();
    out.set_requires_grad(true);
    Tape::active()->record(out, {z, z_q},
                           [sz, so] { detail::acc_grad(*sz, so->grad); });
  }
  return out;
}

Tensor code_feat_loss(const Tensor& z, const Tensor& z_q, float beta) {
  if (beta < 0.f) throw ShapeError("code_feat_loss: beta must be >= 0");
  Tensor codebook_term = sq_l2(detach(z), z_q);
  Tensor commit_term = sq_l2(z, detach(z_q));
  return add(codebook_term, scale(commit_term, beta));
}

UtilizationReport utilization(const std::vector<CodeSequence>& seqs, int n) {
  if (seqs.empty()) throw ShapeError("utilization: empty batch");
  std::vector<int64_t> counts(size_t(n), 0);
  int64_t total = 0;
  for (const auto& s : seqs)
    for (int idx : s.indices) {
      if (idx < 0 || idx >= n)
        throw ShapeError("utilization: index " + std::to_string(idx) + " out of range");
      ++counts[size_t(idx)];
      ++total;
    }
  UtilizationReport rep;
  int64_t used = 0;
  double entropy = 0.0;
  for (int64_t c : counts) {
    if (c == 0) continue;
    ++used;
    const double p = double(c) / double(total);
    entropy -= p * std::log(p);
  }
  rep.fraction_used = double(used) / double(n);
  rep.perplexity = std::exp(entropy);
  return rep;
}

}  // namespace vqr
