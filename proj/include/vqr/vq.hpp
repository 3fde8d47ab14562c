#pragma once

#include "vqr/tensor.hpp"

namespace vqr {

/// Learnable codebook: N code vectors of dimension d. Trained during stage I,
/// frozen afterwards.
struct Codebook {
  Tensor codes;  // (N, d)
  int n = 0;
  int d = 0;

  Codebook() = default;
  Codebook(int n, int d, Rng& rng);

  /// Per-element uniform(-1/N, 1/N) initialization.
  static Codebook init_uniform(int n, int d, Rng& rng);
};

/// Token indices on the latent grid plus the grid dims.
struct CodeSequence {
  std::vector<int> indices;  // length m*n, each in [0, N)
  int m = 0;
  int grid_n = 0;
};

struct QuantizeResult {
  Tensor z_q;        // (m, n, d); rows gathered from the codebook (differentiable
                     // w.r.t. the codebook, not w.r.t. z)
  CodeSequence seq;  // winning indices
  Tensor dists;      // (m, n) winning squared distances
};

/// Nearest-code lookup: each latent position is replaced by the codebook row
/// minimizing squared L2 distance; ties resolve to the smallest index.
QuantizeResult quantize(const Tensor& z, const Codebook& cb);

/// Forward value of z_q with the gradient copied straight through to z;
/// z_q's producer receives nothing from this path.
Tensor straight_through(const Tensor& z, const Tensor& z_q);

/// sq_l2(sg(z), z_q) + beta * sq_l2(z, sg(z_q)): codebook learns from the
/// first term, the encoder from the second.
Tensor code_feat_loss(const Tensor& z, const Tensor& z_q, float beta = 0.25f);

struct UtilizationReport {
  double fraction_used = 0.0;  // distinct indices / N
  double perplexity = 0.0;     // exp(entropy of the empirical distribution)
};

UtilizationReport utilization(const std::vector<CodeSequence>& seqs, int n);

}  // namespace vqr
