#pragma once

#include "vqr/nets.hpp"
#include "vqr/tensor.hpp"
#include "vqr/vq.hpp"

namespace vqr {

struct TransformerConfig {
  int seq_len = 64;     // m * n token positions
  int dim = 64;         // d
  int vocab = 256;      // N codebook entries
  int layers = 4;       // toy default; the full profile uses 9
  int ff_mult = 2;      // feed-forward expansion; 0 disables the FF sublayer
  bool use_pe = true;   // sinusoidal embedding on queries and keys
};

/// Interleaved sin/cos table: entry(pos, 2i) = sin(pos / 10000^(2i/dim)),
/// entry(pos, 2i+1) = cos(same). dim must be even.
Tensor sinusoidal_pe(int length, int dim);

struct LinearLayer {
  Tensor w, b;
  LinearLayer() = default;
  LinearLayer(int in, int out, Rng& rng, bool zero_init = false);
  Tensor forward(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }
  void collect(const std::string& prefix, ParamMap& out) const;
};

/// Pre-norm single-head attention block with residual, followed by an
/// optional 2-layer feed-forward with its own residual. The positional table
/// is added to Q and K after projection, never to V.
struct AttentionBlock {
  NormLayer norm_attn;
  LinearLayer q, k, v, o;
  NormLayer norm_ff;
  LinearLayer ff1, ff2;
  bool has_ff = true;

  AttentionBlock() = default;
  AttentionBlock(int dim, int ff_mult, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& pe) const;
  void collect(const std::string& prefix, ParamMap& out) const;
};

/// Predicts the N-way code distribution at every latent position in one pass.
struct CodePredictor {
  TransformerConfig cfg;
  Tensor pe;  // constant, not a parameter
  std::vector<AttentionBlock> blocks;
  NormLayer final_norm;
  LinearLayer head;

  CodePredictor() = default;
  CodePredictor(const TransformerConfig& cfg, Rng& rng);

  /// logits over codes for a flattened (seq_len, dim) feature.
  Tensor forward(const Tensor& tokens) const;
  void collect(const std::string& prefix, ParamMap& out) const;
};

struct PredictResult {
  Tensor logits;     // (m*n, N)
  CodeSequence seq;  // argmax per position
};

/// Flattens (m,n,d), runs the predictor, argmaxes every row.
PredictResult predict_codes(const Tensor& z, const CodePredictor& t);

struct Stage2LossTerms {
  Tensor token, feature, total;
};

/// lambda_token * mean-CE(logits, gt) + sq_l2(z, sg(z_gt_quantized)).
Stage2LossTerms stage2_loss(const Tensor& logits, const CodeSequence& gt, const Tensor& z,
                            const Tensor& z_c_gt, float lambda_token = 0.5f);

/// Fraction of positions where the two sequences agree.
double code_accuracy(const CodeSequence& pred, const CodeSequence& gt);

}  // namespace vqr
