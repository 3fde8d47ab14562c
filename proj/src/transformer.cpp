#include "vqr/transformer.hpp"

#include <cmath>

namespace vqr {

Tensor sinusoidal_pe(int length, int dim) {
  if (dim % 2 != 0)
    throw ShapeError("sinusoidal_pe: dim must be even, got " + std::to_string(dim));
  Tensor pe(Shape{length, dim});
  for (int pos = 0; pos < length; ++pos)
    for (int i = 0; i < dim / 2; ++i) {
      const double freq = std::pow(10000.0, double(2 * i) / double(dim));
      pe.data()[int64_t(pos) * dim + 2 * i] = float(std::sin(pos / freq));
      pe.data()[int64_t(pos) * dim + 2 * i + 1] = float(std::cos(pos / freq));
    }
  return pe;
}

LinearLayer::LinearLayer(int in, int out, Rng& rng, bool zero_init) {
  if (zero_init) {
    w = Tensor::zeros({in, out}, true);
  } else {
    w = Tensor::randn({in, out}, rng, std::sqrt(2.f / float(in)));
    w.set_requires_grad(true);
  }
  b = Tensor::zeros({out}, true);
}

void LinearLayer::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".w", w);
  out.add(prefix + ".b", b);
}

AttentionBlock::AttentionBlock(int dim, int ff_mult, Rng& rng)
    : norm_attn(dim),
      q(dim, dim, rng),
      k(dim, dim, rng),
      v(dim, dim, rng),
      o(dim, dim, rng),
      has_ff(ff_mult > 0) {
  if (has_ff) {
    norm_ff = NormLayer(dim);
    ff1 = LinearLayer(dim, dim * ff_mult, rng);
    ff2 = LinearLayer(dim * ff_mult, dim, rng);
  }
}

Tensor AttentionBlock::forward(const Tensor& x, const Tensor& pe) const {
  const int dim = x.dim(1);
  Tensor h = norm_attn.forward(x);
  Tensor qm = q.forward(h);
  Tensor km = k.forward(h);
  Tensor vm = v.forward(h);
  if (pe.defined()) {
    qm = add(qm, pe);
    km = add(km, pe);
  }
  Tensor scores = scale(matmul(qm, transpose(km)), 1.f / std::sqrt(float(dim)));
  Tensor attn = matmul(softmax(scores), vm);
  Tensor out = add(x, o.forward(attn));
  if (has_ff)
    out = add(out, ff2.forward(leaky_relu(ff1.forward(norm_ff.forward(out)))));
  return out;
}

void AttentionBlock::collect(const std::string& prefix, ParamMap& out) const {
  norm_attn.collect(prefix + ".norm_attn", out);
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
  if (has_ff) {
    norm_ff.collect(prefix + ".norm_ff", out);
    ff1.collect(prefix + ".ff1", out);
    ff2.collect(prefix + ".ff2", out);
  }
}

CodePredictor::CodePredictor(const TransformerConfig& cfg_, Rng& rng) : cfg(cfg_) {
  pe = cfg.use_pe ? sinusoidal_pe(cfg.seq_len, cfg.dim) : Tensor();
  for (int l = 0; l < cfg.layers; ++l) blocks.emplace_back(cfg.dim, cfg.ff_mult, rng);
  final_norm = NormLayer(cfg.dim);
  head = LinearLayer(cfg.dim, cfg.vocab, rng);
}

Tensor CodePredictor::forward(const Tensor& tokens) const {
  if (tokens.rank() != 2 || tokens.dim(0) != cfg.seq_len || tokens.dim(1) != cfg.dim)
    throw ShapeError("code predictor: expected (" + std::to_string(cfg.seq_len) + "," +
                     std::to_string(cfg.dim) + "), got " + shape_str(tokens.shape()));
  Tensor x = tokens;
  for (const auto& blk : blocks) x = blk.forward(x, pe);
  return head.forward(final_norm.forward(x));
}

void CodePredictor::collect(const std::string& prefix, ParamMap& out) const {
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(prefix + ".blk" + std::to_string(i), out);
  final_norm.collect(prefix + ".final_norm", out);
  head.collect(prefix + ".head", out);
}

PredictResult predict_codes(const Tensor& z, const CodePredictor& t) {
  if (z.rank() != 3 || z.dim(0) * z.dim(1) != t.cfg.seq_len || z.dim(2) != t.cfg.dim)
    throw ShapeError("predict_codes: feature " + shape_str(z.shape()) +
                     " does not match predictor (" + std::to_string(t.cfg.seq_len) + "," +
                     std::to_string(t.cfg.dim) + ")");
  PredictResult res;
  res.logits = t.forward(reshape(z, {t.cfg.seq_len, t.cfg.dim}));
  res.seq.m = z.dim(0);
  res.seq.grid_n = z.dim(1);
  res.seq.indices.resize(size_t(t.cfg.seq_len));
  const int n = t.cfg.vocab;
  for (int r = 0; r < t.cfg.seq_len; ++r) {
    const float* row = res.logits.data() + int64_t(r) * n;
    int arg = 0;
    for (int i = 1; i < n; ++i)
      if (row[i] > row[arg]) arg = i;
    res.seq.indices[size_t(r)] = arg;
  }
  return res;
}

Stage2LossTerms stage2_loss(const Tensor& logits, const CodeSequence& gt, const Tensor& z,
                            const Tensor& z_c_gt, float lambda_token) {
  if (logits.rank() != 2 || int(gt.indices.size()) != logits.dim(0))
    throw ShapeError("stage2_loss: logits " + shape_str(logits.shape()) + " vs " +
                     std::to_string(gt.indices.size()) + " gt tokens");
  for (int idx : gt.indices)
    if (idx >= logits.dim(1))
      throw ShapeError("stage2_loss: gt index " + std::to_string(idx) + " >= vocab " +
                       std::to_string(logits.dim(1)));
  Stage2LossTerms t;
  t.token = softmax_xent(logits, gt.indices);
  t.feature = sq_l2(z, detach(z_c_gt));
  t.total = add(scale(t.token, lambda_token), t.feature);
  return t;
}

double code_accuracy(const CodeSequence& pred, const CodeSequence& gt) {
  if (pred.indices.size() != gt.indices.size())
    throw ShapeError("code_accuracy: length mismatch " + std::to_string(pred.indices.size()) +
                     " vs " + std::to_string(gt.indices.size()));
  if (pred.indices.empty()) throw ShapeError("code_accuracy: empty sequences");
  int64_t hits = 0;
  for (size_t i = 0; i < pred.indices.size(); ++i)
    if (pred.indices[i] == gt.indices[i]) ++hits;
  return double(hits) / double(pred.indices.size());
}

}  // namespace vqr
