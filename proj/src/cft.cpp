#include "vqr/cft.hpp"

namespace vqr {

CftModule::CftModule(int dec_channels, int enc_channels, Rng& rng)
    : mix(3, 3, dec_channels + enc_channels, dec_channels, 1, 1, rng),
      alpha(3, 3, dec_channels, dec_channels, 1, 1, rng, /*zero_init=*/true),
      beta(3, 3, dec_channels, dec_channels, 1, 1, rng, /*zero_init=*/true) {}

void CftModule::collect(const std::string& prefix, ParamMap& out) const {
  mix.collect(prefix + ".mix", out);
  alpha.collect(prefix + ".alpha", out);
  beta.collect(prefix + ".beta", out);
}

Tensor cft_transform(const Tensor& f_d, const Tensor& alpha, const Tensor& beta, float w) {
  if (w < 0.f || w > 1.f)
    throw ShapeError("cft: w = " + std::to_string(w) + " outside [0,1]");
  if (!same_shape(f_d.shape(), alpha.shape()) || !same_shape(f_d.shape(), beta.shape()))
    throw ShapeError("cft: affine maps " + shape_str(alpha.shape()) + " do not match feature " +
                     shape_str(f_d.shape()));
  if (w == 0.f) return f_d;
  return add(f_d, scale(add(mul(alpha, f_d), beta), w));
}

Tensor cft_apply(const Tensor& f_d, const Tensor& f_e, const CftModule& module, float w) {
  if (w < 0.f || w > 1.f)
    throw ShapeError("cft: w = " + std::to_string(w) + " outside [0,1]");
  if (f_d.rank() != 3 || f_e.rank() != 3 || f_d.dim(0) != f_e.dim(0) || f_d.dim(1) != f_e.dim(1))
    throw ShapeError("cft: misaligned features " + shape_str(f_d.shape()) + " vs " +
                     shape_str(f_e.shape()));
  if (w == 0.f) return f_d;  // bitwise identity
  Tensor h = leaky_relu(module.mix.forward(concat_last(f_d, f_e)));
  return cft_transform(f_d, module.alpha.forward(h), module.beta.forward(h), w);
}

void RestorationModel::init_cft(Rng& rng) {
  const auto ch = acfg.channel_schedule();
  const int levels = acfg.levels();
  cft.clear();
  for (int i = 0; i <= levels; ++i) {
    const int c = ch[size_t(levels - i)];  // decoder and encoder mirror
    cft.emplace_back(c, c, rng);
  }
  has_cft = true;
}

RestoreOut restore(const RestorationModel& model, const Tensor& img, float w) {
  if (w < 0.f || w > 1.f)
    throw ShapeError("restore: w = " + std::to_string(w) + " outside [0,1]");
  RestoreOut out;
  EncoderTaps taps;
  Tensor z = model.enc_lq.forward(img, &taps);
  PredictResult pred = predict_codes(z, model.predictor);
  out.codes = pred.seq;
  Tensor z_hat = reshape(gather_rows(model.codebook.codes, pred.seq.indices),
                         {z.dim(0), z.dim(1), z.dim(2)});
  const int levels = model.acfg.levels();
  std::function<Tensor(int, const Tensor&)> hook;
  if (model.has_cft && w > 0.f) {
    hook = [&](int scale, const Tensor& f_d) {
      const Tensor& f_e = taps.features[size_t(levels - scale)];
      return cft_apply(f_d, f_e, model.cft[size_t(scale)], w);
    };
  }
  out.image = model.decoder.forward(z_hat, hook);
  return out;
}

Stage3LossTerms stage3_loss(const Tensor& logits, const CodeSequence& gt_codes,
                            const Tensor& z_l, const Tensor& z_c_gt, const Tensor& hq,
                            const Tensor& restored, const Discriminator& disc,
                            const FeatureExtractor& phi, float lambda_token, float lambda_adv,
                            bool use_perceptual) {
  Stage3LossTerms t;
  Stage2LossTerms code = stage2_loss(logits, gt_codes, z_l, z_c_gt, lambda_token);
  t.token = code.token;
  t.feature = code.feature;
  t.l1 = l1_loss(restored, hq);
  t.perceptual = use_perceptual ? perceptual_loss(phi, hq, restored) : Tensor::scalar(0.f);
  t.adv_g = gen_adv_loss(disc, restored);
  t.total = add(add(code.total, add(t.l1, t.perceptual)), scale(t.adv_g, lambda_adv));
  return t;
}

}  // namespace vqr
