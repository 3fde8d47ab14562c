#pragma once

#include "vqr/nets.hpp"
#include "vqr/transformer.hpp"

namespace vqr {

/// Per-scale controllable transform. A small conv stack maps the concatenated
/// decoder/encoder features to an affine pair (alpha, beta) shaped like the
/// decoder feature; the final convs are zero-initialized so training starts
/// from the identity transform.
struct CftModule {
  ConvLayer mix;    // (Cd+Ce) -> Cd, 3x3
  ConvLayer alpha;  // Cd -> Cd, 3x3, zero-init
  ConvLayer beta;   // Cd -> Cd, 3x3, zero-init

  CftModule() = default;
  CftModule(int dec_channels, int enc_channels, Rng& rng);
  void collect(const std::string& prefix, ParamMap& out) const;
};

/// f_d + (alpha (.) f_d + beta) * w for explicit affine maps.
Tensor cft_transform(const Tensor& f_d, const Tensor& alpha, const Tensor& beta, float w);

/// Predicts (alpha, beta) from concat(f_d, f_e) and applies the transform.
/// w = 0 short-circuits to f_d itself (bitwise identity).
Tensor cft_apply(const Tensor& f_d, const Tensor& f_e, const CftModule& module, float w);

/// The full restoration model: LQ encoder, code predictor, frozen codebook
/// and decoder, per-scale controllable transforms, and the frozen stage-1
/// encoder that supplies ground-truth codes during training.
struct RestorationModel {
  AutoencoderConfig acfg;
  TransformerConfig tcfg;
  Encoder enc_lq;    // finetuned for restoration
  Encoder enc_hq;    // frozen stage-1 encoder
  Codebook codebook; // frozen after stage I
  Decoder decoder;   // frozen after stage I
  CodePredictor predictor;
  std::vector<CftModule> cft;  // one per decoder scale, coarsest first
  bool has_cft = false;
  float default_w = 0.f;

  void init_cft(Rng& rng);
};

struct RestoreOut {
  Tensor image;
  CodeSequence codes;
};

/// encode -> predict codes -> retrieve -> decode, with the controllable
/// transforms blended at weight w in [0,1]. Deterministic given weights.
RestoreOut restore(const RestorationModel& model, const Tensor& img, float w);

struct Stage3LossTerms {
  Tensor token, feature, l1, perceptual, adv_g, total;
};

/// Stage-II code-level losses plus the stage-I image-level losses on the
/// restored output, each at its original weight.
Stage3LossTerms stage3_loss(const Tensor& logits, const CodeSequence& gt_codes,
                            const Tensor& z_l, const Tensor& z_c_gt, const Tensor& hq,
                            const Tensor& restored, const Discriminator& disc,
                            const FeatureExtractor& phi, float lambda_token = 0.5f,
                            float lambda_adv = 0.8f, bool use_perceptual = true);

}  // namespace vqr
