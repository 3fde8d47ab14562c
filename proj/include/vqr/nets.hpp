#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vqr/tensor.hpp"
#include "vqr/vq.hpp"

namespace vqr {

/// Named parameter registry used for checkpoints and optimizers; enumeration
/// order is fixed by construction order.
struct ParamMap {
  std::vector<std::pair<std::string, Tensor>> items;
  void add(const std::string& name, const Tensor& t) { items.emplace_back(name, t); }
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(items.size());
    for (const auto& [_, t] : items) out.push_back(t);
    return out;
  }
};

struct AutoencoderConfig {
  int image_size = 64;     // H = W
  int compression = 8;     // r; the latent grid is (H/r, W/r)
  int code_dim = 64;       // d
  int codebook_size = 256; // N
  int base_channels = 8;
  int max_channels = 64;
  int num_res_blocks = 6;  // total across encoder + decoder

  int levels() const;                        // log2(compression)
  int latent_size() const { return image_size / compression; }
  std::vector<int> channel_schedule() const; // stem..bottleneck, levels+1 entries
  std::vector<int> blocks_per_level() const; // per net, one entry per level
  void validate() const;

  static AutoencoderConfig toy();
  static AutoencoderConfig paper();
};

// layer building blocks -----------------------------------------------------

struct ConvLayer {
  Tensor w, b;
  int stride = 1, pad = 1;
  ConvLayer() = default;
  ConvLayer(int kh, int kw, int cin, int cout, int stride, int pad, Rng& rng,
            bool zero_init = false);
  Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
  void collect(const std::string& prefix, ParamMap& out) const;
};

struct NormLayer {
  Tensor gamma, beta;
  NormLayer() = default;
  explicit NormLayer(int channels);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  void collect(const std::string& prefix, ParamMap& out) const;
};

/// conv - norm - leaky_relu - conv, plus the identity skip.
struct ResBlock {
  ConvLayer c1, c2;
  NormLayer n1;
  ResBlock() = default;
  ResBlock(int channels, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamMap& out) const;
};

// encoder / decoder ----------------------------------------------------------

struct EncoderTaps {
  std::vector<Tensor> features;  // finest scale first: image_size, /2, ..., latent
};

/// Downsamples by the compression ratio into a (m,n,d) code-space feature.
struct Encoder {
  AutoencoderConfig cfg;
  ConvLayer stem;
  std::vector<ConvLayer> down;
  std::vector<std::vector<ResBlock>> blocks;  // per level
  NormLayer head_norm;
  ConvLayer head;

  Encoder() = default;
  Encoder(const AutoencoderConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& img, EncoderTaps* taps = nullptr) const;
  void collect(const std::string& prefix, ParamMap& out) const;
};

/// Mirror of the encoder; optional per-scale hook rewrites the feature before
/// each upsample (the controllable-transform insertion point).
struct Decoder {
  AutoencoderConfig cfg;
  ConvLayer stem;
  std::vector<std::vector<ResBlock>> blocks;  // coarsest level first
  std::vector<ConvLayer> up;
  NormLayer out_norm;
  ConvLayer out_conv;

  Decoder() = default;
  Decoder(const AutoencoderConfig& cfg, Rng& rng);
  /// hook(scale_index, feature) with scale_index 0 at the latent resolution.
  Tensor forward(const Tensor& z,
                 const std::function<Tensor(int, const Tensor&)>& scale_hook = {}) const;
  void collect(const std::string& prefix, ParamMap& out) const;
};

/// Small strided-conv real/fake classifier; returns a logit map.
struct Discriminator {
  std::vector<ConvLayer> convs;
  Discriminator() = default;
  explicit Discriminator(Rng& rng, int base = 16);
  Tensor forward(const Tensor& img) const;
  void collect(const std::string& prefix, ParamMap& out) const;
};

/// Frozen random conv stack standing in for a pretrained perceptual network;
/// taps after every activation. Deterministic given the seed.
struct FeatureExtractor {
  std::vector<ConvLayer> convs;
  uint64_t seed = 0;
  FeatureExtractor() = default;
  explicit FeatureExtractor(uint64_t seed);
  std::vector<Tensor> taps(const Tensor& img) const;
  Tensor deepest(const Tensor& img) const;
};

// stage-I losses -------------------------------------------------------------

struct Stage1LossTerms {
  Tensor l1, perceptual, code, adv_g, total;
};

/// l1 + perceptual + code_feat + lambda_adv * (-log D(fake)); the generator
/// side of the usual non-saturating objective.
Stage1LossTerms stage1_loss(const Tensor& hq, const Tensor& rec, const Tensor& z,
                            const Tensor& z_q, const Discriminator& disc,
                            const FeatureExtractor& phi, float beta = 0.25f,
                            float lambda_adv = 0.8f, bool use_perceptual = true);

Tensor perceptual_loss(const FeatureExtractor& phi, const Tensor& a, const Tensor& b);

/// -(mean log D(real) + mean log(1 - D(fake))); fake must already be detached.
Tensor disc_loss(const Discriminator& disc, const Tensor& real, const Tensor& fake_detached);

/// Generator adversarial term -mean log D(fake).
Tensor gen_adv_loss(const Discriminator& disc, const Tensor& fake);

/// FNV hash over a parameter list; freezing checks compare these.
uint64_t params_checksum(const ParamMap& params);

}  // namespace vqr
