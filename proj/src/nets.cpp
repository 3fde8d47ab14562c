#include "vqr/nets.hpp"

#include <cmath>

#include "vqr/image.hpp"

namespace vqr {

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

int AutoencoderConfig::levels() const {
  int r = compression, l = 0;
  while (r > 1) {
    r >>= 1;
    ++l;
  }
  return l;
}

void AutoencoderConfig::validate() const {
  if (compression < 2 || (compression & (compression - 1)) != 0)
    throw ShapeError("config: compression must be a power of 2, got " +
                     std::to_string(compression));
  if (image_size % compression != 0)
    throw ShapeError("config: image_size " + std::to_string(image_size) +
                     " not divisible by compression " + std::to_string(compression));
  if (code_dim < 1 || codebook_size < 2) throw ShapeError("config: bad code dims");
  if (num_res_blocks < 2) throw ShapeError("config: need at least one res block per net");
}

std::vector<int> AutoencoderConfig::channel_schedule() const {
  std::vector<int> ch;
  ch.push_back(base_channels);
  for (int l = 0; l < levels(); ++l)
    ch.push_back(std::min(max_channels, ch.back() * 2));
  return ch;
}

std::vector<int> AutoencoderConfig::blocks_per_level() const {
  const int per_net = num_res_blocks / 2;
  const int l = levels();
  std::vector<int> counts(size_t(l), 0);
  int remaining = per_net;
  for (int i = l - 1; i >= 0 && remaining > 0; --i) {
    counts[size_t(i)] = 1;
    --remaining;
  }
  counts[size_t(l - 1)] += remaining;  // extras sit at the bottleneck
  return counts;
}

AutoencoderConfig AutoencoderConfig::toy() { return AutoencoderConfig{}; }

AutoencoderConfig AutoencoderConfig::paper() {
  AutoencoderConfig c;
  c.image_size = 512;
  c.compression = 32;
  c.code_dim = 256;
  c.codebook_size = 1024;
  c.base_channels = 32;
  c.max_channels = 256;
  c.num_res_blocks = 12;
  return c;
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

namespace {
Tensor he_conv(int kh, int kw, int cin, int cout, Rng& rng) {
  const float std = std::sqrt(2.f / float(kh * kw * cin));
  Tensor w = Tensor::randn({kh, kw, cin, cout}, rng, std);
  w.set_requires_grad(true);
  return w;
}
}  // namespace

ConvLayer::ConvLayer(int kh, int kw, int cin, int cout, int stride_, int pad_, Rng& rng,
                     bool zero_init) {
  stride = stride_;
  pad = pad_;
  w = zero_init ? Tensor::zeros({kh, kw, cin, cout}, true) : he_conv(kh, kw, cin, cout, rng);
  b = Tensor::zeros({cout}, true);
}

void ConvLayer::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".w", w);
  out.add(prefix + ".b", b);
}

NormLayer::NormLayer(int channels) {
  gamma = Tensor::full({channels}, 1.f);
  gamma.set_requires_grad(true);
  beta = Tensor::zeros({channels}, true);
}

void NormLayer::collect(const std::string& prefix, ParamMap& out) const {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
}

ResBlock::ResBlock(int channels, Rng& rng)
    : c1(3, 3, channels, channels, 1, 1, rng),
      c2(3, 3, channels, channels, 1, 1, rng),
      n1(channels) {}

Tensor ResBlock::forward(const Tensor& x) const {
  return add(x, c2.forward(leaky_relu(n1.forward(c1.forward(x)))));
}

void ResBlock::collect(const std::string& prefix, ParamMap& out) const {
  c1.collect(prefix + ".c1", out);
  n1.collect(prefix + ".n1", out);
  c2.collect(prefix + ".c2", out);
}

// ---------------------------------------------------------------------------
// encoder
// ---------------------------------------------------------------------------

Encoder::Encoder(const AutoencoderConfig& cfg_, Rng& rng) : cfg(cfg_) {
  cfg.validate();
  const auto ch = cfg.channel_schedule();
  const auto nblocks = cfg.blocks_per_level();
  stem = ConvLayer(3, 3, 3, ch[0], 1, 1, rng);
  for (int l = 0; l < cfg.levels(); ++l) {
    down.emplace_back(3, 3, ch[size_t(l)], ch[size_t(l) + 1], 2, 1, rng);
    std::vector<ResBlock> level;
    for (int b = 0; b < nblocks[size_t(l)]; ++b) level.emplace_back(ch[size_t(l) + 1], rng);
    blocks.push_back(std::move(level));
  }
  head_norm = NormLayer(ch.back());
  head = ConvLayer(1, 1, ch.back(), cfg.code_dim, 1, 0, rng);
  // codes start in a tiny ball around the origin; matching the head's output
  // scale keeps early nearest-code assignments spread across the whole book
  head.w.array() *= 0.02f;
}

Tensor Encoder::forward(const Tensor& img, EncoderTaps* taps) const {
  if (img.rank() != 3 || img.dim(0) != cfg.image_size || img.dim(1) != cfg.image_size ||
      img.dim(2) != 3)
    throw ShapeError("encode: expected (" + std::to_string(cfg.image_size) + "," +
                     std::to_string(cfg.image_size) + ",3), got " + shape_str(img.shape()));
  Tensor x = leaky_relu(stem.forward(img));
  if (taps) taps->features.push_back(x);
  for (size_t l = 0; l < down.size(); ++l) {
    x = leaky_relu(down[l].forward(x));
    for (const auto& blk : blocks[l]) x = blk.forward(x);
    if (taps) taps->features.push_back(x);
  }
  return head.forward(head_norm.forward(x));
}

void Encoder::collect(const std::string& prefix, ParamMap& out) const {
  stem.collect(prefix + ".stem", out);
  for (size_t l = 0; l < down.size(); ++l) {
    down[l].collect(prefix + ".down" + std::to_string(l), out);
    for (size_t b = 0; b < blocks[l].size(); ++b)
      blocks[l][b].collect(prefix + ".lvl" + std::to_string(l) + ".res" + std::to_string(b), out);
  }
  head_norm.collect(prefix + ".head_norm", out);
  head.collect(prefix + ".head", out);
}

// ---------------------------------------------------------------------------
// decoder
// ---------------------------------------------------------------------------

Decoder::Decoder(const AutoencoderConfig& cfg_, Rng& rng) : cfg(cfg_) {
  cfg.validate();
  auto ch = cfg.channel_schedule();  // stem..bottleneck
  const auto nblocks = cfg.blocks_per_level();
  stem = ConvLayer(1, 1, cfg.code_dim, ch.back(), 1, 0, rng);
  for (int l = cfg.levels() - 1; l >= 0; --l) {
    std::vector<ResBlock> level;
    for (int b = 0; b < nblocks[size_t(l)]; ++b) level.emplace_back(ch[size_t(l) + 1], rng);
    blocks.push_back(std::move(level));
    up.emplace_back(3, 3, ch[size_t(l) + 1], ch[size_t(l)], 1, 1, rng);
  }
  out_norm = NormLayer(ch[0]);
  out_conv = ConvLayer(3, 3, ch[0], 3, 1, 1, rng);
}

Tensor Decoder::forward(const Tensor& z,
                        const std::function<Tensor(int, const Tensor&)>& scale_hook) const {
  const int m = cfg.latent_size();
  if (z.rank() != 3 || z.dim(0) != m || z.dim(1) != m || z.dim(2) != cfg.code_dim)
    throw ShapeError("decode: expected (" + std::to_string(m) + "," + std::to_string(m) + "," +
                     std::to_string(cfg.code_dim) + "), got " + shape_str(z.shape()));
  Tensor x = leaky_relu(stem.forward(z));
  for (size_t i = 0; i < up.size(); ++i) {
    for (const auto& blk : blocks[i]) x = blk.forward(x);
    if (scale_hook) x = scale_hook(int(i), x);
    x = leaky_relu(up[i].forward(upsample_nearest2x(x)));
  }
  if (scale_hook) x = scale_hook(int(up.size()), x);
  // sigmoid keeps the output inside [0,1]; the clamp contract is met by range
  return sigmoid(out_conv.forward(out_norm.forward(x)));
}

void Decoder::collect(const std::string& prefix, ParamMap& out) const {
  stem.collect(prefix + ".stem", out);
  for (size_t i = 0; i < up.size(); ++i) {
    for (size_t b = 0; b < blocks[i].size(); ++b)
      blocks[i][b].collect(prefix + ".lvl" + std::to_string(i) + ".res" + std::to_string(b), out);
    up[i].collect(prefix + ".up" + std::to_string(i), out);
  }
  out_norm.collect(prefix + ".out_norm", out);
  out_conv.collect(prefix + ".out_conv", out);
}

// ---------------------------------------------------------------------------
// discriminator / feature extractor
// ---------------------------------------------------------------------------

Discriminator::Discriminator(Rng& rng, int base) {
  convs.emplace_back(3, 3, 3, base, 2, 1, rng);
  convs.emplace_back(3, 3, base, base * 2, 2, 1, rng);
  convs.emplace_back(3, 3, base * 2, base * 2, 2, 1, rng);
  convs.emplace_back(3, 3, base * 2, 1, 1, 1, rng);
}

Tensor Discriminator::forward(const Tensor& img) const {
  Tensor x = img;
  for (size_t i = 0; i + 1 < convs.size(); ++i) x = leaky_relu(convs[i].forward(x));
  return convs.back().forward(x);  // raw logit map
}

void Discriminator::collect(const std::string& prefix, ParamMap& out) const {
  for (size_t i = 0; i < convs.size(); ++i)
    convs[i].collect(prefix + ".conv" + std::to_string(i), out);
}

FeatureExtractor::FeatureExtractor(uint64_t seed_) : seed(seed_) {
  Rng rng(seed_);
  convs.emplace_back(3, 3, 3, 8, 1, 1, rng);
  convs.emplace_back(3, 3, 8, 12, 2, 1, rng);
  convs.emplace_back(3, 3, 12, 16, 2, 1, rng);
  convs.emplace_back(3, 3, 16, 16, 2, 1, rng);
  for (auto& c : convs) {
    c.w.set_requires_grad(false);
    c.b.set_requires_grad(false);
  }
}

std::vector<Tensor> FeatureExtractor::taps(const Tensor& img) const {
  std::vector<Tensor> out;
  Tensor x = img;
  for (const auto& c : convs) {
    x = leaky_relu(c.forward(x));
    out.push_back(x);
  }
  return out;
}

Tensor FeatureExtractor::deepest(const Tensor& img) const { return taps(img).back(); }

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Tensor perceptual_loss(const FeatureExtractor& phi, const Tensor& a, const Tensor& b) {
  auto ta = phi.taps(a);
  auto tb = phi.taps(b);
  Tensor total = sq_l2(ta[0], tb[0]);
  for (size_t i = 1; i < ta.size(); ++i) total = add(total, sq_l2(ta[i], tb[i]));
  return total;
}

Tensor gen_adv_loss(const Discriminator& disc, const Tensor& fake) {
  return scale(mean(log_clamped(sigmoid(disc.forward(fake)))), -1.f);
}

Tensor disc_loss(const Discriminator& disc, const Tensor& real, const Tensor& fake_detached) {
  Tensor real_term = mean(log_clamped(sigmoid(disc.forward(real))));
  // log(1 - sigmoid(x)) == log(sigmoid(-x))
  Tensor fake_term = mean(log_clamped(sigmoid(scale(disc.forward(fake_detached), -1.f))));
  return scale(add(real_term, fake_term), -1.f);
}

Stage1LossTerms stage1_loss(const Tensor& hq, const Tensor& rec, const Tensor& z,
                            const Tensor& z_q, const Discriminator& disc,
                            const FeatureExtractor& phi, float beta, float lambda_adv,
                            bool use_perceptual) {
  Stage1LossTerms t;
  t.l1 = l1_loss(rec, hq);
  t.perceptual = use_perceptual ? perceptual_loss(phi, hq, rec) : Tensor::scalar(0.f);
  t.code = code_feat_loss(z, z_q, beta);
  t.adv_g = gen_adv_loss(disc, rec);
  t.total = add(add(add(t.l1, t.perceptual), t.code), scale(t.adv_g, lambda_adv));
  return t;
}

uint64_t params_checksum(const ParamMap& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : params.items) {
    h ^= fnv1a64(reinterpret_cast<const uint8_t*>(name.data()), name.size());
    h *= 0x100000001b3ULL;
    h ^= fnv1a64(reinterpret_cast<const uint8_t*>(t.data()), size_t(t.size()) * 4);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace vqr
