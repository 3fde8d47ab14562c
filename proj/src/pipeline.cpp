#include "vqr/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vqr/image.hpp"

namespace vqr {

namespace {

// --------------------------------------------------------------------------
// logging (VQR_LOG = quiet | info | debug)
// --------------------------------------------------------------------------

int log_level() {
  static const int level = [] {
    const char* env = std::getenv("VQR_LOG");
    if (!env) return 1;
    const std::string v(env);
    if (v == "quiet") return 0;
    if (v == "debug") return 2;
    return 1;
  }();
  return level;
}

void log_info(const char* fmt, ...) {
  if (log_level() < 1) return;
  va_list args;
  va_start(args, fmt);
  std::vfprintf(stderr, fmt, args);
  std::fputc('\n', stderr);
  va_end(args);
}

// --------------------------------------------------------------------------
// shared helpers
// --------------------------------------------------------------------------

void copy_params(const ParamMap& src, ParamMap& dst) {
  if (src.items.size() != dst.items.size())
    throw ShapeError("copy_params: " + std::to_string(src.items.size()) + " vs " +
                     std::to_string(dst.items.size()) + " parameters");
  for (size_t i = 0; i < src.items.size(); ++i) {
    if (!same_shape(src.items[i].second.shape(), dst.items[i].second.shape()))
      throw ShapeError("copy_params: shape mismatch at " + src.items[i].first);
    dst.items[i].second.array() = src.items[i].second.array();
  }
}

void set_requires_grad(ParamMap& params, bool v) {
  for (auto& [_, t] : params.items) t.set_requires_grad(v);
}

void clip_global_norm(std::vector<Tensor>& params, double max_norm) {
  double total = 0;
  for (auto& p : params)
    if (p.has_grad()) total += double(p.grad_array().square().sum());
  total = std::sqrt(total);
  if (total <= max_norm) return;
  const float s = float(max_norm / (total + 1e-12));
  for (auto& p : params)
    if (p.has_grad()) p.grad_array() *= s;
}

bool params_finite(const ParamMap& params) {
  for (const auto& [_, t] : params.items)
    if (!t.array().isFinite().all()) return false;
  return true;
}

std::string cfg_value(const std::vector<std::pair<std::string, std::string>>& echo,
                      const std::string& key) {
  for (const auto& [k, v] : echo)
    if (k == key) return v;
  return "";
}

TrainConfig config_from_echo(const std::vector<std::pair<std::string, std::string>>& echo) {
  TrainConfig cfg;
  for (const auto& [k, v] : echo) {
    if (k == "iters_done") continue;
    config_set(cfg, k, v);
  }
  cfg.resolve();
  return cfg;
}

// reconstruction forward shared by validation and the reconstruct entry point
Tensor recon_forward(const Encoder& enc, const Decoder& dec, const Codebook& cb,
                     bool use_codebook, const Tensor& img, CodeSequence* seq_out) {
  Tensor z = enc.forward(img);
  if (!use_codebook) {
    if (seq_out) *seq_out = CodeSequence{};
    return dec.forward(z);
  }
  auto q = quantize(z, cb);
  if (seq_out) *seq_out = q.seq;
  return dec.forward(q.z_q);
}

}  // namespace

// --------------------------------------------------------------------------
// corpus
// --------------------------------------------------------------------------

Corpus load_or_gen_corpus(const TrainConfig& cfg) {
  Corpus corpus;
  if (cfg.dataset_dir.empty()) {
    Dataset ds = gen_dataset(cfg.dataset_n, cfg.data_seed, cfg.image_size);
    corpus.train_count = ds.train_count;
    corpus.specs = ds.specs;
    corpus.images.reserve(ds.images.size());
    for (const auto& img : ds.images) corpus.images.push_back(to_float(img));
    return corpus;
  }
  const std::string manifest = cfg.dataset_dir + "/manifest.txt";
  std::ifstream f(manifest);
  if (!f) throw IoError("corpus: cannot open " + manifest);
  std::string line;
  std::vector<std::string> files;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    int index;
    std::string filename;
    if (!(is >> index >> filename)) throw IoError("corpus: bad manifest line: " + line);
    files.push_back(filename);
  }
  if (files.empty()) throw IoError("corpus: empty manifest " + manifest);
  for (const auto& name : files) {
    ImageU8 img = load_png(cfg.dataset_dir + "/" + name);
    if (img.h != cfg.image_size || img.w != cfg.image_size)
      throw IoError("corpus: " + name + " is " + std::to_string(img.w) + "x" +
                    std::to_string(img.h) + ", config wants " + std::to_string(cfg.image_size));
    corpus.images.push_back(to_float(img));
  }
  const int n = int(corpus.images.size());
  corpus.train_count = n - n / 10;
  return corpus;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  for (size_t i = 0; i < ds.images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "face_%05zu.png", i);
    save_png(dir + "/" + name, ds.images[i]);
    manifest << spec_manifest_line(int(i), name, ds.specs[i]) << "\n";
  }
  std::ofstream f(dir + "/manifest.txt", std::ios::trunc);
  f << manifest.str();
  if (!f) throw IoError("corpus: failed writing manifest in " + dir);
}

// --------------------------------------------------------------------------
// degradation synthesis
// --------------------------------------------------------------------------

Tensor synth_lq(const Tensor& hq, const TrainConfig& cfg, Rng& rng) {
  if (cfg.degrade_mode == "mask") {
    MaskSpec spec = random_mask_spec(rng, hq.dim(0), hq.dim(1), cfg.mask_lo, cfg.mask_hi);
    return apply_mask(hq, polyline_mask(spec, hq.dim(0), hq.dim(1)));
  }
  return degrade(hq, sample_params(rng));
}

DegradationParams sample_bucket_params(Rng& rng, int bucket) {
  if (bucket < 0 || bucket > 2) throw ShapeError("bucket must be 0, 1 or 2");
  static const double sig[4] = {1, 5, 10, 15};
  static const double rds[4] = {1, 10, 20, 30};
  static const double del[4] = {0, 6, 13, 20};
  static const int q[4] = {90, 70, 50, 30};  // heavier bucket = lower quality
  DegradationParams p;
  p.sigma = rng.uniform(sig[bucket], sig[bucket + 1]);
  p.r_ds = rng.uniform(rds[bucket], rds[bucket + 1]);
  p.delta = rng.uniform(del[bucket], del[bucket + 1]);
  p.q = int(rng.uniform_int(q[bucket + 1], q[bucket]));
  p.seed = rng.next_u64();
  return p;
}

DegradationParams median_params(uint64_t seed) {
  DegradationParams p;
  p.sigma = 8.0;
  p.r_ds = 15.5;
  p.delta = 10.0;
  p.q = 60;
  p.seed = seed;
  return p;
}

// --------------------------------------------------------------------------
// stage I
// --------------------------------------------------------------------------

namespace {

struct Stage1Nets {
  Encoder enc;
  Decoder dec;
  Codebook cb;
  Discriminator disc;
};

Stage1Nets build_stage1_nets(const TrainConfig& cfg, Rng& rng) {
  Stage1Nets n;
  const AutoencoderConfig acfg = cfg.autoencoder();
  n.enc = Encoder(acfg, rng);
  n.dec = Decoder(acfg, rng);
  n.cb = Codebook(acfg.codebook_size, acfg.code_dim, rng);
  n.disc = Discriminator(rng, cfg.disc_base);
  return n;
}

void add_stage1_tensors(Checkpoint& ck, const Stage1Nets& nets, bool use_codebook) {
  ParamMap pm;
  nets.enc.collect("enc", pm);
  nets.dec.collect("dec", pm);
  if (use_codebook) pm.add("codebook", nets.cb.codes);
  nets.disc.collect("disc", pm);
  ck.add_params(pm);
}

}  // namespace

StageResult train_stage1(const TrainConfig& cfg_in) {
  TrainConfig cfg = cfg_in;
  cfg.resolve();
  if (cfg.stage != 1) throw ConfigError("train_stage1: config says stage " + std::to_string(cfg.stage));
  Corpus corpus = load_or_gen_corpus(cfg);

  Rng rng(cfg.seed);
  Stage1Nets nets = build_stage1_nets(cfg, rng);
  const FeatureExtractor phi(cfg.phi_seed);

  ParamMap gmap;
  nets.enc.collect("enc", gmap);
  nets.dec.collect("dec", gmap);
  if (cfg.use_codebook) gmap.add("codebook", nets.cb.codes);
  ParamMap dmap;
  nets.disc.collect("disc", dmap);
  auto gparams = gmap.tensors();
  auto dparams = dmap.tensors();

  AdamConfig ac;
  ac.lr = float(cfg.lr);
  AdamState opt_g(gparams, ac), opt_d(dparams, ac);

  int64_t start_iter = 0;
  if (!cfg.checkpoint_in.empty()) {
    Checkpoint prev = load_checkpoint(cfg.checkpoint_in);
    if (prev.stage != 1)
      throw ConfigError("train_stage1: resume checkpoint has stage " + std::to_string(prev.stage));
    ParamMap all;
    nets.enc.collect("enc", all);
    nets.dec.collect("dec", all);
    if (cfg.use_codebook) all.add("codebook", nets.cb.codes);
    nets.disc.collect("disc", all);
    prev.load_into(all);
    prev.load_opt("adam_g", opt_g);
    prev.load_opt("adam_d", opt_d);
    if (prev.has_rng) rng.set_state(prev.rng);
    start_iter = std::stoll(prev.config_value("iters_done"));
    log_info("[stage1] resumed from %s at iteration %lld", cfg.checkpoint_in.c_str(),
             (long long)start_iter);
  }

  auto save = [&](const std::string& path, int64_t iters_done) {
    Checkpoint ck;
    ck.stage = 1;
    ck.config_echo = cfg.echo();
    ck.config_echo.emplace_back("iters_done", std::to_string(iters_done));
    add_stage1_tensors(ck, nets, cfg.use_codebook);
    ck.add_opt("adam_g", opt_g);
    ck.add_opt("adam_d", opt_d);
    ck.rng = rng.state();
    ck.has_rng = true;
    save_checkpoint(path, ck);
  };

  auto quick_val_psnr = [&](int count) {
    TapePause pause;
    double acc = 0;
    const int n = std::min(count, corpus.val_count());
    for (int i = 0; i < n; ++i) {
      Tensor rec = recon_forward(nets.enc, nets.dec, nets.cb, cfg.use_codebook, corpus.val(i), nullptr);
      const double p = psnr(rec, corpus.val(i));
      acc += std::isinf(p) ? 60.0 : p;
    }
    return n ? acc / n : 0.0;
  };

  StageResult res;
  std::vector<CodeSequence> window_seqs;
  for (int64_t it = start_iter; it < cfg.iters; ++it) {
    std::vector<int> batch_idx;
    for (int b = 0; b < cfg.batch; ++b)
      batch_idx.push_back(int(rng.uniform_int(0, corpus.train_count - 1)));

    std::vector<Tensor> fakes;
    double loss_val = 0, l1_v = 0, per_v = 0, code_v = 0, adv_v = 0;
    {
      Tape tape;
      Tensor total;
      for (int b = 0; b < cfg.batch; ++b) {
        const Tensor& hq = corpus.train(batch_idx[size_t(b)]);
        Tensor z = nets.enc.forward(hq);
        Tensor sample_loss;
        if (cfg.use_codebook) {
          auto q = quantize(z, nets.cb);
          window_seqs.push_back(q.seq);
          Tensor rec = nets.dec.forward(straight_through(z, q.z_q));
          auto terms = stage1_loss(hq, rec, z, q.z_q, nets.disc, phi, float(cfg.beta),
                                   float(cfg.lambda_adv), cfg.use_perceptual);
          sample_loss = terms.total;
          l1_v += terms.l1.item64();
          per_v += terms.perceptual.item64();
          code_v += terms.code.item64();
          adv_v += terms.adv_g.item64();
          fakes.push_back(detach(rec));
        } else {
          Tensor rec = nets.dec.forward(z);
          Tensor l1 = l1_loss(rec, hq);
          Tensor per = cfg.use_perceptual ? perceptual_loss(phi, hq, rec) : Tensor::scalar(0.f);
          Tensor adv = gen_adv_loss(nets.disc, rec);
          sample_loss = add(add(l1, per), scale(adv, float(cfg.lambda_adv)));
          l1_v += l1.item64();
          per_v += per.item64();
          adv_v += adv.item64();
          fakes.push_back(detach(rec));
        }
        total = total.defined() ? add(total, sample_loss) : sample_loss;
      }
      total = scale(total, 1.f / float(cfg.batch));
      loss_val = total.item64();
      if (!std::isfinite(loss_val)) {
        const std::string dump = cfg.checkpoint_out + ".aborted";
        if (params_finite(gmap)) save(dump, it);
        throw TrainingAbort("stage1: non-finite loss at iteration " + std::to_string(it), dump);
      }
      tape.backward(total);
      if (cfg.grad_clip > 0) clip_global_norm(gparams, cfg.grad_clip);
      opt_g.step(gparams);
    }
    {
      Tape tape;
      Tensor dl;
      for (int b = 0; b < cfg.batch; ++b) {
        Tensor term = disc_loss(nets.disc, corpus.train(batch_idx[size_t(b)]), fakes[size_t(b)]);
        dl = dl.defined() ? add(dl, term) : term;
      }
      dl = scale(dl, 1.f / float(cfg.batch));
      tape.backward(dl);
      opt_d.step(dparams);
    }
    res.loss_curve.push_back(loss_val);

    if ((it + 1) % cfg.log_every == 0) {
      double frac = 0, perp = 0;
      if (cfg.use_codebook && !window_seqs.empty()) {
        auto u = utilization(window_seqs, cfg.codebook_size);
        frac = u.fraction_used;
        perp = u.perplexity;
      }
      log_info("[stage1 %6lld/%lld] loss %.4f (l1 %.4f per %.4f code %.4f adv %.4f) util %.3f perp %.1f",
               (long long)(it + 1), (long long)cfg.iters, loss_val, l1_v / cfg.batch,
               per_v / cfg.batch, code_v / cfg.batch, adv_v / cfg.batch, frac, perp);
      window_seqs.clear();
    }
    if ((it + 1) % cfg.val_every == 0)
      log_info("[stage1 %6lld] val psnr %.2f dB", (long long)(it + 1),
               quick_val_psnr(cfg.val_images));
  }

  // final validation: reconstruction PSNR and codebook utilization
  {
    TapePause pause;
    double acc = 0;
    std::vector<CodeSequence> val_seqs;
    for (int i = 0; i < corpus.val_count(); ++i) {
      CodeSequence seq;
      Tensor rec = recon_forward(nets.enc, nets.dec, nets.cb, cfg.use_codebook, corpus.val(i), &seq);
      const double p = psnr(rec, corpus.val(i));
      acc += std::isinf(p) ? 60.0 : p;
      if (cfg.use_codebook) val_seqs.push_back(seq);
    }
    res.final_val_psnr = corpus.val_count() ? acc / corpus.val_count() : 0.0;
    if (!val_seqs.empty()) {
      auto u = utilization(val_seqs, cfg.codebook_size);
      res.util_fraction = u.fraction_used;
      res.util_perplexity = u.perplexity;
    }
  }

  save(cfg.checkpoint_out, cfg.iters);
  res.checkpoint_path = cfg.checkpoint_out;
  log_info("[stage1] done: val psnr %.2f dB, utilization %.3f, perplexity %.1f -> %s",
           res.final_val_psnr, res.util_fraction, res.util_perplexity,
           cfg.checkpoint_out.c_str());
  return res;
}

// --------------------------------------------------------------------------
// stage II
// --------------------------------------------------------------------------

namespace {

struct FrozenPrior {
  Encoder enc_hq;  // ground-truth code source
  Decoder dec;
  Codebook cb;
  Discriminator disc;  // carried through for stage III
};

FrozenPrior load_frozen_prior(const Checkpoint& ck, const TrainConfig& cfg, Rng& rng) {
  FrozenPrior p;
  const AutoencoderConfig acfg = cfg.autoencoder();
  p.enc_hq = Encoder(acfg, rng);
  p.dec = Decoder(acfg, rng);
  p.cb = Codebook(acfg.codebook_size, acfg.code_dim, rng);
  p.disc = Discriminator(rng, cfg.disc_base);
  ParamMap pm;
  p.enc_hq.collect("enc", pm);
  p.dec.collect("dec", pm);
  pm.add("codebook", p.cb.codes);
  p.disc.collect("disc", pm);
  ck.load_into(pm);
  set_requires_grad(pm, false);
  return p;
}

ParamMap frozen_prior_map(const FrozenPrior& p) {
  ParamMap pm;
  pm.add("codebook", p.cb.codes);
  p.dec.collect("dec", pm);
  return pm;
}

}  // namespace

StageResult train_stage2(const TrainConfig& cfg_in) {
  TrainConfig cfg = cfg_in;
  cfg.resolve();
  if (cfg.stage != 2) throw ConfigError("train_stage2: config says stage " + std::to_string(cfg.stage));
  if (cfg.checkpoint_in.empty()) throw ConfigError("train_stage2: checkpoint_in required");
  Corpus corpus = load_or_gen_corpus(cfg);

  Checkpoint prev = load_checkpoint(cfg.checkpoint_in);
  const bool resuming = prev.stage == 2;
  if (prev.stage != 1 && !resuming)
    throw ConfigError("train_stage2: need a stage-1 checkpoint, got stage " +
                      std::to_string(prev.stage));

  Rng rng(cfg.seed);
  FrozenPrior prior = load_frozen_prior(prev, cfg, rng);
  const AutoencoderConfig acfg = cfg.autoencoder();

  Encoder enc_lq(acfg, rng);
  {
    ParamMap src, dst;
    prior.enc_hq.collect("enc", src);
    enc_lq.collect("enc", dst);
    copy_params(src, dst);
  }
  const TransformerConfig tcfg = cfg.transformer();
  CodePredictor predictor;
  const bool has_predictor = cfg.lookup != "nn";
  if (has_predictor) predictor = CodePredictor(tcfg, rng);

  ParamMap tmap;
  enc_lq.collect("enc_lq", tmap);
  if (has_predictor) predictor.collect("t", tmap);
  auto tparams = tmap.tensors();
  AdamConfig ac;
  ac.lr = float(cfg.lr);
  AdamState opt(tparams, ac);

  int64_t start_iter = 0;
  if (resuming) {
    ParamMap mine;
    enc_lq.collect("enc_lq", mine);
    if (has_predictor) predictor.collect("t", mine);
    prev.load_into(mine);
    prev.load_opt("adam_s2", opt);
    if (prev.has_rng) rng.set_state(prev.rng);
    start_iter = std::stoll(prev.config_value("iters_done"));
    log_info("[stage2] resumed at iteration %lld", (long long)start_iter);
  }

  // ground-truth codes are fixed by the frozen encoder: compute once
  std::vector<CodeSequence> gt_train(size_t(corpus.train_count));
  std::vector<Tensor> zc_train(size_t(corpus.train_count));
  std::vector<CodeSequence> gt_val(size_t(corpus.val_count()));
  {
    TapePause pause;
    for (int i = 0; i < corpus.train_count; ++i) {
      auto q = quantize(prior.enc_hq.forward(corpus.train(i)), prior.cb);
      gt_train[size_t(i)] = q.seq;
      zc_train[size_t(i)] = q.z_q;
    }
    for (int i = 0; i < corpus.val_count(); ++i)
      gt_val[size_t(i)] = quantize(prior.enc_hq.forward(corpus.val(i)), prior.cb).seq;
  }
  log_info("[stage2] ground-truth codes cached for %d train / %d val images",
           corpus.train_count, corpus.val_count());

  const uint64_t frozen_before = params_checksum(frozen_prior_map(prior));

  auto lookup_seq = [&](const Tensor& z_l) {
    if (has_predictor) return predict_codes(z_l, predictor).seq;
    return quantize(z_l, prior.cb).seq;
  };

  auto val_accuracy = [&]() {
    TapePause pause;
    double acc = 0;
    for (int i = 0; i < corpus.val_count(); ++i) {
      Rng drng = Rng(cfg.degrade_seed).fork(uint64_t(i));
      Tensor lq = synth_lq(corpus.val(i), cfg, drng);
      acc += code_accuracy(lookup_seq(enc_lq.forward(lq)), gt_val[size_t(i)]);
    }
    return corpus.val_count() ? acc / corpus.val_count() : 0.0;
  };

  auto save = [&](const std::string& path, int64_t iters_done) {
    Checkpoint ck;
    ck.stage = 2;
    ck.config_echo = cfg.echo();
    ck.config_echo.emplace_back("iters_done", std::to_string(iters_done));
    ParamMap pm;
    prior.enc_hq.collect("enc", pm);
    prior.dec.collect("dec", pm);
    pm.add("codebook", prior.cb.codes);
    prior.disc.collect("disc", pm);
    enc_lq.collect("enc_lq", pm);
    if (has_predictor) predictor.collect("t", pm);
    ck.add_params(pm);
    ck.add_opt("adam_s2", opt);
    ck.rng = rng.state();
    ck.has_rng = true;
    save_checkpoint(path, ck);
  };

  StageResult res;
  res.frozen_checksum_before = frozen_before;
  for (int64_t it = start_iter; it < cfg.iters; ++it) {
    std::vector<int> batch_idx;
    for (int b = 0; b < cfg.batch; ++b)
      batch_idx.push_back(int(rng.uniform_int(0, corpus.train_count - 1)));
    std::vector<Tensor> lqs;
    for (int b = 0; b < cfg.batch; ++b)
      lqs.push_back(synth_lq(corpus.train(batch_idx[size_t(b)]), cfg, rng));

    double loss_val = 0;
    {
      Tape tape;
      Tensor total;
      for (int b = 0; b < cfg.batch; ++b) {
        const int i = batch_idx[size_t(b)];
        Tensor z_l = enc_lq.forward(lqs[size_t(b)]);
        Tensor sample_loss;
        if (has_predictor) {
          Tensor logits = predictor.forward(reshape(z_l, {tcfg.seq_len, tcfg.dim}));
          auto terms = stage2_loss(logits, gt_train[size_t(i)], z_l, zc_train[size_t(i)],
                                   float(cfg.lambda_token));
          sample_loss = terms.total;
        } else {
          sample_loss = sq_l2(z_l, zc_train[size_t(i)]);  // feature matching only
        }
        total = total.defined() ? add(total, sample_loss) : sample_loss;
      }
      total = scale(total, 1.f / float(cfg.batch));
      loss_val = total.item64();
      if (!std::isfinite(loss_val)) {
        const std::string dump = cfg.checkpoint_out + ".aborted";
        if (params_finite(tmap)) save(dump, it);
        throw TrainingAbort("stage2: non-finite loss at iteration " + std::to_string(it), dump);
      }
      tape.backward(total);
      if (cfg.grad_clip > 0) clip_global_norm(tparams, cfg.grad_clip);
      opt.step(tparams);
    }
    res.loss_curve.push_back(loss_val);
    if ((it + 1) % cfg.log_every == 0)
      log_info("[stage2 %6lld/%lld] loss %.4f", (long long)(it + 1), (long long)cfg.iters,
               loss_val);
    if ((it + 1) % cfg.val_every == 0)
      log_info("[stage2 %6lld] val code accuracy %.4f", (long long)(it + 1), val_accuracy());
  }

  res.final_val_code_acc = val_accuracy();
  res.frozen_checksum_after = params_checksum(frozen_prior_map(prior));
  save(cfg.checkpoint_out, cfg.iters);
  res.checkpoint_path = cfg.checkpoint_out;
  log_info("[stage2] done: val code accuracy %.4f (chance %.4f) -> %s", res.final_val_code_acc,
           1.0 / cfg.codebook_size, cfg.checkpoint_out.c_str());
  return res;
}

// --------------------------------------------------------------------------
// stage III
// --------------------------------------------------------------------------

StageResult train_stage3(const TrainConfig& cfg_in) {
  TrainConfig cfg = cfg_in;
  cfg.resolve();
  if (cfg.stage != 3) throw ConfigError("train_stage3: config says stage " + std::to_string(cfg.stage));
  if (cfg.checkpoint_in.empty()) throw ConfigError("train_stage3: checkpoint_in required");
  Corpus corpus = load_or_gen_corpus(cfg);

  Checkpoint prev = load_checkpoint(cfg.checkpoint_in);
  const bool resuming = prev.stage == 3;
  if (prev.stage != 2 && !resuming)
    throw ConfigError("train_stage3: need a stage-2 checkpoint, got stage " +
                      std::to_string(prev.stage));
  if (prev.config_value("lookup") == "nn")
    throw ConfigError("train_stage3: the nn-lookup variant has no predictor to build on");

  // the predictor geometry is whatever stage II trained
  cfg.lookup = prev.config_value("lookup");
  cfg.t_layers = int(std::stol(prev.config_value("t_layers")));
  cfg.t_ff_mult = int(std::stol(prev.config_value("t_ff_mult")));

  Rng rng(cfg.seed);
  FrozenPrior prior = load_frozen_prior(prev, cfg, rng);
  const AutoencoderConfig acfg = cfg.autoencoder();
  const TransformerConfig tcfg_prev = cfg.transformer();

  Encoder enc_lq(acfg, rng);
  CodePredictor predictor(tcfg_prev, rng);
  {
    ParamMap pm;
    enc_lq.collect("enc_lq", pm);
    predictor.collect("t", pm);
    prev.load_into(pm);
  }
  // the predictor stays fixed in this stage; only E_L and the transforms move
  {
    ParamMap pm;
    predictor.collect("t", pm);
    set_requires_grad(pm, false);
  }

  RestorationModel model;
  model.acfg = acfg;
  model.tcfg = tcfg_prev;
  model.enc_lq = enc_lq;
  model.enc_hq = prior.enc_hq;
  model.codebook = prior.cb;
  model.decoder = prior.dec;
  model.predictor = predictor;
  model.init_cft(rng);

  if (cfg.finetune_decoder) {
    ParamMap pm;
    prior.dec.collect("dec", pm);
    set_requires_grad(pm, true);
  }

  const FeatureExtractor phi(cfg.phi_seed);

  ParamMap gmap;
  enc_lq.collect("enc_lq", gmap);
  for (size_t i = 0; i < model.cft.size(); ++i)
    model.cft[i].collect("cft." + std::to_string(i), gmap);
  if (cfg.finetune_decoder) model.decoder.collect("dec", gmap);
  ParamMap dmap;
  prior.disc.collect("disc", dmap);
  auto gparams = gmap.tensors();
  auto dparams = dmap.tensors();
  AdamConfig ac;
  ac.lr = float(cfg.lr);
  AdamState opt_g(gparams, ac), opt_d(dparams, ac);

  int64_t start_iter = 0;
  if (resuming) {
    ParamMap mine = gmap;
    prev.load_into(mine);
    prev.load_opt("adam_s3", opt_g);
    prev.load_opt("adam_d", opt_d);
    if (prev.has_rng) rng.set_state(prev.rng);
    start_iter = std::stoll(prev.config_value("iters_done"));
    log_info("[stage3] resumed at iteration %lld", (long long)start_iter);
  }

  // ground-truth codes from the frozen stage-1 encoder, as in stage II
  std::vector<CodeSequence> gt_train(size_t(corpus.train_count));
  std::vector<Tensor> zc_train(size_t(corpus.train_count));
  {
    TapePause pause;
    for (int i = 0; i < corpus.train_count; ++i) {
      auto q = quantize(prior.enc_hq.forward(corpus.train(i)), prior.cb);
      gt_train[size_t(i)] = q.seq;
      zc_train[size_t(i)] = q.z_q;
    }
  }

  ParamMap frozen_map = frozen_prior_map(prior);  // codebook + decoder trunk
  StageResult res;
  res.frozen_checksum_before = cfg.finetune_decoder ? 0 : params_checksum(frozen_map);

  const int levels = acfg.levels();
  auto save = [&](const std::string& path, int64_t iters_done) {
    Checkpoint ck;
    ck.stage = 3;
    ck.config_echo = cfg.echo();
    ck.config_echo.emplace_back("iters_done", std::to_string(iters_done));
    ParamMap pm;
    prior.enc_hq.collect("enc", pm);
    prior.dec.collect("dec", pm);
    pm.add("codebook", prior.cb.codes);
    prior.disc.collect("disc", pm);
    enc_lq.collect("enc_lq", pm);
    predictor.collect("t", pm);
    for (size_t i = 0; i < model.cft.size(); ++i)
      model.cft[i].collect("cft." + std::to_string(i), pm);
    ck.add_params(pm);
    ck.add_opt("adam_s3", opt_g);
    ck.add_opt("adam_d", opt_d);
    ck.rng = rng.state();
    ck.has_rng = true;
    save_checkpoint(path, ck);
  };

  for (int64_t it = start_iter; it < cfg.iters; ++it) {
    std::vector<int> batch_idx;
    for (int b = 0; b < cfg.batch; ++b)
      batch_idx.push_back(int(rng.uniform_int(0, corpus.train_count - 1)));
    std::vector<Tensor> lqs;
    for (int b = 0; b < cfg.batch; ++b)
      lqs.push_back(synth_lq(corpus.train(batch_idx[size_t(b)]), cfg, rng));

    std::vector<Tensor> fakes;
    double loss_val = 0;
    {
      Tape tape;
      Tensor total;
      for (int b = 0; b < cfg.batch; ++b) {
        const int i = batch_idx[size_t(b)];
        EncoderTaps taps;
        Tensor z_l = enc_lq.forward(lqs[size_t(b)], &taps);
        Tensor logits = predictor.forward(reshape(z_l, {tcfg_prev.seq_len, tcfg_prev.dim}));
        // decode from the predicted codes with the transforms blended at w_train
        PredictResult pr;
        {
          // argmax without re-running the predictor
          pr.logits = logits;
          pr.seq.m = z_l.dim(0);
          pr.seq.grid_n = z_l.dim(1);
          pr.seq.indices.resize(size_t(tcfg_prev.seq_len));
          for (int r = 0; r < tcfg_prev.seq_len; ++r) {
            const float* row = logits.data() + int64_t(r) * tcfg_prev.vocab;
            int arg = 0;
            for (int k = 1; k < tcfg_prev.vocab; ++k)
              if (row[k] > row[arg]) arg = k;
            pr.seq.indices[size_t(r)] = arg;
          }
        }
        Tensor z_hat = reshape(gather_rows(prior.cb.codes, pr.seq.indices),
                               {z_l.dim(0), z_l.dim(1), z_l.dim(2)});
        const float w = float(cfg.w_train);
        auto hook = [&](int scale, const Tensor& f_d) {
          return cft_apply(f_d, taps.features[size_t(levels - scale)],
                           model.cft[size_t(scale)], w);
        };
        Tensor restored = prior.dec.forward(z_hat, w > 0.f ? hook : std::function<Tensor(int, const Tensor&)>{});
        auto terms = stage3_loss(logits, gt_train[size_t(i)], z_l, zc_train[size_t(i)],
                                 corpus.train(i), restored, prior.disc, phi,
                                 float(cfg.lambda_token), float(cfg.lambda_adv),
                                 cfg.use_perceptual);
        fakes.push_back(detach(restored));
        total = total.defined() ? add(total, terms.total) : terms.total;
      }
      total = scale(total, 1.f / float(cfg.batch));
      loss_val = total.item64();
      if (!std::isfinite(loss_val)) {
        const std::string dump = cfg.checkpoint_out + ".aborted";
        if (params_finite(gmap)) save(dump, it);
        throw TrainingAbort("stage3: non-finite loss at iteration " + std::to_string(it), dump);
      }
      tape.backward(total);
      if (cfg.grad_clip > 0) clip_global_norm(gparams, cfg.grad_clip);
      opt_g.step(gparams);
    }
    {
      Tape tape;
      Tensor dl;
      for (int b = 0; b < cfg.batch; ++b) {
        Tensor term = disc_loss(prior.disc, corpus.train(batch_idx[size_t(b)]), fakes[size_t(b)]);
        dl = dl.defined() ? add(dl, term) : term;
      }
      dl = scale(dl, 1.f / float(cfg.batch));
      tape.backward(dl);
      opt_d.step(dparams);
    }
    res.loss_curve.push_back(loss_val);
    if ((it + 1) % cfg.log_every == 0)
      log_info("[stage3 %6lld/%lld] loss %.4f", (long long)(it + 1), (long long)cfg.iters,
               loss_val);
  }

  // validation: restore at w = 0 on the fixed validation degradations
  {
    TapePause pause;
    model.enc_lq = enc_lq;
    double acc = 0;
    for (int i = 0; i < corpus.val_count(); ++i) {
      Rng drng = Rng(cfg.degrade_seed).fork(uint64_t(i));
      Tensor lq = synth_lq(corpus.val(i), cfg, drng);
      RestoreOut out = restore(model, lq, 0.f);
      const double p = psnr(out.image, corpus.val(i));
      acc += std::isinf(p) ? 60.0 : p;
    }
    res.final_val_psnr = corpus.val_count() ? acc / corpus.val_count() : 0.0;
  }
  res.frozen_checksum_after = cfg.finetune_decoder ? 0 : params_checksum(frozen_map);

  save(cfg.checkpoint_out, cfg.iters);
  res.checkpoint_path = cfg.checkpoint_out;
  log_info("[stage3] done: val restore psnr (w=0) %.2f dB -> %s", res.final_val_psnr,
           cfg.checkpoint_out.c_str());
  return res;
}

// --------------------------------------------------------------------------
// loaders and inference
// --------------------------------------------------------------------------

Stage1Model load_stage1_model(const std::string& ckpt_path) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  TrainConfig cfg = config_from_echo(ck.config_echo);
  Stage1Model m;
  m.acfg = cfg.autoencoder();
  Rng rng(0);
  m.enc = Encoder(m.acfg, rng);
  m.dec = Decoder(m.acfg, rng);
  m.use_codebook = cfg.use_codebook;
  ParamMap pm;
  m.enc.collect("enc", pm);
  m.dec.collect("dec", pm);
  if (m.use_codebook) {
    m.cb = Codebook(m.acfg.codebook_size, m.acfg.code_dim, rng);
    pm.add("codebook", m.cb.codes);
  }
  ck.load_into(pm);
  set_requires_grad(pm, false);
  return m;
}

Tensor reconstruct(const Stage1Model& m, const Tensor& img, CodeSequence* seq) {
  TapePause pause;
  return recon_forward(m.enc, m.dec, m.cb, m.use_codebook, img, seq);
}

LoadedModel load_restoration_model(const std::string& ckpt_path) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  if (ck.stage < 2)
    throw IoError("restoration model needs a stage-2 or stage-3 checkpoint, got stage " +
                  std::to_string(ck.stage));
  LoadedModel lm;
  lm.stage = ck.stage;
  lm.cfg = config_from_echo(ck.config_echo);
  lm.lookup = lm.cfg.lookup;

  Rng rng(0);
  RestorationModel& m = lm.model;
  m.acfg = lm.cfg.autoencoder();
  m.tcfg = lm.cfg.transformer();
  m.enc_hq = Encoder(m.acfg, rng);
  m.enc_lq = Encoder(m.acfg, rng);
  m.decoder = Decoder(m.acfg, rng);
  m.codebook = Codebook(m.acfg.codebook_size, m.acfg.code_dim, rng);
  ParamMap pm;
  m.enc_hq.collect("enc", pm);
  m.enc_lq.collect("enc_lq", pm);
  m.decoder.collect("dec", pm);
  pm.add("codebook", m.codebook.codes);
  if (lm.lookup != "nn") {
    m.predictor = CodePredictor(m.tcfg, rng);
    m.predictor.collect("t", pm);
  }
  if (ck.find("cft.0.mix.w")) {
    m.init_cft(rng);
    for (size_t i = 0; i < m.cft.size(); ++i)
      m.cft[i].collect("cft." + std::to_string(i), pm);
  } else {
    m.has_cft = false;
  }
  ck.load_into(pm);
  set_requires_grad(pm, false);
  return lm;
}

CodeSequence lookup_codes(const LoadedModel& lm, const Tensor& z_l) {
  if (lm.lookup == "nn") return quantize(z_l, lm.model.codebook).seq;
  return predict_codes(z_l, lm.model.predictor).seq;
}

RestoreOut run_restore(const LoadedModel& lm, const Tensor& img, float w) {
  TapePause pause;
  if (lm.lookup != "nn") return restore(lm.model, img, w);
  // nearest-neighbour lookup: quantize the LQ feature directly
  if (w != 0.f && !lm.model.has_cft)
    throw ShapeError("restore: w > 0 requires controllable transforms (stage-3 checkpoint)");
  RestoreOut out;
  EncoderTaps taps;
  Tensor z = lm.model.enc_lq.forward(img, &taps);
  auto q = quantize(z, lm.model.codebook);
  out.codes = q.seq;
  const int levels = lm.model.acfg.levels();
  std::function<Tensor(int, const Tensor&)> hook;
  if (lm.model.has_cft && w > 0.f)
    hook = [&](int scale, const Tensor& f_d) {
      return cft_apply(f_d, taps.features[size_t(levels - scale)], lm.model.cft[size_t(scale)], w);
    };
  out.image = lm.model.decoder.forward(q.z_q, hook);
  return out;
}

CodeSequence gt_codes(const RestorationModel& m, const Tensor& hq) {
  TapePause pause;
  return quantize(m.enc_hq.forward(hq), m.codebook).seq;
}

// --------------------------------------------------------------------------
// ablation harness
// --------------------------------------------------------------------------

AblationReport run_ablation_suite(const TrainConfig& base_in, const std::string& stage1_ckpt,
                                  const AblationOptions& opts) {
  TrainConfig base = base_in;
  base.stage = 1;
  base.resolve();
  AblationReport rep;
  std::ostringstream text;

  // (a) no-codebook smoke run: the plain encoder-decoder trains and its loss moves
  {
    TrainConfig cfg = base;
    cfg.stage = 1;
    cfg.use_codebook = false;
    cfg.iters = opts.plain_ae_iters;
    cfg.checkpoint_out = opts.scratch_dir + "/abl_plain_ae.cfmc";
    cfg.checkpoint_in.clear();
    StageResult r = train_stage1(cfg);
    rep.plain_ae_ran = true;
    rep.plain_ae_first_loss = r.loss_curve.front();
    rep.plain_ae_last_loss = r.loss_curve.back();
    text << "(a) no codebook: ran " << opts.plain_ae_iters << " iters, loss "
         << rep.plain_ae_first_loss << " -> " << rep.plain_ae_last_loss << "\n";
  }

  // (b)/(c)/transformer: one stage-2 run per lookup method
  Corpus corpus = load_or_gen_corpus(base);
  const char* lookups[3] = {"nn", "linear", "transformer"};
  std::string ckpts[3];
  for (int mth = 0; mth < 3; ++mth) {
    TrainConfig cfg = base;
    cfg.stage = 2;
    cfg.lookup = lookups[mth];
    if (opts.stage2_iters > 0) cfg.iters = opts.stage2_iters;
    cfg.checkpoint_in = stage1_ckpt;
    cfg.checkpoint_out = opts.scratch_dir + "/abl_s2_" + lookups[mth] + ".cfmc";
    if (mth == 2 && !opts.stage2_ckpt.empty()) {
      ckpts[mth] = opts.stage2_ckpt;  // reuse the main transformer run
    } else {
      ckpts[mth] = train_stage2(cfg).checkpoint_path;
    }
  }
  for (int mth = 0; mth < 3; ++mth) {
    LoadedModel lm = load_restoration_model(ckpts[mth]);
    for (int bucket = 0; bucket < 3; ++bucket) {
      Rng erng(base.degrade_seed * 7919 + uint64_t(bucket));
      double acc = 0;
      const int n = std::min(opts.eval_images, corpus.val_count());
      for (int i = 0; i < n; ++i) {
        DegradationParams p = sample_bucket_params(erng, bucket);
        Tensor lq = degrade(corpus.val(i), p);
        CodeSequence pred = lookup_codes(lm, lm.model.enc_lq.forward(lq));
        CodeSequence gt = gt_codes(lm.model, corpus.val(i));
        acc += code_accuracy(pred, gt);
      }
      rep.accuracy[mth][bucket] = acc / std::max(1, std::min(opts.eval_images, corpus.val_count()));
    }
  }
  text << "code accuracy per severity bucket (mild/medium/heavy):\n";
  for (int mth = 0; mth < 3; ++mth) {
    text << "  " << lookups[mth] << ":";
    for (int b = 0; b < 3; ++b) text << " " << rep.accuracy[mth][b];
    text << "\n";
  }
  for (int b = 0; b < 3; ++b)
    rep.ordering_ok[b] =
        rep.accuracy[2][b] > rep.accuracy[1][b] && rep.accuracy[1][b] > rep.accuracy[0][b];

  // fixed vs finetuned decoder, short stage-3 runs over seeds
  for (uint64_t seed : opts.decoder_seeds) {
    for (int variant = 0; variant < 2; ++variant) {
      TrainConfig cfg = base;
      cfg.stage = 3;
      cfg.seed = seed;
      cfg.iters = opts.decoder_study_iters;
      cfg.finetune_decoder = variant == 1;
      cfg.checkpoint_in = ckpts[2];
      cfg.checkpoint_out = opts.scratch_dir + "/abl_s3_seed" + std::to_string(seed) +
                           (variant ? "_finetuned.cfmc" : "_fixed.cfmc");
      StageResult r = train_stage3(cfg);
      (variant ? rep.psnr_finetuned : rep.psnr_fixed).push_back(r.final_val_psnr);
    }
  }
  double mean_fixed = 0, mean_fine = 0;
  bool fine_wins_all = true;
  for (size_t i = 0; i < rep.psnr_fixed.size(); ++i) {
    mean_fixed += rep.psnr_fixed[i];
    mean_fine += rep.psnr_finetuned[i];
    if (rep.psnr_fixed[i] >= rep.psnr_finetuned[i]) fine_wins_all = false;
    text << "decoder study seed " << opts.decoder_seeds[i] << ": fixed " << rep.psnr_fixed[i]
         << " dB vs finetuned " << rep.psnr_finetuned[i] << " dB\n";
  }
  if (!rep.psnr_fixed.empty()) {
    mean_fixed /= double(rep.psnr_fixed.size());
    mean_fine /= double(rep.psnr_fixed.size());
  }
  rep.fixed_ge_finetuned_mean = mean_fixed >= mean_fine;
  rep.finetuned_wins_every_seed = fine_wins_all && !rep.psnr_fixed.empty();
  text << "mean fixed " << mean_fixed << " dB vs finetuned " << mean_fine << " dB\n";

  rep.text = text.str();
  return rep;
}

// --------------------------------------------------------------------------
// evaluation
// --------------------------------------------------------------------------

EvalReport evaluate(const EvalInputs& in, const FeatureExtractor& phi) {
  if (in.restored.size() != in.gt.size() || in.names.size() != in.gt.size())
    throw ShapeError("evaluate: mismatched input counts");
  EvalReport rep;
  TapePause pause;
  for (size_t i = 0; i < in.gt.size(); ++i) {
    EvalRow row;
    row.name = in.names[i];
    row.psnr = psnr(in.restored[i], in.gt[i]);
    row.ssim = ssim(in.restored[i], in.gt[i]);
    row.ids = identity_proxy(in.restored[i], in.gt[i], phi);
    if (i < in.code_acc.size()) row.code_acc = in.code_acc[i];
    rep.rows.push_back(std::move(row));
  }
  rep.finalize();
  return rep;
}

}  // namespace vqr
