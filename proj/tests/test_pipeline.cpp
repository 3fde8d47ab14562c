#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vqr/pipeline.hpp"

using namespace vqr;

namespace {

namespace fs = std::filesystem;

std::string scratch_dir() {
  const auto dir = fs::temp_directory_path() / "vqr_pipeline_tests";
  fs::create_directories(dir);
  return dir.string();
}

// micro profile: every run takes a couple of seconds at most
TrainConfig micro_cfg(int stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.image_size = 32;
  cfg.compression = 8;
  cfg.code_dim = 16;
  cfg.codebook_size = 32;
  cfg.base_channels = 4;
  cfg.max_channels = 16;
  cfg.res_blocks = 2;
  cfg.t_layers = 1;
  cfg.dataset_n = 24;
  cfg.batch = 2;
  cfg.iters = 8;
  cfg.log_every = 1000;
  cfg.val_every = 1000;
  cfg.val_images = 2;
  cfg.lr = stage == 3 ? 2e-5 : 8e-5;
  return cfg;
}

bool same_checkpoint_state(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (size_t i = 0; i < a.tensors.size(); ++i) {
    if (a.tensors[i].first != b.tensors[i].first) return false;
    const Tensor& ta = a.tensors[i].second;
    const Tensor& tb = b.tensors[i].second;
    if (!same_shape(ta.shape(), tb.shape())) return false;
    for (int64_t k = 0; k < ta.size(); ++k)
      if (ta.data()[k] != tb.data()[k]) return false;
  }
  if (a.opt_groups.size() != b.opt_groups.size()) return false;
  for (size_t g = 0; g < a.opt_groups.size(); ++g) {
    if (a.opt_groups[g].t != b.opt_groups[g].t) return false;
    for (size_t i = 0; i < a.opt_groups[g].m.size(); ++i) {
      if ((a.opt_groups[g].m[i] != b.opt_groups[g].m[i]).any()) return false;
      if ((a.opt_groups[g].v[i] != b.opt_groups[g].v[i]).any()) return false;
    }
  }
  for (int i = 0; i < 4; ++i)
    if (a.rng.s[i] != b.rng.s[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("config parsing and defaults") {
  SUBCASE("unknown keys are rejected") {
    TrainConfig cfg;
    CHECK_THROWS_WITH_AS(config_set(cfg, "learning_rate", "0.1"),
                         doctest::Contains("unknown key"), ConfigError);
  }
  SUBCASE("bad values are rejected") {
    TrainConfig cfg;
    CHECK_THROWS_AS(config_set(cfg, "iters", "many"), ConfigError);
    CHECK_THROWS_AS(config_set(cfg, "lr", "fast"), ConfigError);
    CHECK_THROWS_AS(config_set(cfg, "use_perceptual", "maybe"), ConfigError);
  }
  SUBCASE("toy profile defaults") {
    TrainConfig cfg;
    cfg.stage = 1;
    cfg.resolve();
    CHECK(cfg.image_size == 64);
    CHECK(cfg.codebook_size == 256);
    CHECK(cfg.code_dim == 64);
    CHECK(cfg.compression == 8);
    CHECK(cfg.iters == 5000);
    CHECK(cfg.lr == doctest::Approx(8e-5));
  }
  SUBCASE("paper profile keeps the published dimensions and schedule") {
    TrainConfig cfg;
    cfg.profile = "paper";
    cfg.stage = 1;
    cfg.resolve();
    CHECK(cfg.image_size == 512);
    CHECK(cfg.compression == 32);
    CHECK(cfg.code_dim == 256);
    CHECK(cfg.codebook_size == 1024);
    CHECK(cfg.t_layers == 9);
    CHECK(cfg.iters == 1500000);
    TrainConfig s2 = cfg;
    s2.stage = 2;
    s2.iters = -1;
    s2.resolve();
    CHECK(s2.iters == 200000);
    CHECK(s2.lr == doctest::Approx(8e-5));
    TrainConfig s3 = cfg;
    s3.stage = 3;
    s3.iters = -1;
    s3.lr = -1;
    s3.resolve();
    CHECK(s3.iters == 20000);
    CHECK(s3.lr == doctest::Approx(2e-5));
  }
  SUBCASE("file round trip with comments") {
    const std::string path = scratch_dir() + "/cfg.txt";
    {
      std::ofstream f(path, std::ios::trunc);
      f << "# comment\nprofile = toy\niters = 42\nlr = 0.001  # inline\n\n";
    }
    TrainConfig cfg = load_config_file(path);
    CHECK(cfg.iters == 42);
    CHECK(cfg.lr == doctest::Approx(0.001));
    {
      std::ofstream f(path, std::ios::trunc);
      f << "bogus_key = 1\n";
    }
    CHECK_THROWS_AS(load_config_file(path), ConfigError);
  }
}

TEST_CASE("checkpoint container round trip") {
  Checkpoint ck;
  ck.stage = 2;
  ck.config_echo = {{"profile", "toy"}, {"iters", "10"}};
  Rng rng(3);
  ParamMap pm;
  pm.add("a.w", Tensor::randn({3, 4}, rng));
  pm.add("b", Tensor::randn({7}, rng));
  ck.add_params(pm);
  std::vector<Tensor> params = pm.tensors();
  AdamState opt(params, {});
  opt.m()[0].setRandom();
  opt.v()[1].setRandom();
  opt.set_t(12);
  ck.add_opt("adam", opt);
  ck.rng = rng.state();
  ck.has_rng = true;

  const std::string path = scratch_dir() + "/rt.cfmc";
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.stage == 2);
  CHECK(back.config_value("iters") == "10");
  CHECK(same_checkpoint_state(ck, back));

  SUBCASE("bad magic and unknown version are refused") {
    auto bytes = read_file(path);
    auto bad = bytes;
    bad[0] = 'X';
    write_file(path, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"), IoError);
    bad = bytes;
    bad[4] = 9;  // version field
    write_file(path, bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("version"), IoError);
    bad = bytes;
    bad.resize(bad.size() - 3);
    write_file(path, bad);
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
  }
  std::remove(path.c_str());
}

TEST_CASE("save/load/resume reproduces training bit-exactly" * doctest::timeout(300)) {
  const std::string dir = scratch_dir();
  // fresh run of 6 iterations
  TrainConfig fresh = micro_cfg(1);
  fresh.iters = 6;
  fresh.checkpoint_out = dir + "/fresh6.cfmc";
  train_stage1(fresh);

  // the same run, stopped at 5 and resumed for the final iteration
  TrainConfig part = micro_cfg(1);
  part.iters = 5;
  part.checkpoint_out = dir + "/part5.cfmc";
  train_stage1(part);
  TrainConfig resume = micro_cfg(1);
  resume.iters = 6;
  resume.checkpoint_in = dir + "/part5.cfmc";
  resume.checkpoint_out = dir + "/resumed6.cfmc";
  train_stage1(resume);

  Checkpoint a = load_checkpoint(dir + "/fresh6.cfmc");
  Checkpoint b = load_checkpoint(dir + "/resumed6.cfmc");
  CHECK(same_checkpoint_state(a, b));
}

TEST_CASE("identical configs give identical checkpoint bytes" * doctest::timeout(300)) {
  const std::string dir = scratch_dir();
  TrainConfig cfg = micro_cfg(1);
  cfg.checkpoint_out = dir + "/det_a.cfmc";
  train_stage1(cfg);
  cfg.checkpoint_out = dir + "/det_b.cfmc";
  train_stage1(cfg);
  // byte-identical modulo the output path stored in the config echo
  Checkpoint a = load_checkpoint(dir + "/det_a.cfmc");
  Checkpoint b = load_checkpoint(dir + "/det_b.cfmc");
  CHECK(same_checkpoint_state(a, b));

  TrainConfig other = cfg;
  other.seed = cfg.seed + 1;
  other.checkpoint_out = dir + "/det_c.cfmc";
  train_stage1(other);
  Checkpoint c = load_checkpoint(dir + "/det_c.cfmc");
  CHECK_FALSE(same_checkpoint_state(a, c));
}

TEST_CASE("stage pipeline: isolation, freezing, zero-init transforms" * doctest::timeout(600)) {
  const std::string dir = scratch_dir();
  TrainConfig s1 = micro_cfg(1);
  s1.iters = 12;
  s1.checkpoint_out = dir + "/s1.cfmc";
  train_stage1(s1);

  TrainConfig s2 = micro_cfg(2);
  s2.iters = 10;
  s2.checkpoint_in = dir + "/s1.cfmc";
  s2.checkpoint_out = dir + "/s2.cfmc";
  StageResult r2 = train_stage2(s2);
  CHECK(r2.frozen_checksum_before == r2.frozen_checksum_after);

  SUBCASE("stage-2 requires a previous-stage checkpoint") {
    TrainConfig bad = micro_cfg(2);
    bad.checkpoint_in.clear();
    CHECK_THROWS_AS(train_stage2(bad), ConfigError);
    bad.checkpoint_in = dir + "/s2.cfmc";
    TrainConfig s3bad = micro_cfg(3);
    s3bad.checkpoint_in = dir + "/s1.cfmc";  // stage 1 into stage 3
    CHECK_THROWS_AS(train_stage3(s3bad), ConfigError);
  }

  SUBCASE("codebook and decoder bytes survive stages II and III untouched") {
    Checkpoint ck1 = load_checkpoint(dir + "/s1.cfmc");
    Checkpoint ck2 = load_checkpoint(dir + "/s2.cfmc");
    for (const char* name : {"codebook", "dec.stem.w", "dec.out_conv.w"}) {
      const Tensor* t1 = ck1.find(name);
      const Tensor* t2 = ck2.find(name);
      REQUIRE(t1);
      REQUIRE(t2);
      for (int64_t i = 0; i < t1->size(); ++i) CHECK(t1->data()[i] == t2->data()[i]);
    }
  }

  SUBCASE("zero-initialized stage III is the stage-II path at every w") {
    TrainConfig s3 = micro_cfg(3);
    s3.iters = 0;  // initialize and save without training
    s3.checkpoint_in = dir + "/s2.cfmc";
    s3.checkpoint_out = dir + "/s3_init.cfmc";
    StageResult r3 = train_stage3(s3);
    CHECK(r3.frozen_checksum_before == r3.frozen_checksum_after);

    LoadedModel m2 = load_restoration_model(dir + "/s2.cfmc");
    LoadedModel m3 = load_restoration_model(dir + "/s3_init.cfmc");
    CHECK_FALSE(m2.model.has_cft);
    CHECK(m3.model.has_cft);
    Rng rng(5);
    Tensor img = to_float(render_face(sample_face(rng), 32));
    RestoreOut base = run_restore(m2, img, 0.f);
    for (float w : {0.f, 0.5f, 1.f}) {
      RestoreOut out = run_restore(m3, img, w);
      CHECK(out.codes.indices == base.codes.indices);
      for (int64_t i = 0; i < base.image.size(); ++i)
        CHECK(out.image.data()[i] == base.image.data()[i]);
    }
  }

  SUBCASE("after stage-III training, restore still rejects bad w") {
    TrainConfig s3 = micro_cfg(3);
    s3.iters = 4;
    s3.checkpoint_in = dir + "/s2.cfmc";
    s3.checkpoint_out = dir + "/s3.cfmc";
    train_stage3(s3);
    LoadedModel m3 = load_restoration_model(dir + "/s3.cfmc");
    Rng rng(6);
    Tensor img = to_float(render_face(sample_face(rng), 32));
    CHECK_THROWS_AS(run_restore(m3, img, 1.5f), ShapeError);
    RestoreOut out = run_restore(m3, img, 1.f);
    CHECK(out.image.shape() == Shape{32, 32, 3});
  }
}

TEST_CASE("nan policy: abort with a last-good dump" * doctest::timeout(120)) {
  const std::string dir = scratch_dir();
  TrainConfig cfg = micro_cfg(1);
  cfg.iters = 50;
  cfg.lr = 3e7;  // blows the parameters up within a few steps
  cfg.use_perceptual = false;
  cfg.checkpoint_out = dir + "/nan.cfmc";
  CHECK_THROWS_AS(train_stage1(cfg), TrainingAbort);
  CHECK(fs::exists(dir + "/nan.cfmc.aborted"));
  // the dump itself loads and holds finite parameters
  Checkpoint dump = load_checkpoint(dir + "/nan.cfmc.aborted");
  for (const auto& [name, t] : dump.tensors)
    CHECK(t.array().isFinite().all());
}

TEST_CASE("synthetic LQ: mask mode composes mask application only") {
  TrainConfig cfg = micro_cfg(2);
  cfg.degrade_mode = "mask";
  Rng rng(9);
  Tensor hq = to_float(render_face(sample_face(rng), 32));
  Rng a(4), b(4);
  Tensor lq1 = synth_lq(hq, cfg, a);
  Tensor lq2 = synth_lq(hq, cfg, b);
  for (int64_t i = 0; i < lq1.size(); ++i) CHECK(lq1.data()[i] == lq2.data()[i]);
  // masked pixels are zero, everything else is untouched
  int zeroed = 0;
  for (int p = 0; p < 32 * 32; ++p) {
    const bool z = lq1.data()[p * 3] == 0.f && lq1.data()[p * 3 + 1] == 0.f &&
                   lq1.data()[p * 3 + 2] == 0.f;
    if (z) {
      ++zeroed;
    } else {
      for (int c = 0; c < 3; ++c) CHECK(lq1.data()[p * 3 + c] == hq.data()[p * 3 + c]);
    }
  }
  CHECK(zeroed > 0);
}

TEST_CASE("corpus split arithmetic matches n - n/10") {
  TrainConfig cfg;
  cfg.image_size = 16;
  cfg.dataset_n = 512;
  cfg.data_seed = 7;
  Corpus c = load_or_gen_corpus(cfg);
  CHECK(c.images.size() == 512);
  CHECK(c.train_count == 461);
  CHECK(c.val_count() == 51);
}

TEST_CASE("ablation harness smoke" * doctest::timeout(600)) {
  const std::string dir = scratch_dir() + "/abl";
  fs::create_directories(dir);
  TrainConfig base = micro_cfg(1);
  base.checkpoint_out = dir + "/s1.cfmc";
  base.iters = 10;
  train_stage1(base);

  AblationOptions opts;
  opts.plain_ae_iters = 4;
  opts.stage2_iters = 6;
  opts.decoder_study_iters = 3;
  opts.decoder_seeds = {1};
  opts.eval_images = 2;
  opts.scratch_dir = dir;
  AblationReport rep = run_ablation_suite(base, dir + "/s1.cfmc", opts);
  CHECK(rep.plain_ae_ran);
  CHECK(std::isfinite(rep.plain_ae_last_loss));
  CHECK(rep.psnr_fixed.size() == 1);
  CHECK(rep.psnr_finetuned.size() == 1);
  CHECK(rep.text.find("(a) no codebook") != std::string::npos);
}
