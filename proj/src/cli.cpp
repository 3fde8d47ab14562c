#include "vqr/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "vqr/pipeline.hpp"

namespace vqr {

namespace {

namespace fs = std::filesystem;

std::vector<std::string> list_pngs(const std::string& dir) {
  std::vector<std::string> names;
  if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png")
      names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError("no .png files in " + dir);
  return names;
}

std::vector<float> parse_w_list(const std::string& csv) {
  std::vector<float> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    size_t pos = 0;
    const float w = std::stof(tok, &pos);
    if (pos != tok.size() || w < 0.f || w > 1.f)
      throw ConfigError("bad w value '" + tok + "' (need numbers in [0,1])");
    out.push_back(w);
  }
  if (out.empty()) throw ConfigError("empty w list");
  return out;
}

struct TrainArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string dataset, ckpt_in, ckpt_out;
  int64_t iters = -2;  // -2 = untouched
  int64_t seed = -1;
};

void add_train_flags(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--config", a.config_path, "key=value config file");
  cmd->add_option("--set", a.sets, "override: key=value (repeatable)");
  cmd->add_option("--dataset", a.dataset, "corpus directory from gen-data");
  cmd->add_option("--in", a.ckpt_in, "input checkpoint");
  cmd->add_option("--out", a.ckpt_out, "output checkpoint");
  cmd->add_option("--iters", a.iters, "training iterations");
  cmd->add_option("--seed", a.seed, "training seed");
}

TrainConfig make_config(const TrainArgs& a, int stage) {
  TrainConfig cfg = a.config_path.empty() ? TrainConfig{} : load_config_file(a.config_path);
  cfg.stage = stage;
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set needs key=value, got '" + kv + "'");
    config_set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!a.dataset.empty()) cfg.dataset_dir = a.dataset;
  if (!a.ckpt_in.empty()) cfg.checkpoint_in = a.ckpt_in;
  if (!a.ckpt_out.empty()) cfg.checkpoint_out = a.ckpt_out;
  if (a.iters != -2) cfg.iters = a.iters;
  if (a.seed != -1) cfg.seed = uint64_t(a.seed);
  cfg.resolve();
  std::cout << "resolved config:\n" << cfg.print() << std::flush;
  return cfg;
}

Tensor load_image_checked(const std::string& path) { return to_float(load_png(path)); }

void save_image(const std::string& path, const Tensor& img) { save_png(path, to_u8(img)); }

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"vqr: discrete-codebook face restoration toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the procedural face corpus");
  int gen_count = 512, gen_size = 64;
  uint64_t gen_seed = 7;
  std::string gen_out = "data";
  gen->add_option("--count", gen_count, "number of faces")->capture_default_str();
  gen->add_option("--seed", gen_seed, "corpus seed")->capture_default_str();
  gen->add_option("--size", gen_size, "image side in pixels")->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->capture_default_str();

  // degrade
  auto* deg = app.add_subcommand("degrade", "synthesize LQ copies of a directory of images");
  std::string deg_in, deg_out = "lq";
  uint64_t deg_seed = 99;
  deg->add_option("--in", deg_in, "input directory of .png images")->required();
  deg->add_option("--out", deg_out, "output directory")->capture_default_str();
  deg->add_option("--seed", deg_seed, "sampling seed")->capture_default_str();

  // train
  TrainArgs t1, t2, t3;
  auto* s1 = app.add_subcommand("train-stage1", "codebook + autoencoder self-reconstruction");
  add_train_flags(s1, t1);
  auto* s2 = app.add_subcommand("train-stage2", "code-sequence predictor on degraded inputs");
  add_train_flags(s2, t2);
  auto* s3 = app.add_subcommand("train-stage3", "controllable transforms + encoder finetune");
  add_train_flags(s3, t3);

  // reconstruct
  auto* rec = app.add_subcommand("reconstruct", "stage-1 autoencoder round trip");
  std::string rec_model, rec_in, rec_out = "recon";
  rec->add_option("--model", rec_model, "checkpoint")->required();
  rec->add_option("--in", rec_in, "input image or directory")->required();
  rec->add_option("--out", rec_out, "output directory")->capture_default_str();

  // restore
  auto* res = app.add_subcommand("restore",
                                 "restore degraded images (default --w 0: quality priority)");
  std::string res_model, res_in, res_out = "restored";
  float res_w = 0.f;
  res->add_option("--model", res_model, "stage-2/3 checkpoint")->required();
  res->add_option("--in", res_in, "input image or directory")->required();
  res->add_option("--out", res_out, "output directory")->capture_default_str();
  res->add_option("--w", res_w, "fidelity weight in [0,1]; 0 favours quality")
      ->capture_default_str();

  // inpaint
  auto* inp = app.add_subcommand("inpaint", "zero masked pixels and restore");
  std::string inp_model, inp_in, inp_mask, inp_out = "inpainted.png";
  float inp_w = 0.f;
  inp->add_option("--model", inp_model, "mask-trained stage-2/3 checkpoint")->required();
  inp->add_option("--in", inp_in, "input image")->required();
  inp->add_option("--mask", inp_mask, "mask png (nonzero = hole)")->required();
  inp->add_option("--out", inp_out, "output image")->capture_default_str();
  inp->add_option("--w", inp_w, "fidelity weight in [0,1]")->capture_default_str();

  // sweep-w
  auto* swp = app.add_subcommand("sweep-w", "render a quality/fidelity sweep grid");
  std::string swp_model, swp_in, swp_out = "sweep";
  std::string swp_list = "0,0.25,0.5,0.75,1";
  swp->add_option("--model", swp_model, "stage-3 checkpoint")->required();
  swp->add_option("--in", swp_in, "input image or directory")->required();
  swp->add_option("--out", swp_out, "output directory")->capture_default_str();
  swp->add_option("--list", swp_list, "comma-separated w values")->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "full-reference metrics over paired directories");
  std::string ev_gt, ev_restored, ev_out = "eval.csv", ev_model, ev_lq;
  uint64_t ev_phi_seed = 1234;
  ev->add_option("--gt", ev_gt, "ground-truth directory")->required();
  ev->add_option("--restored", ev_restored, "restored directory")->required();
  ev->add_option("--out", ev_out, "CSV output path")->capture_default_str();
  ev->add_option("--model", ev_model, "checkpoint for the code-accuracy column");
  ev->add_option("--lq", ev_lq, "LQ directory matching --restored (code accuracy)");
  ev->add_option("--phi-seed", ev_phi_seed, "feature-extractor seed")->capture_default_str();

  // ablate
  auto* abl = app.add_subcommand("ablate", "lookup-method and decoder-freezing studies");
  TrainArgs abl_args;
  std::string abl_stage1, abl_scratch = "ablations";
  int64_t abl_s2_iters = -1, abl_dec_iters = 600;
  add_train_flags(abl, abl_args);
  abl->add_option("--stage1", abl_stage1, "stage-1 checkpoint to build on")->required();
  abl->add_option("--scratch", abl_scratch, "directory for variant checkpoints")
      ->capture_default_str();
  abl->add_option("--stage2-iters", abl_s2_iters, "iterations per lookup variant");
  abl->add_option("--decoder-iters", abl_dec_iters, "iterations per decoder-study run")
      ->capture_default_str();

  // bench
  auto* ben = app.add_subcommand("bench", "per-image restoration timing");
  std::string ben_model, ben_in;
  int ben_count = 10;
  ben->add_option("--model", ben_model, "stage-2/3 checkpoint")->required();
  ben->add_option("--in", ben_in, "input image (default: a generated face)");
  ben->add_option("--count", ben_count, "timed repetitions")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      std::cout << "gen-data: count=" << gen_count << " seed=" << gen_seed
                << " size=" << gen_size << " out=" << gen_out << "\n";
      Dataset ds = gen_dataset(gen_count, gen_seed, gen_size);
      write_dataset(ds, gen_out);
      std::cout << "wrote " << ds.images.size() << " faces (" << ds.train_count << " train / "
                << ds.images.size() - size_t(ds.train_count) << " val) to " << gen_out << "\n";
      return 0;
    }

    if (deg->parsed()) {
      std::cout << "degrade: in=" << deg_in << " out=" << deg_out << " seed=" << deg_seed << "\n";
      fs::create_directories(deg_out);
      Rng rng(deg_seed);
      std::ofstream manifest(deg_out + "/manifest.txt", std::ios::trunc);
      for (const auto& name : list_pngs(deg_in)) {
        DegradationParams p = sample_params(rng);
        Tensor lq = degrade(load_image_checked(deg_in + "/" + name), p);
        save_image(deg_out + "/" + name, lq);
        manifest << name << " " << p.sigma << " " << p.r_ds << " " << p.delta << " " << p.q
                 << " " << p.seed << "\n";
      }
      if (!manifest) throw IoError("failed writing manifest in " + deg_out);
      return 0;
    }

    if (s1->parsed()) {
      train_stage1(make_config(t1, 1));
      return 0;
    }
    if (s2->parsed()) {
      train_stage2(make_config(t2, 2));
      return 0;
    }
    if (s3->parsed()) {
      train_stage3(make_config(t3, 3));
      return 0;
    }

    if (rec->parsed()) {
      std::cout << "reconstruct: model=" << rec_model << " in=" << rec_in << "\n";
      Stage1Model m = load_stage1_model(rec_model);
      fs::create_directories(rec_out);
      const bool is_dir = fs::is_directory(rec_in);
      for (const auto& name : is_dir ? list_pngs(rec_in)
                                     : std::vector<std::string>{fs::path(rec_in).filename()}) {
        const std::string src = is_dir ? rec_in + "/" + name : rec_in;
        save_image(rec_out + "/" + name, reconstruct(m, load_image_checked(src)));
      }
      return 0;
    }

    if (res->parsed()) {
      std::cout << "restore: model=" << res_model << " w=" << res_w << " in=" << res_in << "\n";
      LoadedModel lm = load_restoration_model(res_model);
      fs::create_directories(res_out);
      const bool is_dir = fs::is_directory(res_in);
      for (const auto& name : is_dir ? list_pngs(res_in)
                                     : std::vector<std::string>{fs::path(res_in).filename()}) {
        const std::string src = is_dir ? res_in + "/" + name : res_in;
        save_image(res_out + "/" + name, run_restore(lm, load_image_checked(src), res_w).image);
      }
      return 0;
    }

    if (inp->parsed()) {
      std::cout << "inpaint: model=" << inp_model << " in=" << inp_in << " mask=" << inp_mask
                << " w=" << inp_w << "\n";
      LoadedModel lm = load_restoration_model(inp_model);
      Tensor img = load_image_checked(inp_in);
      ImageU8 mask_u8 = load_png(inp_mask);
      if (mask_u8.h != img.dim(0) || mask_u8.w != img.dim(1))
        throw ShapeError("inpaint: mask is " + std::to_string(mask_u8.w) + "x" +
                         std::to_string(mask_u8.h) + ", image is " + std::to_string(img.dim(1)) +
                         "x" + std::to_string(img.dim(0)));
      Tensor mask(Shape{mask_u8.h, mask_u8.w, 1});
      for (int i = 0; i < mask_u8.h * mask_u8.w; ++i)
        mask.data()[i] = mask_u8.pix[size_t(i) * size_t(mask_u8.c)] > 127 ? 1.f : 0.f;
      Tensor masked = apply_mask(img, mask);
      save_image(inp_out, run_restore(lm, masked, inp_w).image);
      return 0;
    }

    if (swp->parsed()) {
      const auto ws = parse_w_list(swp_list);
      std::cout << "sweep-w: model=" << swp_model << " list=" << swp_list << "\n";
      LoadedModel lm = load_restoration_model(swp_model);
      fs::create_directories(swp_out);
      const bool is_dir = fs::is_directory(swp_in);
      for (const auto& name : is_dir ? list_pngs(swp_in)
                                     : std::vector<std::string>{fs::path(swp_in).filename()}) {
        const std::string src = is_dir ? swp_in + "/" + name : swp_in;
        Tensor img = load_image_checked(src);
        std::vector<ImageU8> panels;
        for (float w : ws) panels.push_back(to_u8(run_restore(lm, img, w).image));
        save_png(swp_out + "/" + name, hstack(panels));
      }
      return 0;
    }

    if (ev->parsed()) {
      std::cout << "eval: gt=" << ev_gt << " restored=" << ev_restored
                << " phi_seed=" << ev_phi_seed << "\n";
      EvalInputs in;
      std::optional<LoadedModel> lm;
      if (!ev_model.empty()) lm = load_restoration_model(ev_model);
      for (const auto& name : list_pngs(ev_restored)) {
        if (!fs::exists(ev_gt + "/" + name)) continue;
        in.names.push_back(name);
        in.restored.push_back(load_image_checked(ev_restored + "/" + name));
        in.gt.push_back(load_image_checked(ev_gt + "/" + name));
        if (lm && !ev_lq.empty() && fs::exists(ev_lq + "/" + name)) {
          Tensor lq = load_image_checked(ev_lq + "/" + name);
          CodeSequence pred = lookup_codes(*lm, lm->model.enc_lq.forward(lq));
          CodeSequence gt = gt_codes(lm->model, in.gt.back());
          in.code_acc.push_back(code_accuracy(pred, gt));
        } else {
          in.code_acc.push_back(std::nullopt);
        }
      }
      if (in.names.empty()) throw IoError("eval: no paired images between the directories");
      FeatureExtractor phi(ev_phi_seed);
      EvalReport rep = evaluate(in, phi);
      std::ofstream f(ev_out, std::ios::trunc);
      f << rep.to_csv();
      if (!f) throw IoError("eval: cannot write " + ev_out);
      std::cout << rep.summary();
      return 0;
    }

    if (abl->parsed()) {
      TrainConfig cfg = make_config(abl_args, 1);
      AblationOptions opts;
      opts.scratch_dir = abl_scratch;
      if (abl_s2_iters > 0) opts.stage2_iters = abl_s2_iters;
      opts.decoder_study_iters = abl_dec_iters;
      fs::create_directories(abl_scratch);
      AblationReport rep = run_ablation_suite(cfg, abl_stage1, opts);
      std::cout << rep.text;
      return 0;
    }

    if (ben->parsed()) {
      LoadedModel lm = load_restoration_model(ben_model);
      Tensor img;
      if (ben_in.empty()) {
        Rng r(1);
        img = to_float(render_face(sample_face(r), lm.cfg.image_size));
      } else {
        img = load_image_checked(ben_in);
      }
      std::cout << "bench: model=" << ben_model << " count=" << ben_count << "\n";
      run_restore(lm, img, 0.f);  // warm-up
      const auto t0 = std::chrono::steady_clock::now();
      for (int i = 0; i < ben_count; ++i) run_restore(lm, img, 0.f);
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("%.1f ms per image over %d runs\n", 1000.0 * secs / ben_count, ben_count);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace vqr
