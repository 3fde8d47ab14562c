#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vqr/cft.hpp"
#include "vqr/checkpoint.hpp"
#include "vqr/config.hpp"
#include "vqr/degrade.hpp"
#include "vqr/faces.hpp"
#include "vqr/metrics.hpp"

namespace vqr {

/// Raised when a training loss goes non-finite; the last good state has
/// already been dumped to dump_path.
struct TrainingAbort : std::runtime_error {
  std::string dump_path;
  TrainingAbort(const std::string& msg, std::string dump)
      : std::runtime_error(msg), dump_path(std::move(dump)) {}
};

struct Corpus {
  std::vector<Tensor> images;  // float (H,W,3)
  std::vector<FaceSpec> specs;
  int train_count = 0;
  int val_count() const { return int(images.size()) - train_count; }
  const Tensor& train(int i) const { return images[size_t(i)]; }
  const Tensor& val(int i) const { return images[size_t(train_count + i)]; }
};

/// Load PNGs + manifest from cfg.dataset_dir, or generate from data_seed.
Corpus load_or_gen_corpus(const TrainConfig& cfg);

/// The per-iteration LQ synthesis: blur-chain degradation or polyline-mask
/// application depending on cfg.degrade_mode. Consumes cfg-independent
/// randomness from rng only.
Tensor synth_lq(const Tensor& hq, const TrainConfig& cfg, Rng& rng);

/// Severity buckets used by the lookup-method comparison: 0 mild, 1 medium,
/// 2 heavy. Parameter ranges tile the training ranges.
DegradationParams sample_bucket_params(Rng& rng, int bucket);
/// Mid-point severity of the training ranges.
DegradationParams median_params(uint64_t seed = 0);

struct StageResult {
  std::string checkpoint_path;
  std::vector<double> loss_curve;  // generator/total objective per iteration
  double final_val_psnr = 0.0;     // stage I: reconstruction; stage III: restore(w=0)
  double final_val_code_acc = 0.0; // stage II
  double util_fraction = 0.0, util_perplexity = 0.0;  // stage I, validation set
  uint64_t frozen_checksum_before = 0, frozen_checksum_after = 0;  // stages II/III
};

StageResult train_stage1(const TrainConfig& cfg);
StageResult train_stage2(const TrainConfig& cfg);
StageResult train_stage3(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// model loading / inference entry points
// ---------------------------------------------------------------------------

/// Stage-I reconstruction model (present in every checkpoint).
struct Stage1Model {
  AutoencoderConfig acfg;
  Encoder enc;
  Decoder dec;
  Codebook cb;
  bool use_codebook = true;
};

Stage1Model load_stage1_model(const std::string& ckpt_path);
Tensor reconstruct(const Stage1Model& m, const Tensor& img, CodeSequence* seq = nullptr);

/// Full restoration model from a stage-II/III checkpoint. lookup records how
/// codes are selected ("transformer" | "linear" | "nn").
struct LoadedModel {
  RestorationModel model;
  std::string lookup = "transformer";
  uint32_t stage = 2;
  TrainConfig cfg;
};

LoadedModel load_restoration_model(const std::string& ckpt_path);

/// Code selection for any lookup kind (nn bypasses the predictor).
CodeSequence lookup_codes(const LoadedModel& lm, const Tensor& z_l);

/// Restoration honouring the lookup kind; w applies when CFT modules exist.
RestoreOut run_restore(const LoadedModel& lm, const Tensor& img, float w);

/// Ground-truth codes of an HQ image under the frozen stage-I quantizer.
CodeSequence gt_codes(const RestorationModel& m, const Tensor& hq);

// ---------------------------------------------------------------------------
// ablation harness
// ---------------------------------------------------------------------------

struct AblationOptions {
  int64_t plain_ae_iters = 200;
  int64_t stage2_iters = -1;        // -1 = cfg default
  int64_t decoder_study_iters = 600;
  std::vector<uint64_t> decoder_seeds = {1, 2, 3};
  int eval_images = 24;             // per severity bucket
  std::string scratch_dir = ".";
  std::string stage2_ckpt;          // reuse an existing transformer run if set
};

struct AblationReport {
  bool plain_ae_ran = false;
  double plain_ae_first_loss = 0, plain_ae_last_loss = 0;

  // accuracy[method][bucket]; methods: 0 = nn, 1 = linear, 2 = transformer
  double accuracy[3][3] = {};
  bool ordering_ok[3] = {};  // per bucket: transformer > linear > nn

  std::vector<double> psnr_fixed, psnr_finetuned;  // per decoder-study seed
  bool fixed_ge_finetuned_mean = false;
  bool finetuned_wins_every_seed = false;

  std::string text;
};

/// Runs the ablations from an existing stage-I checkpoint: (a) no-codebook
/// smoke, (b) NN lookup, (c) linear-head prediction, transformer prediction,
/// and the fixed-vs-finetuned decoder study.
AblationReport run_ablation_suite(const TrainConfig& base, const std::string& stage1_ckpt,
                                  const AblationOptions& opts);

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalInputs {
  std::vector<std::string> names;
  std::vector<Tensor> restored;
  std::vector<Tensor> gt;
  // optional per-image predicted/gt codes for the accuracy column
  std::vector<std::optional<double>> code_acc;
};

EvalReport evaluate(const EvalInputs& in, const FeatureExtractor& phi);

/// Writes images + manifest for `gen-data`.
void write_dataset(const Dataset& ds, const std::string& dir);

}  // namespace vqr
