#pragma once

#include <string>
#include <vector>

#include "vqr/nets.hpp"
#include "vqr/transformer.hpp"

namespace vqr {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat key=value training configuration. Unset numeric fields (-1) resolve
/// to profile defaults; unknown keys are rejected when parsing.
struct TrainConfig {
  std::string profile = "toy";  // toy | paper
  int stage = 1;
  int64_t iters = -1;
  int batch = -1;
  double lr = -1.0;

  uint64_t seed = 1;          // training stream (init, batches, degradations)
  uint64_t data_seed = 7;     // corpus generation
  uint64_t degrade_seed = 99; // validation degradations
  uint64_t phi_seed = 1234;   // frozen feature extractor
  int dataset_n = 512;

  int image_size = -1, compression = -1, code_dim = -1, codebook_size = -1;
  int base_channels = -1, max_channels = -1, res_blocks = -1;
  int t_layers = -1, t_ff_mult = 2;
  int disc_base = 16;

  double beta = 0.25, lambda_adv = 0.8, lambda_token = 0.5;
  bool use_perceptual = true;
  bool use_codebook = true;        // off = plain autoencoder (ablation (a))
  std::string lookup = "transformer";  // transformer | linear | nn (stage II)
  bool finetune_decoder = false;   // stage III ablation (e)
  double w_train = 1.0;            // stage III forward weight

  std::string degrade_mode = "blur";  // blur | mask
  double mask_lo = 0.2, mask_hi = 0.6;

  std::string dataset_dir;      // empty = generate the corpus in memory
  std::string checkpoint_in;
  std::string checkpoint_out = "model.cfmc";

  int64_t log_every = 100, val_every = 1000;
  int val_images = 8;
  double grad_clip = 0.0;  // 0 disables clipping

  /// Fill unset fields from the profile/stage defaults and sanity-check.
  void resolve();
  AutoencoderConfig autoencoder() const;
  TransformerConfig transformer() const;

  /// Resolved key=value lines (also the checkpoint config echo).
  std::vector<std::pair<std::string, std::string>> echo() const;
  std::string print() const;
};

/// Apply one key=value pair; throws ConfigError on unknown keys or bad values.
void config_set(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Parse a flat key=value file ('#' comments, blank lines allowed).
TrainConfig load_config_file(const std::string& path);

/// Documented key list for --help and the README.
std::string config_key_reference();

}  // namespace vqr
