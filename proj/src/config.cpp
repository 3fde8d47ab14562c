#include "vqr/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace vqr {

namespace {

struct KeyDef {
  const char* name;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
  const char* desc;
};

int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int64_t out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
  }
}

double parse_float(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + key + ": '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("config: bad boolean for " + key + ": '" + v + "'");
}

std::string fmt_f(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

#define INT_KEY(field, desc)                                                  \
  KeyDef {                                                                    \
    #field, [](TrainConfig& c, const std::string& v) { c.field = decltype(c.field)(parse_int(#field, v)); }, \
        [](const TrainConfig& c) { return std::to_string(c.field); }, desc    \
  }
#define FLOAT_KEY(field, desc)                                                 \
  KeyDef {                                                                     \
    #field, [](TrainConfig& c, const std::string& v) { c.field = parse_float(#field, v); }, \
        [](const TrainConfig& c) { return fmt_f(c.field); }, desc              \
  }
#define BOOL_KEY(field, desc)                                                  \
  KeyDef {                                                                     \
    #field, [](TrainConfig& c, const std::string& v) { c.field = parse_bool(#field, v); }, \
        [](const TrainConfig& c) { return c.field ? "1" : "0"; }, desc         \
  }
#define STR_KEY(field, desc)                                                 \
  KeyDef {                                                                   \
    #field, [](TrainConfig& c, const std::string& v) { c.field = v; },       \
        [](const TrainConfig& c) { return c.field; }, desc                   \
  }

const std::vector<KeyDef>& keys() {
  static const std::vector<KeyDef> defs = {
      STR_KEY(profile, "named default set: toy | paper"),
      INT_KEY(stage, "training stage 1|2|3"),
      INT_KEY(iters, "training iterations (-1 = profile default)"),
      INT_KEY(batch, "batch size (-1 = profile default)"),
      FLOAT_KEY(lr, "learning rate (-1 = profile default: 8e-5 stages I/II, 2e-5 III)"),
      INT_KEY(seed, "training seed (init, batch order, training degradations)"),
      INT_KEY(data_seed, "corpus generation seed"),
      INT_KEY(degrade_seed, "validation degradation seed"),
      INT_KEY(phi_seed, "frozen feature-extractor seed"),
      INT_KEY(dataset_n, "corpus size when generating in memory"),
      INT_KEY(image_size, "H = W"),
      INT_KEY(compression, "latent downsampling ratio r"),
      INT_KEY(code_dim, "code dimension d"),
      INT_KEY(codebook_size, "codebook entries N"),
      INT_KEY(base_channels, "first conv width"),
      INT_KEY(max_channels, "channel cap while doubling per level"),
      INT_KEY(res_blocks, "residual blocks across encoder+decoder"),
      INT_KEY(t_layers, "self-attention blocks in the code predictor"),
      INT_KEY(t_ff_mult, "feed-forward expansion (0 disables the FF sublayer)"),
      INT_KEY(disc_base, "discriminator first conv width"),
      FLOAT_KEY(beta, "commitment weight in the code-level loss"),
      FLOAT_KEY(lambda_adv, "adversarial loss weight"),
      FLOAT_KEY(lambda_token, "token cross-entropy weight"),
      BOOL_KEY(use_perceptual, "include the frozen-feature perceptual loss"),
      BOOL_KEY(use_codebook, "stage I: quantize through the codebook (off = plain AE)"),
      STR_KEY(lookup, "stage II code lookup: transformer | linear | nn"),
      BOOL_KEY(finetune_decoder, "stage III: unfreeze the decoder (ablation)"),
      FLOAT_KEY(w_train, "stage III forward blend weight"),
      STR_KEY(degrade_mode, "training degradation: blur | mask"),
      FLOAT_KEY(mask_lo, "mask mode: lower area ratio"),
      FLOAT_KEY(mask_hi, "mask mode: upper area ratio"),
      STR_KEY(dataset_dir, "corpus directory (empty = generate in memory)"),
      STR_KEY(checkpoint_in, "input checkpoint (previous stage or resume)"),
      STR_KEY(checkpoint_out, "output checkpoint path"),
      INT_KEY(log_every, "iterations between log lines"),
      INT_KEY(val_every, "iterations between validation passes"),
      INT_KEY(val_images, "validation images per periodic pass"),
      FLOAT_KEY(grad_clip, "global-norm gradient clip (0 = off)"),
  };
  return defs;
}

}  // namespace

void config_set(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& def : keys()) {
    if (key == def.name) {
      def.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

TrainConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path);
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto ltrim = line.find_first_not_of(" \t\r");
    if (ltrim == std::string::npos) continue;
    auto rtrim = line.find_last_not_of(" \t\r");
    line = line.substr(ltrim, rtrim - ltrim + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value: '" +
                        line + "'");
    auto strip = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    config_set(cfg, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
  }
  return cfg;
}

void TrainConfig::resolve() {
  const bool toy = profile == "toy";
  if (!toy && profile != "paper")
    throw ConfigError("config: unknown profile '" + profile + "'");
  if (stage < 1 || stage > 3) throw ConfigError("config: stage must be 1, 2 or 3");

  auto def = [&](auto& field, auto toy_v, auto paper_v) {
    if (field < 0) field = toy ? toy_v : paper_v;
  };
  def(image_size, 64, 512);
  def(compression, 8, 32);
  def(code_dim, 64, 256);
  def(codebook_size, 256, 1024);
  def(base_channels, 8, 32);
  def(max_channels, 64, 256);
  def(res_blocks, 6, 12);
  def(t_layers, 4, 9);
  def(batch, 4, 16);
  if (iters < 0) {
    const int64_t toy_iters[3] = {5000, 3000, 1000};
    const int64_t paper_iters[3] = {1500000, 200000, 20000};
    iters = (toy ? toy_iters : paper_iters)[stage - 1];
  }
  if (lr < 0) lr = stage == 3 ? 2e-5 : 8e-5;
  if (lookup != "transformer" && lookup != "linear" && lookup != "nn")
    throw ConfigError("config: lookup must be transformer | linear | nn");
  if (degrade_mode != "blur" && degrade_mode != "mask")
    throw ConfigError("config: degrade_mode must be blur | mask");
  autoencoder().validate();
}

AutoencoderConfig TrainConfig::autoencoder() const {
  AutoencoderConfig a;
  a.image_size = image_size;
  a.compression = compression;
  a.code_dim = code_dim;
  a.codebook_size = codebook_size;
  a.base_channels = base_channels;
  a.max_channels = max_channels;
  a.num_res_blocks = res_blocks;
  return a;
}

TransformerConfig TrainConfig::transformer() const {
  TransformerConfig t;
  const int m = image_size / compression;
  t.seq_len = m * m;
  t.dim = code_dim;
  t.vocab = codebook_size;
  t.layers = lookup == "linear" ? 0 : t_layers;
  t.ff_mult = t_ff_mult;
  return t;
}

std::vector<std::pair<std::string, std::string>> TrainConfig::echo() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& def : keys()) out.emplace_back(def.name, def.get(*this));
  return out;
}

std::string TrainConfig::print() const {
  std::ostringstream os;
  for (const auto& [k, v] : echo()) os << k << " = " << v << "\n";
  return os.str();
}

std::string config_key_reference() {
  std::ostringstream os;
  for (const auto& def : keys()) os << "  " << def.name << ": " << def.desc << "\n";
  return os.str();
}

}  // namespace vqr
