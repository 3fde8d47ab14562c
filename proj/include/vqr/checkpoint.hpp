#pragma once

#include <string>
#include <vector>

#include "vqr/nets.hpp"
#include "vqr/rng.hpp"
#include "vqr/tensor.hpp"

namespace vqr {

/// Binary training container: magic "CFMC", format version, stage id, config
/// echo, named float32 tensors, Adam state per optimizer group, RNG state.
/// Everything little-endian; unknown versions are refused on load.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  uint32_t stage = 0;
  std::vector<std::pair<std::string, std::string>> config_echo;
  std::vector<std::pair<std::string, Tensor>> tensors;

  struct OptGroup {
    std::string name;
    int64_t t = 0;
    std::vector<Eigen::ArrayXf> m, v;
  };
  std::vector<OptGroup> opt_groups;

  Rng::State rng{};
  bool has_rng = false;

  void add_params(const ParamMap& params);
  void add_opt(const std::string& name, const AdamState& st);

  const Tensor* find(const std::string& name) const;
  std::string config_value(const std::string& key) const;  // "" if absent

  /// Copy stored values into the model's named parameters; every requested
  /// name must be present with a matching shape.
  void load_into(ParamMap& params) const;
  /// Restore an optimizer group saved with add_opt.
  void load_opt(const std::string& name, AdamState& st) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace vqr
