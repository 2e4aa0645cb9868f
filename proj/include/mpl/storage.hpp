// SPDX-License-Identifier: Apache-2.0
//
// Single-file binary checkpoints: magic, version, a length-prefixed JSON
// header (config, array names and shapes, run metadata), then raw
// little-endian float32 payloads in header order. Round-trips bitwise.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpl/adamw.hpp"
#include "mpl/model.hpp"
#include "mpl/prompts.hpp"
#include "mpl/training.hpp"

namespace mpl::storage {

struct OptimizerState {
  int64_t step_count = 0;
  // Parameter name -> (first moment, second moment).
  std::map<std::string, std::pair<std::vector<float>, std::vector<float>>> moments;

  static OptimizerState from(const num::AdamW& opt);
  void install(num::AdamW& opt) const;
};

struct Checkpoint {
  model::ModelConfig config;
  model::ModelParams params;
  prompts::PromptBank bank;
  std::optional<OptimizerState> optimizer;
  train::Phase phase = train::Phase::upt;
  train::Setting setting = train::Setting::mpl;
  uint64_t seed = 0;
  double best_val_cider = 0.0;
  std::string run_config_echo;  // resolved run configuration, JSON text
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mpl::storage
