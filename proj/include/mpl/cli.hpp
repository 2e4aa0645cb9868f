// SPDX-License-Identifier: Apache-2.0
//
// Flat subcommand CLI: gen-data, train, eval, ablate, dump-attention,
// score. One shared config loader; command-line overrides win over the
// config file; the resolved configuration is echoed into every artifact.

#pragma once

#include <array>
#include <string>
#include <vector>

#include "mpl/data_synth.hpp"
#include "mpl/model.hpp"
#include "mpl/training.hpp"

namespace mpl::cli {

struct RunConfig {
  model::ModelConfig model = model::ModelConfig::desk();
  train::TrainConfig train;
  data::CorpusSpec corpus;
  std::array<double, 3> split_ratios = {0.7, 0.2, 0.1};
  struct Paths {
    std::string data_dir = "data";
    std::string out_dir = "out";
    std::string init_checkpoint;
    std::string titles_only;
  } paths;

  // Strict loader: unknown keys are rejected.
  static RunConfig from_file(const std::string& path);
  static RunConfig from_json_text(const std::string& text);
  std::string to_json() const;  // resolved echo
};

// Exit codes: 0 success, 2 usage error, 1 runtime error.
int run(std::vector<std::string> args);

}  // namespace mpl::cli
