// SPDX-License-Identifier: Apache-2.0
//
// Two-phase training: unimodal prompt training (three prompt-prefixed
// generation pipelines under a weighted cross-entropy sum) followed by
// multimodal prompt training (decoder conditioned on the cycle-aligned
// prompt set plus image and attribute encodings). Also hosts the ablation
// harness and the inference pipeline.

#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpl/adamw.hpp"
#include "mpl/cycle_align.hpp"
#include "mpl/data_synth.hpp"
#include "mpl/metrics.hpp"
#include "mpl/model.hpp"
#include "mpl/prompts.hpp"

namespace mpl::train {

enum class Phase { upt, mpt };

// Ablation settings: which prompts exist and whether alignment fuses them.
enum class Setting { base, a, b, c, d, mpl };

const char* to_string(Phase phase);
const char* to_string(Setting setting);
Phase phase_from_string(const std::string& s);
Setting setting_from_string(const std::string& s);

struct TrainConfig {
  Phase phase = Phase::upt;
  Setting setting = Setting::mpl;
  float lambda1 = 1.0f;  // image pipeline weight
  float lambda2 = 1.0f;  // attribute pipeline weight
  float lambda3 = 1.0f;  // title auto-encoding weight
  int batch_size = 8;
  float learning_rate = 1e-4f;
  float weight_decay = 0.01f;
  int max_epochs = 30;
  int patience = 5;       // validation rounds without CIDEr improvement
  uint64_t seed = 0;
  double fewshot_fraction = 0.01;
  int val_beam = 1;       // beam for per-epoch validation generation
  int eval_beam = 3;      // beam for final test evaluation
  int val_every = 1;      // validate every k epochs
  int val_max_records = 64;  // cap on validation generations (0 = all)
  bool freeze_prompts_in_mpt = true;

  void validate() const;
};

// Records with everything the model consumes precomputed.
struct EncodedRecord {
  std::string id;
  num::Tensor image_features;
  std::vector<int> attr_ids;
  std::vector<int> title_ids;  // bos ... eos, truncated to max_title_len
  std::vector<std::string> title_tokens;
};

struct EncodedDataset {
  std::vector<EncodedRecord> train;
  std::vector<EncodedRecord> validation;
  std::vector<EncodedRecord> test;
  data::Vocabulary vocab;
  // Optional unlabeled titles feeding only the title auto-encoding pipeline.
  std::vector<EncodedRecord> extra_titles;
};

EncodedRecord encode_record(const data::ProductRecord& rec,
                            const data::Vocabulary& vocab,
                            const model::ModelConfig& cfg);
std::vector<EncodedRecord> encode_records(const std::vector<data::ProductRecord>& recs,
                                          const data::Vocabulary& vocab,
                                          const model::ModelConfig& cfg);

// Per-setting mask on the UPT loss weights: single-prompt settings train
// only their own pipeline.
std::array<float, 3> effective_lambdas(Setting setting, const TrainConfig& cfg);

// Number of prompt parameters a setting actually trains.
size_t trainable_prompt_count(Setting setting, const model::ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Loss builders (templated so gradient checks run the same code at double
// precision)
// ---------------------------------------------------------------------------

// Decoder memory for the final phase / inference of each setting.
template <typename T>
num::TensorT<T> final_memory(Setting setting, const prompts::BankT<T>& bank,
                             const num::TensorT<T>& r_image,
                             const num::TensorT<T>& r_attrs, T align_scale) {
  switch (setting) {
    case Setting::base:
      return num::concat_rows(r_image, r_attrs);
    case Setting::a:
      return num::concat_rows(
          std::vector<num::TensorT<T>>{bank.visual, r_image, r_attrs});
    case Setting::b:
      return num::concat_rows(
          std::vector<num::TensorT<T>>{bank.attribute, r_image, r_attrs});
    case Setting::c:
      return num::concat_rows(
          std::vector<num::TensorT<T>>{bank.language, r_image, r_attrs});
    case Setting::d:
      return num::concat_rows(std::vector<num::TensorT<T>>{
          bank.visual, bank.attribute, bank.language, r_image, r_attrs});
    case Setting::mpl: {
      auto fused = cycle::cycle_align(bank, align_scale).fused;
      return num::concat_rows(
          std::vector<num::TensorT<T>>{fused, r_image, r_attrs});
    }
  }
  throw ContractError("final_memory: bad setting");
}

template <typename T>
struct UptLossesT {
  num::TensorT<T> image;     // undefined when its lambda is zero
  num::TensorT<T> attribute;
  num::TensorT<T> title;
  num::TensorT<T> combined;
};

// The three unimodal pipelines over one batch, mean per pipeline, combined
// with the lambda weights. Pipelines with a zero weight are skipped.
template <typename T>
UptLossesT<T> upt_losses(std::span<const EncodedRecord> batch,
                         const model::ParamsT<T>& params,
                         const prompts::BankT<T>& bank,
                         const model::ModelConfig& cfg,
                         const std::array<float, 3>& lambdas,
                         const model::EvalCtx& ctx = {}) {
  if (batch.empty()) throw ContractError("upt_losses: empty batch");
  const T inv_n = T(1) / static_cast<T>(batch.size());
  UptLossesT<T> out;
  auto accumulate = [&](num::TensorT<T>& slot, num::TensorT<T> term) {
    slot = slot.defined() ? num::add(slot, term) : term;
  };
  for (const auto& rec : batch) {
    if (lambdas[0] != 0.0f) {
      auto features = num::TensorT<T>::from_data(
          rec.image_features.shape(),
          std::vector<T>(rec.image_features.data().begin(),
                         rec.image_features.data().end()));
      auto r_i = model::encode_image(features, params, cfg, ctx);
      auto memory = prompts::concat_prompt(bank.visual, r_i);
      accumulate(out.image, model::decode_loss(memory, rec.title_ids, params, cfg, ctx));
    }
    if (lambdas[1] != 0.0f) {
      auto r_a = model::encode_attributes(rec.attr_ids, params, cfg, ctx);
      auto memory = prompts::concat_prompt(bank.attribute, r_a);
      accumulate(out.attribute,
                 model::decode_loss(memory, rec.title_ids, params, cfg, ctx));
    }
    if (lambdas[2] != 0.0f) {
      std::span<const int> inner(rec.title_ids.data() + 1, rec.title_ids.size() - 2);
      auto r_t = model::encode_title(inner, params, cfg, ctx);
      auto memory = prompts::concat_prompt(bank.language, r_t);
      accumulate(out.title, model::decode_loss(memory, rec.title_ids, params, cfg, ctx));
    }
  }
  num::TensorT<T> combined;
  auto add_weighted = [&](const num::TensorT<T>& mean_slot, float lambda) {
    if (!mean_slot.defined()) return;
    auto term = num::scale(mean_slot, static_cast<T>(lambda));
    combined = combined.defined() ? num::add(combined, term) : term;
  };
  if (out.image.defined()) out.image = num::scale(out.image, inv_n);
  if (out.attribute.defined()) out.attribute = num::scale(out.attribute, inv_n);
  if (out.title.defined()) out.title = num::scale(out.title, inv_n);
  add_weighted(out.image, lambdas[0]);
  add_weighted(out.attribute, lambdas[1]);
  add_weighted(out.title, lambdas[2]);
  if (!combined.defined()) {
    throw ContractError("upt_losses: all loss weights are zero");
  }
  out.combined = combined;
  return out;
}

// Final-phase loss: decoder conditioned on the setting's memory layout.
// The aligned prompt set is rebuilt once per call (banks are frozen during
// this phase, so it is constant within a step).
template <typename T>
num::TensorT<T> mpt_loss(std::span<const EncodedRecord> batch,
                         const model::ParamsT<T>& params,
                         const prompts::BankT<T>& bank,
                         const model::ModelConfig& cfg, Setting setting,
                         const model::EvalCtx& ctx = {}) {
  if (batch.empty()) throw ContractError("mpt_loss: empty batch");
  num::TensorT<T> prompt_rows;  // shared across the batch
  switch (setting) {
    case Setting::base:
      break;
    case Setting::a:
      prompt_rows = bank.visual;
      break;
    case Setting::b:
      prompt_rows = bank.attribute;
      break;
    case Setting::c:
      prompt_rows = bank.language;
      break;
    case Setting::d:
      prompt_rows = num::concat_rows(std::vector<num::TensorT<T>>{
          bank.visual, bank.attribute, bank.language});
      break;
    case Setting::mpl:
      prompt_rows = cycle::cycle_align(bank, static_cast<T>(cfg.align_scale)).fused;
      break;
  }
  num::TensorT<T> total;
  for (const auto& rec : batch) {
    auto features = num::TensorT<T>::from_data(
        rec.image_features.shape(),
        std::vector<T>(rec.image_features.data().begin(),
                       rec.image_features.data().end()));
    auto r_i = model::encode_image(features, params, cfg, ctx);
    auto r_a = model::encode_attributes(rec.attr_ids, params, cfg, ctx);
    auto memory = prompt_rows.defined()
                      ? num::concat_rows(std::vector<num::TensorT<T>>{prompt_rows, r_i, r_a})
                      : num::concat_rows(r_i, r_a);
    auto loss = model::decode_loss(memory, rec.title_ids, params, cfg, ctx);
    total = total.defined() ? num::add(total, loss) : loss;
  }
  return num::scale(total, T(1) / static_cast<T>(batch.size()));
}

// ---------------------------------------------------------------------------
// Optimizer steps and the training driver (float only)
// ---------------------------------------------------------------------------

struct UptStepResult {
  float l_image = 0.0f;
  float l_attr = 0.0f;
  float l_title = 0.0f;
  float l_full = 0.0f;
};

// One UPT step: forward the three pipelines, backpropagate the weighted
// sum, update encoders, decoder, embeddings, and the banks named by the
// setting's lambda mask.
UptStepResult upt_step(std::span<const EncodedRecord> batch, model::ModelParams& params,
                       prompts::PromptBank& bank, const model::ModelConfig& cfg,
                       const TrainConfig& tcfg, num::AdamW& opt, Rng& rng);

// One final-phase step; prompt banks stay untouched (unless unfrozen by
// config override).
float mpt_step(std::span<const EncodedRecord> batch, model::ModelParams& params,
               prompts::PromptBank& bank, const model::ModelConfig& cfg,
               const TrainConfig& tcfg, num::AdamW& opt, Rng& rng);

struct EpochStats {
  int epoch = 0;
  float l_image = 0.0f;
  float l_attr = 0.0f;
  float l_title = 0.0f;
  float l_full = 0.0f;
  bool validated = false;
  metrics::Scores val_scores;
};

struct TrainReport {
  Phase phase = Phase::upt;
  Setting setting = Setting::mpl;
  std::vector<EpochStats> epochs;
  int best_epoch = -1;
  double best_val_cider = 0.0;
  double wall_time_sec = 0.0;
};

struct TrainResult {
  model::ModelParams params;
  prompts::PromptBank bank;
  TrainReport report;
};

// Runs one phase to completion with early stopping on validation CIDEr and
// returns the best-scoring snapshot.
TrainResult train(const TrainConfig& tcfg, const model::ModelConfig& cfg,
                  const EncodedDataset& dataset, model::ModelParams init_params,
                  prompts::PromptBank init_bank);

struct GeneratedExample {
  std::string id;
  std::vector<std::string> generated;
  std::vector<std::string> reference;
};

// {image, attributes} -> memory -> beam search -> surface tokens.
std::string generate_title(const EncodedRecord& rec, const model::ModelParams& params,
                           const prompts::PromptBank& bank,
                           const model::ModelConfig& cfg, Setting setting,
                           const data::Vocabulary& vocab, int beam_size);

std::vector<GeneratedExample> generate_for_records(
    std::span<const EncodedRecord> records, const model::ModelParams& params,
    const prompts::PromptBank& bank, const model::ModelConfig& cfg, Setting setting,
    const data::Vocabulary& vocab, int beam_size);

metrics::Scores score_examples(const std::vector<GeneratedExample>& examples);

// Fraction of teacher-forced positions whose argmax logit hits the target.
double next_token_accuracy(std::span<const EncodedRecord> records,
                           const model::ModelParams& params,
                           const prompts::PromptBank& bank,
                           const model::ModelConfig& cfg, Setting setting);

struct PipelineReport {
  Setting setting = Setting::mpl;
  std::optional<TrainReport> upt;
  TrainReport final_phase;
  metrics::Scores test_scores;
  size_t fewshot_count = 0;
  double fewshot_fraction = 0.0;
};

struct PipelineResult {
  model::ModelParams params;
  prompts::PromptBank bank;
  PipelineReport report;
};

// Few-shot protocol for one setting: subsample the train split, run UPT
// (when the setting has prompts), run the final phase on the same subset,
// then score the test split.
PipelineResult run_pipeline(const TrainConfig& base_cfg, const model::ModelConfig& cfg,
                            const EncodedDataset& dataset);

// The full framework = the `mpl` setting of run_pipeline.
PipelineResult run_mpl(const TrainConfig& base_cfg, const model::ModelConfig& cfg,
                       const EncodedDataset& dataset);

struct AblationRow {
  Setting setting;
  metrics::Scores scores;
};

// Runs all six settings (or a subset) and returns one metrics row each.
std::vector<AblationRow> ablate(const TrainConfig& base_cfg,
                                const model::ModelConfig& cfg,
                                const EncodedDataset& dataset,
                                const std::vector<Setting>& settings = {
                                    Setting::base, Setting::a, Setting::b,
                                    Setting::c, Setting::d, Setting::mpl});

std::string format_ablation_table(const std::vector<AblationRow>& rows);

// Structured-text report emission.
std::string train_report_to_json(const TrainReport& report);
std::string pipeline_report_to_json(const PipelineReport& report);
std::string ablation_to_json(const std::vector<AblationRow>& rows);

}  // namespace mpl::train
