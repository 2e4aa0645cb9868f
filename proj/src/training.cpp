// SPDX-License-Identifier: Apache-2.0
#include "mpl/training.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mpl/parallel.hpp"

namespace mpl::train {

using ordered_json = nlohmann::ordered_json;

const char* to_string(Phase phase) {
  return phase == Phase::upt ? "upt" : "mpt";
}

const char* to_string(Setting setting) {
  switch (setting) {
    case Setting::base: return "base";
    case Setting::a: return "a";
    case Setting::b: return "b";
    case Setting::c: return "c";
    case Setting::d: return "d";
    case Setting::mpl: return "mpl";
  }
  return "?";
}

Phase phase_from_string(const std::string& s) {
  if (s == "upt") return Phase::upt;
  if (s == "mpt") return Phase::mpt;
  throw ContractError("unknown phase '" + s + "'");
}

Setting setting_from_string(const std::string& s) {
  for (Setting v : {Setting::base, Setting::a, Setting::b, Setting::c, Setting::d,
                    Setting::mpl}) {
    if (s == to_string(v)) return v;
  }
  throw ContractError("unknown ablation setting '" + s + "'");
}

void TrainConfig::validate() const {
  for (float l : {lambda1, lambda2, lambda3}) {
    if (l < 0.0f || l > 1.0f) throw ContractError("train config: lambdas must be in [0,1]");
  }
  if (fewshot_fraction <= 0.0 || fewshot_fraction > 1.0) {
    throw ContractError("train config: few-shot fraction must be in (0,1]");
  }
  if (patience < 1) throw ContractError("train config: patience must be >= 1");
  if (batch_size < 1 || max_epochs < 1 || val_every < 1 || val_beam < 1 ||
      eval_beam < 1 || val_max_records < 0) {
    throw ContractError("train config: invalid value");
  }
  if (learning_rate <= 0.0f) throw ContractError("train config: learning rate");
}

EncodedRecord encode_record(const data::ProductRecord& rec,
                            const data::Vocabulary& vocab,
                            const model::ModelConfig& cfg) {
  EncodedRecord out;
  out.id = rec.id;
  out.image_features = rec.image_features;
  out.attr_ids = vocab.encode(data::attribute_tokens(rec));
  auto toks = data::title_tokens(rec);
  if (static_cast<int>(toks.size()) > cfg.max_title_len) {
    toks.resize(cfg.max_title_len);
  }
  out.title_tokens = toks;
  out.title_ids.push_back(kBosId);
  for (int id : vocab.encode(toks)) out.title_ids.push_back(id);
  out.title_ids.push_back(kEosId);
  return out;
}

std::vector<EncodedRecord> encode_records(const std::vector<data::ProductRecord>& recs,
                                          const data::Vocabulary& vocab,
                                          const model::ModelConfig& cfg) {
  std::vector<EncodedRecord> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(encode_record(r, vocab, cfg));
  return out;
}

std::array<float, 3> effective_lambdas(Setting setting, const TrainConfig& cfg) {
  switch (setting) {
    case Setting::base: return {0.0f, 0.0f, 0.0f};
    case Setting::a: return {cfg.lambda1, 0.0f, 0.0f};
    case Setting::b: return {0.0f, cfg.lambda2, 0.0f};
    case Setting::c: return {0.0f, 0.0f, cfg.lambda3};
    case Setting::d:
    case Setting::mpl: return {cfg.lambda1, cfg.lambda2, cfg.lambda3};
  }
  return {0.0f, 0.0f, 0.0f};
}

size_t trainable_prompt_count(Setting setting, const model::ModelConfig& cfg) {
  const size_t per_bank = static_cast<size_t>(cfg.n_prompts) * cfg.d;
  switch (setting) {
    case Setting::base: return 0;
    case Setting::a:
    case Setting::b:
    case Setting::c: return per_bank;
    case Setting::d:
    case Setting::mpl: return 3 * per_bank;
  }
  return 0;
}

namespace {

// Marks what the current step trains and returns the optimizer's view.
// Encoders whose pipeline is switched off receive no gradients and stay
// out of the update.
std::map<std::string, num::Tensor> trainable_set(model::ModelParams& params,
                                                 prompts::PromptBank& bank,
                                                 Phase phase,
                                                 const std::array<float, 3>& lambdas,
                                                 bool freeze_prompts_in_mpt) {
  params.set_requires_grad(true);
  std::map<std::string, num::Tensor> set = params.by_name;
  if (phase == Phase::upt) {
    auto drop_prefix = [&set](const std::string& prefix) {
      for (auto it = set.begin(); it != set.end();) {
        it = it->first.rfind(prefix, 0) == 0 ? set.erase(it) : std::next(it);
      }
    };
    if (lambdas[0] == 0.0f) {
      drop_prefix("ienc.");
      drop_prefix("img.proj");
    }
    if (lambdas[1] == 0.0f && lambdas[2] == 0.0f) drop_prefix("tenc.");
  }
  const bool banks_on = phase == Phase::upt ? true : !freeze_prompts_in_mpt;
  const std::array<std::pair<const char*, num::Tensor*>, 3> banks = {{
      {"prompt.visual", &bank.visual},
      {"prompt.attribute", &bank.attribute},
      {"prompt.language", &bank.language},
  }};
  for (int i = 0; i < 3; ++i) {
    const bool train_this =
        banks_on && (phase == Phase::mpt || lambdas[static_cast<size_t>(i)] != 0.0f);
    banks[static_cast<size_t>(i)].second->set_requires_grad(train_this);
    if (train_this) set.emplace(banks[static_cast<size_t>(i)].first,
                                *banks[static_cast<size_t>(i)].second);
  }
  return set;
}

num::AdamWConfig optimizer_config(const TrainConfig& tcfg) {
  num::AdamWConfig acfg;
  acfg.learning_rate = tcfg.learning_rate;
  acfg.weight_decay = tcfg.weight_decay;
  return acfg;
}

std::vector<std::string> decode_generated(const data::Vocabulary& vocab,
                                          const std::vector<int>& ids) {
  return vocab.decode(ids);
}

std::vector<std::string> generate_tokens(const EncodedRecord& rec,
                                         const model::ModelParams& params,
                                         const prompts::PromptBank& bank,
                                         const model::ModelConfig& cfg,
                                         Setting setting,
                                         const data::Vocabulary& vocab,
                                         int beam_size) {
  const model::EvalCtx ctx{};
  auto r_i = model::encode_image(rec.image_features, params, cfg, ctx);
  auto r_a = model::encode_attributes(rec.attr_ids, params, cfg, ctx);
  auto memory = final_memory(setting, bank, r_i, r_a, cfg.align_scale);
  auto ids = model::beam_search(memory, params, cfg, beam_size, cfg.max_title_len + 1);
  return decode_generated(vocab, ids);
}

}  // namespace

UptStepResult upt_step(std::span<const EncodedRecord> batch, model::ModelParams& params,
                       prompts::PromptBank& bank, const model::ModelConfig& cfg,
                       const TrainConfig& tcfg, num::AdamW& opt, Rng& rng) {
  if (batch.empty()) throw ContractError("upt_step: empty batch");
  const auto lambdas = effective_lambdas(tcfg.setting, tcfg);
  auto set = trainable_set(params, bank, Phase::upt, lambdas, tcfg.freeze_prompts_in_mpt);
  const model::EvalCtx ctx{true, &rng};
  auto losses = upt_losses<float>(batch, params, bank, cfg, lambdas, ctx);
  losses.combined.backward();
  opt.step(set);
  UptStepResult out;
  out.l_image = losses.image.defined() ? losses.image.item() : 0.0f;
  out.l_attr = losses.attribute.defined() ? losses.attribute.item() : 0.0f;
  out.l_title = losses.title.defined() ? losses.title.item() : 0.0f;
  out.l_full = losses.combined.item();
  return out;
}

float mpt_step(std::span<const EncodedRecord> batch, model::ModelParams& params,
               prompts::PromptBank& bank, const model::ModelConfig& cfg,
               const TrainConfig& tcfg, num::AdamW& opt, Rng& rng) {
  if (batch.empty()) throw ContractError("mpt_step: empty batch");
  const auto lambdas = effective_lambdas(tcfg.setting, tcfg);
  auto set = trainable_set(params, bank, Phase::mpt, lambdas, tcfg.freeze_prompts_in_mpt);
  const model::EvalCtx ctx{true, &rng};
  auto loss = mpt_loss<float>(batch, params, bank, cfg, tcfg.setting, ctx);
  loss.backward();
  opt.step(set);
  return loss.item();
}

std::string generate_title(const EncodedRecord& rec, const model::ModelParams& params,
                           const prompts::PromptBank& bank,
                           const model::ModelConfig& cfg, Setting setting,
                           const data::Vocabulary& vocab, int beam_size) {
  const auto toks = generate_tokens(rec, params, bank, cfg, setting, vocab, beam_size);
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

std::vector<GeneratedExample> generate_for_records(
    std::span<const EncodedRecord> records, const model::ModelParams& params,
    const prompts::PromptBank& bank, const model::ModelConfig& cfg, Setting setting,
    const data::Vocabulary& vocab, int beam_size) {
  return parallel_map<GeneratedExample>(records.size(), [&](size_t i) {
    const auto& rec = records[i];
    GeneratedExample ex;
    ex.id = rec.id;
    ex.generated = generate_tokens(rec, params, bank, cfg, setting, vocab, beam_size);
    ex.reference = rec.title_tokens;
    return ex;
  });
}

metrics::Scores score_examples(const std::vector<GeneratedExample>& examples) {
  metrics::EvalCorpus corpus;
  corpus.reserve(examples.size());
  for (const auto& ex : examples) corpus.push_back({ex.generated, {ex.reference}});
  return metrics::score_all(corpus);
}

double next_token_accuracy(std::span<const EncodedRecord> records,
                           const model::ModelParams& params,
                           const prompts::PromptBank& bank,
                           const model::ModelConfig& cfg, Setting setting) {
  if (records.empty()) throw ContractError("next_token_accuracy: no records");
  const auto counts = parallel_map<std::pair<int, int>>(records.size(), [&](size_t i) {
    const auto& rec = records[i];
    const model::EvalCtx ctx{};
    auto r_i = model::encode_image(rec.image_features, params, cfg, ctx);
    auto r_a = model::encode_attributes(rec.attr_ids, params, cfg, ctx);
    auto memory = final_memory(setting, bank, r_i, r_a, cfg.align_scale);
    std::span<const int> input(rec.title_ids.data(), rec.title_ids.size() - 1);
    auto logits = model::decode_logits(memory, input, params, cfg, ctx);
    int correct = 0;
    const int v = logits.cols();
    for (int t = 0; t < logits.rows(); ++t) {
      int best = 0;
      for (int j = 1; j < v; ++j) {
        if (logits.at(t, j) > logits.at(t, best)) best = j;
      }
      correct += best == rec.title_ids[static_cast<size_t>(t) + 1];
    }
    return std::make_pair(correct, logits.rows());
  });
  int64_t correct = 0, total = 0;
  for (const auto& [c, t] : counts) {
    correct += c;
    total += t;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

TrainResult train(const TrainConfig& tcfg, const model::ModelConfig& cfg,
                  const EncodedDataset& dataset, model::ModelParams init_params,
                  prompts::PromptBank init_bank) {
  tcfg.validate();
  cfg.validate();
  if (dataset.train.empty()) throw ContractError("train: empty train split");
  if (dataset.validation.empty()) throw ContractError("train: empty validation split");

  const auto t0 = std::chrono::steady_clock::now();
  auto params = std::move(init_params);
  auto bank = std::move(init_bank);
  num::AdamW opt(optimizer_config(tcfg));
  Rng rng(derive_seed(tcfg.seed, tcfg.phase == Phase::upt ? 0x75707421ull : 0x6d707421ull));

  TrainReport report;
  report.phase = tcfg.phase;
  report.setting = tcfg.setting;

  const size_t val_count =
      tcfg.val_max_records == 0
          ? dataset.validation.size()
          : std::min<size_t>(dataset.validation.size(),
                             static_cast<size_t>(tcfg.val_max_records));
  std::span<const EncodedRecord> val_subset(dataset.validation.data(), val_count);

  model::ModelParams best_params;
  prompts::PromptBank best_bank;
  int no_improve = 0;
  bool stop = false;

  // Optional extra titles feed the auto-encoding pipeline only.
  TrainConfig titles_cfg = tcfg;
  titles_cfg.lambda1 = 0.0f;
  titles_cfg.lambda2 = 0.0f;
  const bool use_extra =
      tcfg.phase == Phase::upt && !dataset.extra_titles.empty() &&
      effective_lambdas(tcfg.setting, tcfg)[2] != 0.0f;

  std::vector<size_t> order(dataset.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EncodedRecord> batch;

  for (int epoch = 1; epoch <= tcfg.max_epochs && !stop; ++epoch) {
    rng.shuffle(order);
    EpochStats stats;
    stats.epoch = epoch;
    size_t seen = 0;
    for (size_t pos = 0; pos < order.size(); pos += tcfg.batch_size) {
      const size_t take = std::min<size_t>(tcfg.batch_size, order.size() - pos);
      batch.clear();
      for (size_t i = 0; i < take; ++i) batch.push_back(dataset.train[order[pos + i]]);
      if (tcfg.phase == Phase::upt) {
        const auto r = upt_step(batch, params, bank, cfg, tcfg, opt, rng);
        stats.l_image += r.l_image * take;
        stats.l_attr += r.l_attr * take;
        stats.l_title += r.l_title * take;
        stats.l_full += r.l_full * take;
      } else {
        const float l = mpt_step(batch, params, bank, cfg, tcfg, opt, rng);
        stats.l_full += l * take;
      }
      seen += take;
    }
    if (use_extra) {
      for (size_t pos = 0; pos < dataset.extra_titles.size(); pos += tcfg.batch_size) {
        const size_t take =
            std::min<size_t>(tcfg.batch_size, dataset.extra_titles.size() - pos);
        std::span<const EncodedRecord> tbatch(dataset.extra_titles.data() + pos, take);
        const auto r = upt_step(tbatch, params, bank, cfg, titles_cfg, opt, rng);
        stats.l_title += r.l_title * take;
        stats.l_full += r.l_full * take;
        seen += take;
      }
    }
    stats.l_image /= seen;
    stats.l_attr /= seen;
    stats.l_title /= seen;
    stats.l_full /= seen;

    if (epoch % tcfg.val_every == 0 || epoch == tcfg.max_epochs) {
      const auto examples = generate_for_records(val_subset, params, bank, cfg,
                                                 tcfg.setting, dataset.vocab,
                                                 tcfg.val_beam);
      stats.validated = true;
      stats.val_scores = score_examples(examples);
      if (report.best_epoch < 0 || stats.val_scores.cider > report.best_val_cider) {
        report.best_epoch = epoch;
        report.best_val_cider = stats.val_scores.cider;
        best_params = params.detached_copy();
        best_bank = bank.detached_copy();
        no_improve = 0;
      } else {
        ++no_improve;
        if (no_improve >= tcfg.patience) stop = true;
      }
    }
    report.epochs.push_back(stats);
  }

  report.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return TrainResult{std::move(best_params), std::move(best_bank), std::move(report)};
}

PipelineResult run_pipeline(const TrainConfig& base_cfg, const model::ModelConfig& cfg,
                            const EncodedDataset& dataset) {
  base_cfg.validate();
  cfg.validate();
  if (dataset.train.empty()) throw ContractError("run_pipeline: empty train split");

  EncodedDataset few = dataset;
  few.train.clear();
  for (size_t i :
       data::fewshot_indices(dataset.train.size(), base_cfg.fewshot_fraction,
                             base_cfg.seed)) {
    few.train.push_back(dataset.train[i]);
  }

  auto params = model::init_params(cfg, base_cfg.seed);
  auto bank = prompts::bank_init(cfg, base_cfg.seed);

  PipelineReport report;
  report.setting = base_cfg.setting;
  report.fewshot_count = few.train.size();
  report.fewshot_fraction = base_cfg.fewshot_fraction;

  if (base_cfg.setting != Setting::base) {
    TrainConfig upt_cfg = base_cfg;
    upt_cfg.phase = Phase::upt;
    auto upt_res = train(upt_cfg, cfg, few, std::move(params), std::move(bank));
    params = std::move(upt_res.params);
    bank = std::move(upt_res.bank);
    report.upt = std::move(upt_res.report);
  }

  TrainConfig mpt_cfg = base_cfg;
  mpt_cfg.phase = Phase::mpt;
  auto final_res = train(mpt_cfg, cfg, few, std::move(params), std::move(bank));
  report.final_phase = std::move(final_res.report);

  const auto examples =
      generate_for_records(few.test, final_res.params, final_res.bank, cfg,
                           base_cfg.setting, few.vocab, base_cfg.eval_beam);
  report.test_scores = score_examples(examples);

  return PipelineResult{std::move(final_res.params), std::move(final_res.bank),
                        std::move(report)};
}

PipelineResult run_mpl(const TrainConfig& base_cfg, const model::ModelConfig& cfg,
                       const EncodedDataset& dataset) {
  TrainConfig cfg_mpl = base_cfg;
  cfg_mpl.setting = Setting::mpl;
  return run_pipeline(cfg_mpl, cfg, dataset);
}

std::vector<AblationRow> ablate(const TrainConfig& base_cfg,
                                const model::ModelConfig& cfg,
                                const EncodedDataset& dataset,
                                const std::vector<Setting>& settings) {
  std::vector<AblationRow> rows;
  for (Setting s : settings) {
    TrainConfig scfg = base_cfg;
    scfg.setting = s;
    const auto res = run_pipeline(scfg, cfg, dataset);
    rows.push_back(AblationRow{s, res.report.test_scores});
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "setting  P_I  P_A  P_T  align   BLEU-4  ROUGE-L    CIDEr\n";
  for (const auto& row : rows) {
    const bool pi = row.setting == Setting::a || row.setting == Setting::d ||
                    row.setting == Setting::mpl;
    const bool pa = row.setting == Setting::b || row.setting == Setting::d ||
                    row.setting == Setting::mpl;
    const bool pt = row.setting == Setting::c || row.setting == Setting::d ||
                    row.setting == Setting::mpl;
    const bool align = row.setting == Setting::mpl;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-7s  %3s  %3s  %3s  %5s  %7.2f  %7.2f  %7.2f\n",
                  to_string(row.setting), pi ? "x" : "-", pa ? "x" : "-",
                  pt ? "x" : "-", align ? "x" : "-", row.scores.bleu4,
                  row.scores.rouge_l, row.scores.cider);
    os << buf;
  }
  return os.str();
}

namespace {

ordered_json scores_json(const metrics::Scores& s) {
  return ordered_json{{"bleu4", s.bleu4}, {"rouge_l", s.rouge_l}, {"cider", s.cider}};
}

ordered_json report_json(const TrainReport& r) {
  ordered_json j;
  j["phase"] = to_string(r.phase);
  j["setting"] = to_string(r.setting);
  j["best_epoch"] = r.best_epoch;
  j["best_val_cider"] = r.best_val_cider;
  j["wall_time_sec"] = r.wall_time_sec;
  j["epochs"] = ordered_json::array();
  for (const auto& e : r.epochs) {
    ordered_json ej;
    ej["epoch"] = e.epoch;
    ej["l_image"] = e.l_image;
    ej["l_attr"] = e.l_attr;
    ej["l_title"] = e.l_title;
    ej["l_full"] = e.l_full;
    if (e.validated) ej["val"] = scores_json(e.val_scores);
    j["epochs"].push_back(ej);
  }
  return j;
}

}  // namespace

std::string train_report_to_json(const TrainReport& report) {
  return report_json(report).dump(2);
}

std::string pipeline_report_to_json(const PipelineReport& report) {
  ordered_json j;
  j["setting"] = to_string(report.setting);
  j["fewshot_fraction"] = report.fewshot_fraction;
  j["fewshot_count"] = report.fewshot_count;
  if (report.upt) j["upt"] = report_json(*report.upt);
  j["final_phase"] = report_json(report.final_phase);
  j["test"] = scores_json(report.test_scores);
  return j.dump(2);
}

std::string ablation_to_json(const std::vector<AblationRow>& rows) {
  ordered_json j = ordered_json::array();
  for (const auto& row : rows) {
    j.push_back({{"setting", to_string(row.setting)},
                 {"scores", scores_json(row.scores)}});
  }
  return j.dump(2);
}

}  // namespace mpl::train
