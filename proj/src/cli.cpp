// SPDX-License-Identifier: Apache-2.0
#include "mpl/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mpl/cycle_align.hpp"
#include "mpl/error.hpp"
#include "mpl/metrics.hpp"
#include "mpl/storage.hpp"

namespace mpl::cli {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

// Raised for malformed invocations; mapped to exit code 2.
struct UsageError : Error {
  using Error::Error;
};

void check_keys(const ordered_json& j, const std::set<std::string>& allowed,
                const std::string& scope) {
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) {
      throw ContractError("config: unknown key '" + scope + key + "'");
    }
  }
}

template <typename T>
void maybe(const ordered_json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_model(const ordered_json& j, model::ModelConfig& m) {
  check_keys(j,
             {"preset", "d", "n_heads", "n_enc_layers", "n_dec_layers", "ffn_width",
              "max_title_len", "image_feature_dim", "image_seq_len", "n_prompts",
              "dropout", "align_scale"},
             "model.");
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "desk") {
      m = model::ModelConfig::desk();
    } else if (preset == "paper") {
      m = model::ModelConfig{};
    } else {
      throw ContractError("config: unknown model preset '" + preset + "'");
    }
  }
  maybe(j, "d", m.d);
  maybe(j, "n_heads", m.n_heads);
  maybe(j, "n_enc_layers", m.n_enc_layers);
  maybe(j, "n_dec_layers", m.n_dec_layers);
  maybe(j, "ffn_width", m.ffn_width);
  maybe(j, "max_title_len", m.max_title_len);
  maybe(j, "image_feature_dim", m.image_feature_dim);
  maybe(j, "image_seq_len", m.image_seq_len);
  maybe(j, "n_prompts", m.n_prompts);
  maybe(j, "dropout", m.dropout);
  maybe(j, "align_scale", m.align_scale);
}

void parse_train(const ordered_json& j, train::TrainConfig& t) {
  check_keys(j,
             {"phase", "setting", "lambda1", "lambda2", "lambda3", "batch_size",
              "learning_rate", "weight_decay", "max_epochs", "patience", "seed",
              "fewshot", "val_beam", "eval_beam", "val_every", "val_max_records",
              "freeze_prompts_in_mpt"},
             "train.");
  if (j.contains("phase")) t.phase = train::phase_from_string(j.at("phase"));
  if (j.contains("setting")) t.setting = train::setting_from_string(j.at("setting"));
  maybe(j, "lambda1", t.lambda1);
  maybe(j, "lambda2", t.lambda2);
  maybe(j, "lambda3", t.lambda3);
  maybe(j, "batch_size", t.batch_size);
  maybe(j, "learning_rate", t.learning_rate);
  maybe(j, "weight_decay", t.weight_decay);
  maybe(j, "max_epochs", t.max_epochs);
  maybe(j, "patience", t.patience);
  maybe(j, "seed", t.seed);
  maybe(j, "fewshot", t.fewshot_fraction);
  maybe(j, "val_beam", t.val_beam);
  maybe(j, "eval_beam", t.eval_beam);
  maybe(j, "val_every", t.val_every);
  maybe(j, "val_max_records", t.val_max_records);
  maybe(j, "freeze_prompts_in_mpt", t.freeze_prompts_in_mpt);
}

void parse_corpus(const ordered_json& j, data::CorpusSpec& c,
                  std::array<double, 3>& ratios) {
  check_keys(j,
             {"num_products", "num_categories", "num_brands", "num_colors",
              "num_materials", "num_sizes", "noise", "expose_brand", "expose_color",
              "expose_material", "expose_size", "domain", "seed", "ratios"},
             "corpus.");
  maybe(j, "num_products", c.num_products);
  maybe(j, "num_categories", c.num_categories);
  maybe(j, "num_brands", c.num_brands);
  maybe(j, "num_colors", c.num_colors);
  maybe(j, "num_materials", c.num_materials);
  maybe(j, "num_sizes", c.num_sizes);
  maybe(j, "noise", c.noise);
  maybe(j, "expose_brand", c.expose_brand);
  maybe(j, "expose_color", c.expose_color);
  maybe(j, "expose_material", c.expose_material);
  maybe(j, "expose_size", c.expose_size);
  maybe(j, "seed", c.seed);
  if (j.contains("domain")) {
    const auto d = j.at("domain").get<std::string>();
    if (d == "novel") {
      c.domain = data::Domain::novel;
    } else if (d == "pretrain") {
      c.domain = data::Domain::pretrain;
    } else {
      throw ContractError("config: unknown corpus domain '" + d + "'");
    }
  }
  if (j.contains("ratios")) {
    const auto r = j.at("ratios").get<std::vector<double>>();
    if (r.size() != 3) throw ContractError("config: corpus.ratios needs 3 entries");
    ratios = {r[0], r[1], r[2]};
  }
}

void parse_paths(const ordered_json& j, RunConfig::Paths& p) {
  check_keys(j, {"data_dir", "out_dir", "init_checkpoint", "titles_only"}, "paths.");
  maybe(j, "data_dir", p.data_dir);
  maybe(j, "out_dir", p.out_dir);
  maybe(j, "init_checkpoint", p.init_checkpoint);
  maybe(j, "titles_only", p.titles_only);
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config: " + std::string(e.what()));
  }
  check_keys(j, {"model", "train", "corpus", "paths"}, "");
  RunConfig cfg;
  if (j.contains("model")) parse_model(j.at("model"), cfg.model);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("corpus")) parse_corpus(j.at("corpus"), cfg.corpus, cfg.split_ratios);
  if (j.contains("paths")) parse_paths(j.at("paths"), cfg.paths);
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw Error("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), {});
  return from_json_text(text);
}

std::string RunConfig::to_json() const {
  ordered_json j;
  j["model"] = {{"d", model.d},
                {"n_heads", model.n_heads},
                {"n_enc_layers", model.n_enc_layers},
                {"n_dec_layers", model.n_dec_layers},
                {"ffn_width", model.ffn_width},
                {"max_title_len", model.max_title_len},
                {"image_feature_dim", model.image_feature_dim},
                {"image_seq_len", model.image_seq_len},
                {"n_prompts", model.n_prompts},
                {"dropout", model.dropout},
                {"align_scale", model.align_scale}};
  j["train"] = {{"phase", train::to_string(train.phase)},
                {"setting", train::to_string(train.setting)},
                {"lambda1", train.lambda1},
                {"lambda2", train.lambda2},
                {"lambda3", train.lambda3},
                {"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"weight_decay", train.weight_decay},
                {"max_epochs", train.max_epochs},
                {"patience", train.patience},
                {"seed", train.seed},
                {"fewshot", train.fewshot_fraction},
                {"val_beam", train.val_beam},
                {"eval_beam", train.eval_beam},
                {"val_every", train.val_every},
                {"val_max_records", train.val_max_records},
                {"freeze_prompts_in_mpt", train.freeze_prompts_in_mpt}};
  j["corpus"] = {{"num_products", corpus.num_products},
                 {"num_categories", corpus.num_categories},
                 {"num_brands", corpus.num_brands},
                 {"num_colors", corpus.num_colors},
                 {"num_materials", corpus.num_materials},
                 {"num_sizes", corpus.num_sizes},
                 {"noise", corpus.noise},
                 {"expose_brand", corpus.expose_brand},
                 {"expose_color", corpus.expose_color},
                 {"expose_material", corpus.expose_material},
                 {"expose_size", corpus.expose_size},
                 {"domain", corpus.domain == data::Domain::novel ? "novel" : "pretrain"},
                 {"seed", corpus.seed},
                 {"ratios", split_ratios}};
  j["paths"] = {{"data_dir", paths.data_dir},
                {"out_dir", paths.out_dir},
                {"init_checkpoint", paths.init_checkpoint},
                {"titles_only", paths.titles_only}};
  return j.dump(2);
}

namespace {

struct LoadedDataset {
  train::EncodedDataset encoded;
  size_t train_count = 0;
};

// Loads the three split files, builds the vocabulary from the train split,
// finalizes vocab_size, and encodes everything.
LoadedDataset load_dataset(RunConfig& cfg) {
  const fs::path dir(cfg.paths.data_dir);
  for (const char* name : {"train.jsonl", "val.jsonl", "test.jsonl"}) {
    if (!fs::exists(dir / name)) {
      throw UsageError("dataset file missing: " + (dir / name).string());
    }
  }
  const auto train_recs = data::load_records((dir / "train.jsonl").string());
  const auto val_recs = data::load_records((dir / "val.jsonl").string());
  const auto test_recs = data::load_records((dir / "test.jsonl").string());

  LoadedDataset out;
  out.train_count = train_recs.size();
  out.encoded.vocab = data::build_vocab(train_recs);
  cfg.model.vocab_size = out.encoded.vocab.size();
  if (!train_recs.empty()) {
    cfg.model.image_feature_dim = train_recs[0].image_features.cols();
    cfg.model.image_seq_len = train_recs[0].image_features.rows();
  }
  cfg.model.validate();
  out.encoded.train = train::encode_records(train_recs, out.encoded.vocab, cfg.model);
  out.encoded.validation = train::encode_records(val_recs, out.encoded.vocab, cfg.model);
  out.encoded.test = train::encode_records(test_recs, out.encoded.vocab, cfg.model);
  if (!cfg.paths.titles_only.empty()) {
    const auto extra = data::load_records(cfg.paths.titles_only);
    out.encoded.extra_titles =
        train::encode_records(extra, out.encoded.vocab, cfg.model);
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw Error("cannot open " + path + " for writing");
  out << text;
}

// Hex floats so traces compare bit-for-bit across runs.
std::string loss_trace(const train::TrainReport& report) {
  std::string out = "# epoch l_image l_attr l_title l_full val_cider\n";
  char buf[192];
  for (const auto& e : report.epochs) {
    std::snprintf(buf, sizeof(buf), "%d %a %a %a %a %a\n", e.epoch, e.l_image,
                  e.l_attr, e.l_title, e.l_full,
                  e.validated ? e.val_scores.cider : -1.0);
    out += buf;
  }
  return out;
}

storage::Checkpoint make_checkpoint(const RunConfig& cfg, train::Phase phase,
                                    const model::ModelParams& params,
                                    const prompts::PromptBank& bank,
                                    double best_cider) {
  storage::Checkpoint ckpt;
  ckpt.config = cfg.model;
  ckpt.params = params.detached_copy();
  ckpt.bank = bank.detached_copy();
  ckpt.phase = phase;
  ckpt.setting = cfg.train.setting;
  ckpt.seed = cfg.train.seed;
  ckpt.best_val_cider = best_cider;
  ckpt.run_config_echo = cfg.to_json();
  return ckpt;
}

int cmd_gen_data(RunConfig cfg) {
  cfg.corpus.image_feature_dim = cfg.model.image_feature_dim;
  cfg.corpus.image_seq_len = cfg.model.image_seq_len;
  const auto records = data::generate_corpus(cfg.corpus);
  const auto splits = data::split(records, cfg.split_ratios, cfg.corpus.seed);

  const fs::path dir(cfg.paths.data_dir);
  fs::create_directories(dir);
  data::save_records((dir / "train.jsonl").string(), splits.train);
  data::save_records((dir / "val.jsonl").string(), splits.validation);
  data::save_records((dir / "test.jsonl").string(), splits.test);

  ordered_json manifest;
  manifest["files"] = {"train.jsonl", "val.jsonl", "test.jsonl"};
  manifest["counts"] = {{"train", splits.train.size()},
                        {"validation", splits.validation.size()},
                        {"test", splits.test.size()}};
  manifest["ratios"] = cfg.split_ratios;
  manifest["config"] = ordered_json::parse(cfg.to_json());
  write_text((dir / "manifest.json").string(), manifest.dump(2));

  std::cout << "wrote " << splits.train.size() << "/" << splits.validation.size()
            << "/" << splits.test.size() << " records to " << dir.string() << "\n";
  return 0;
}

// `mode` is upt, mpt, or mpl (the combined pipeline).
int cmd_train(RunConfig cfg, const std::string& mode) {
  auto dataset = load_dataset(cfg);
  const fs::path out_dir(cfg.paths.out_dir);
  fs::create_directories(out_dir);

  const auto echo = ordered_json::parse(cfg.to_json());

  if (mode == "upt" && cfg.train.setting == train::Setting::base) {
    throw UsageError("the base setting has no prompts to train in the upt phase");
  }

  auto finish_phase = [&](const char* tag, const train::TrainResult& res) {
    storage::save_checkpoint((out_dir / (std::string(tag) + ".ckpt")).string(),
                             make_checkpoint(cfg, res.report.phase, res.params,
                                             res.bank, res.report.best_val_cider));
    write_text((out_dir / ("trace_" + std::string(tag) + ".txt")).string(),
               loss_trace(res.report));
    ordered_json rj;
    rj["config"] = echo;
    rj["report"] = ordered_json::parse(train::train_report_to_json(res.report));
    write_text((out_dir / (std::string(tag) + "_report.json")).string(), rj.dump(2));
    std::cout << tag << ": best epoch " << res.report.best_epoch << ", val CIDEr "
              << res.report.best_val_cider << "\n";
  };

  // Both standalone phases subsample exactly like the combined pipeline.
  auto fewshot_train = [&] {
    train::EncodedDataset few = dataset.encoded;
    few.train.clear();
    for (size_t i :
         data::fewshot_indices(dataset.encoded.train.size(),
                               cfg.train.fewshot_fraction, cfg.train.seed)) {
      few.train.push_back(dataset.encoded.train[i]);
    }
    return few;
  };

  if (mode == "upt") {
    auto few = fewshot_train();
    auto cfg_phase = cfg.train;
    cfg_phase.phase = train::Phase::upt;
    const auto res = train::train(cfg_phase, cfg.model, few,
                                  model::init_params(cfg.model, cfg.train.seed),
                                  prompts::bank_init(cfg.model, cfg.train.seed));
    finish_phase("upt", res);
    return 0;
  }

  if (mode == "mpt") {
    if (cfg.paths.init_checkpoint.empty()) {
      throw UsageError("--phase mpt requires --init <checkpoint>");
    }
    const auto init = storage::load_checkpoint(cfg.paths.init_checkpoint);
    if (init.config.vocab_size != cfg.model.vocab_size) {
      throw Error("checkpoint vocabulary does not match the dataset");
    }
    cfg.model = init.config;
    auto few = fewshot_train();
    auto cfg_phase = cfg.train;
    cfg_phase.phase = train::Phase::mpt;
    const auto res = train::train(cfg_phase, cfg.model, few,
                                  init.params.detached_copy(),
                                  init.bank.detached_copy());
    finish_phase("mpt", res);
    return 0;
  }

  // Full pipeline (upt then mpt then test evaluation).
  const auto res = train::run_pipeline(cfg.train, cfg.model, dataset.encoded);
  storage::save_checkpoint(
      (out_dir / "mpl.ckpt").string(),
      make_checkpoint(cfg, train::Phase::mpt, res.params, res.bank,
                      res.report.final_phase.best_val_cider));
  if (res.report.upt) {
    write_text((out_dir / "trace_upt.txt").string(), loss_trace(*res.report.upt));
  }
  write_text((out_dir / "trace_mpt.txt").string(),
             loss_trace(res.report.final_phase));
  ordered_json rj;
  rj["config"] = echo;
  rj["report"] = ordered_json::parse(train::pipeline_report_to_json(res.report));
  write_text((out_dir / "mpl_report.json").string(), rj.dump(2));
  std::cout << "mpl: test BLEU-4 " << res.report.test_scores.bleu4 << ", ROUGE-L "
            << res.report.test_scores.rouge_l << ", CIDEr "
            << res.report.test_scores.cider << "\n";
  return 0;
}

int cmd_eval(RunConfig cfg, const std::string& split) {
  if (cfg.paths.init_checkpoint.empty()) {
    throw UsageError("eval requires --init <checkpoint>");
  }
  auto dataset = load_dataset(cfg);
  const auto ckpt = storage::load_checkpoint(cfg.paths.init_checkpoint);
  if (ckpt.config.vocab_size != cfg.model.vocab_size) {
    throw Error("checkpoint vocabulary does not match the dataset");
  }
  cfg.model = ckpt.config;

  const std::vector<train::EncodedRecord>* records = nullptr;
  if (split == "train") {
    records = &dataset.encoded.train;
  } else if (split == "val") {
    records = &dataset.encoded.validation;
  } else if (split == "test") {
    records = &dataset.encoded.test;
  } else {
    throw UsageError("unknown split '" + split + "'");
  }

  const auto examples = train::generate_for_records(
      *records, ckpt.params, ckpt.bank, cfg.model, ckpt.setting,
      dataset.encoded.vocab, cfg.train.eval_beam);
  const auto scores = train::score_examples(examples);

  ordered_json report;
  report["config"] = ordered_json::parse(cfg.to_json());
  report["checkpoint"] = cfg.paths.init_checkpoint;
  report["split"] = split;
  report["beam"] = cfg.train.eval_beam;
  report["scores"] = {{"bleu4", scores.bleu4},
                      {"rouge_l", scores.rouge_l},
                      {"cider", scores.cider}};
  report["examples"] = ordered_json::array();
  for (const auto& ex : examples) {
    std::string gen, ref;
    for (const auto& t : ex.generated) gen += (gen.empty() ? "" : " ") + t;
    for (const auto& t : ex.reference) ref += (ref.empty() ? "" : " ") + t;
    report["examples"].push_back({{"id", ex.id}, {"generated", gen}, {"reference", ref}});
  }
  const fs::path out_dir(cfg.paths.out_dir);
  write_text((out_dir / "eval_report.json").string(), report.dump(2));

  std::cout << "BLEU-4 " << scores.bleu4 << "\nROUGE-L " << scores.rouge_l
            << "\nCIDEr " << scores.cider << "\n";
  return 0;
}

int cmd_ablate(RunConfig cfg, const std::string& settings_csv, bool assert_ordering) {
  auto dataset = load_dataset(cfg);

  std::vector<train::Setting> settings;
  {
    std::string item;
    std::istringstream ss(settings_csv);
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) settings.push_back(train::setting_from_string(item));
    }
  }
  if (settings.empty()) throw UsageError("--settings selected nothing");

  const auto rows = train::ablate(cfg.train, cfg.model, dataset.encoded, settings);
  const auto table = train::format_ablation_table(rows);

  const fs::path out_dir(cfg.paths.out_dir);
  write_text((out_dir / "ablation.txt").string(),
             "# config: " + cfg.to_json() + "\n" + table);
  ordered_json j;
  j["config"] = ordered_json::parse(cfg.to_json());
  j["rows"] = ordered_json::parse(train::ablation_to_json(rows));
  write_text((out_dir / "ablation.json").string(), j.dump(2));
  std::cout << table;

  if (assert_ordering) {
    double base_cider = -1.0, mpl_cider = -1.0;
    for (const auto& row : rows) {
      if (row.setting == train::Setting::base) base_cider = row.scores.cider;
      if (row.setting == train::Setting::mpl) mpl_cider = row.scores.cider;
    }
    if (base_cider < 0.0 || mpl_cider < 0.0) {
      throw UsageError("--assert-ordering needs both base and mpl settings");
    }
    if (mpl_cider <= base_cider) {
      std::cerr << "ordering violated: mpl CIDEr " << mpl_cider << " <= base "
                << base_cider << "\n";
      return 1;
    }
  }
  return 0;
}

int cmd_dump_attention(RunConfig cfg) {
  prompts::PromptBank bank;
  if (!cfg.paths.init_checkpoint.empty()) {
    const auto ckpt = storage::load_checkpoint(cfg.paths.init_checkpoint);
    cfg.model = ckpt.config;
    bank = ckpt.bank.detached_copy();
  } else {
    cfg.model.vocab_size = std::max(cfg.model.vocab_size, kNumReservedIds);
    bank = prompts::bank_init(cfg.model, cfg.train.seed);
  }
  const auto weights = cycle::alignment_weights(bank, cfg.model.align_scale);

  ordered_json j;
  j["config"] = ordered_json::parse(cfg.to_json());
  j["blocks"] = ordered_json::array();
  for (size_t b = 0; b < weights.size(); ++b) {
    const auto& w = weights[b];
    ordered_json rows = ordered_json::array();
    ordered_json top3 = ordered_json::array();
    for (int i = 0; i < w.rows(); ++i) {
      std::vector<float> row(w.cols());
      for (int k = 0; k < w.cols(); ++k) row[k] = w.at(i, k);
      rows.push_back(row);
      // Indices of the three largest weights, stable for ties.
      std::vector<int> idx(w.cols());
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(),
                       [&row](int x, int y) { return row[x] > row[y]; });
      idx.resize(std::min<size_t>(3, idx.size()));
      top3.push_back(idx);
    }
    j["blocks"].push_back({{"label", cycle::block_labels()[b]},
                           {"weights", rows},
                           {"top3", top3}});
  }
  const fs::path out_dir(cfg.paths.out_dir);
  write_text((out_dir / "attention.json").string(), j.dump(2));
  std::cout << "wrote " << (out_dir / "attention.json").string() << "\n";
  return 0;
}

int cmd_score(const std::string& input_path) {
  std::ifstream in(input_path);
  if (!in.good()) throw UsageError("score: cannot open " + input_path);
  metrics::EvalCorpus corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError("score: line without a tab separator");
    }
    metrics::EvalEntry entry;
    entry.candidate = metrics::tokenize(line.substr(0, tab));
    const std::string refs = line.substr(tab + 1);
    size_t pos = 0;
    while (true) {
      const auto sep = refs.find(" ||| ", pos);
      entry.references.push_back(metrics::tokenize(refs.substr(pos, sep - pos)));
      if (sep == std::string::npos) break;
      pos = sep + 5;
    }
    corpus.push_back(std::move(entry));
  }
  const auto scores = metrics::score_all(corpus);
  std::cout << "BLEU-4 " << scores.bleu4 << "\nROUGE-L " << scores.rouge_l
            << "\nCIDEr " << scores.cider << "\n";
  return 0;
}

}  // namespace

int run(std::vector<std::string> args) {
  CLI::App app{"multimodal prompt learning for few-shot product title generation"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir, init_ckpt, phase_str, settings_csv = "base,a,b,c,d,mpl";
  std::string split = "test", score_input;
  uint64_t seed = 0;
  double fewshot = -1.0;
  int beam = 0;
  bool assert_ordering = false;
  bool seed_set = false, out_set = false, init_set = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--seed", seed, "master seed")->each([&](const std::string&) {
      seed_set = true;
    });
    cmd->add_option("--out", out_dir, "output directory")->each([&](const std::string&) {
      out_set = true;
    });
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus and splits");
  add_common(gen);

  auto* tr = app.add_subcommand("train", "train one phase or the full pipeline");
  add_common(tr);
  tr->add_option("--phase", phase_str, "upt, mpt, or mpl");
  tr->add_option("--fewshot", fewshot, "few-shot fraction of the train split");
  tr->add_option("--init", init_ckpt, "checkpoint to continue from")
      ->each([&](const std::string&) { init_set = true; });

  auto* ev = app.add_subcommand("eval", "generate titles for a split and score them");
  add_common(ev);
  ev->add_option("--init", init_ckpt, "checkpoint to evaluate")
      ->each([&](const std::string&) { init_set = true; });
  ev->add_option("--beam", beam, "beam size for generation");
  ev->add_option("--split", split, "train, val, or test");

  auto* ab = app.add_subcommand("ablate", "run the ablation ladder");
  add_common(ab);
  ab->add_option("--settings", settings_csv, "comma-separated subset of settings");
  ab->add_option("--fewshot", fewshot, "few-shot fraction of the train split");
  ab->add_flag("--assert-ordering", assert_ordering,
               "exit nonzero unless mpl beats base on CIDEr");

  auto* da = app.add_subcommand("dump-attention",
                                "export the nine alignment weight matrices");
  add_common(da);
  da->add_option("--init", init_ckpt, "checkpoint holding the prompt banks")
      ->each([&](const std::string&) { init_set = true; });

  auto* sc = app.add_subcommand("score", "score a candidate/reference file");
  sc->add_option("file", score_input, "candidate<TAB>ref [ ||| ref ]* lines")
      ->required();

  std::vector<const char*> argv;
  argv.push_back("mpl");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = RunConfig::from_file(config_path);
    if (seed_set) {
      cfg.train.seed = seed;
      cfg.corpus.seed = seed;
    }
    if (out_set) cfg.paths.out_dir = out_dir;
    if (init_set) cfg.paths.init_checkpoint = init_ckpt;
    if (fewshot > 0.0) cfg.train.fewshot_fraction = fewshot;
    if (beam > 0) cfg.train.eval_beam = beam;
    const std::string mode = phase_str.empty() ? "mpl" : phase_str;
    if (mode != "upt" && mode != "mpt" && mode != "mpl") {
      throw UsageError("--phase must be upt, mpt, or mpl");
    }

    if (app.got_subcommand(gen)) {
      if (out_set) cfg.paths.data_dir = out_dir;  // gen-data writes the dataset
      return cmd_gen_data(std::move(cfg));
    }
    if (app.got_subcommand(tr)) return cmd_train(std::move(cfg), mode);
    if (app.got_subcommand(ev)) return cmd_eval(std::move(cfg), split);
    if (app.got_subcommand(ab)) return cmd_ablate(std::move(cfg), settings_csv, assert_ordering);
    if (app.got_subcommand(da)) return cmd_dump_attention(std::move(cfg));
    if (app.got_subcommand(sc)) return cmd_score(score_input);
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mpl::cli
