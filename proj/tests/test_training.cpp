// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mpl/training.hpp"
#include "oracles.hpp"

using namespace mpl;
using model::ModelConfig;
using train::Phase;
using train::Setting;
using train::TrainConfig;

namespace {

ModelConfig tiny_config(int vocab) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.d = 16;
  cfg.n_heads = 2;
  cfg.n_enc_layers = 1;
  cfg.n_dec_layers = 1;
  cfg.ffn_width = 24;
  cfg.vocab_size = vocab;
  cfg.max_title_len = 16;
  cfg.image_feature_dim = 32;
  cfg.n_prompts = 2;
  return cfg;
}

struct Fixture {
  ModelConfig cfg;
  train::EncodedDataset dataset;
};

Fixture make_fixture(int num_products = 24, uint64_t seed = 5) {
  data::CorpusSpec spec;
  spec.num_products = num_products;
  spec.num_categories = 2;
  spec.seed = seed;
  const auto records = data::generate_corpus(spec);
  const auto splits = data::split(records, {0.7, 0.2, 0.1}, seed);
  Fixture f;
  f.dataset.vocab = data::build_vocab(splits.train);
  f.cfg = tiny_config(f.dataset.vocab.size());
  f.dataset.train = train::encode_records(splits.train, f.dataset.vocab, f.cfg);
  f.dataset.validation =
      train::encode_records(splits.validation, f.dataset.vocab, f.cfg);
  f.dataset.test = train::encode_records(splits.test, f.dataset.vocab, f.cfg);
  return f;
}

TrainConfig fast_train_config() {
  TrainConfig t;
  t.batch_size = 4;
  t.learning_rate = 1e-3f;
  t.max_epochs = 2;
  t.patience = 5;
  t.seed = 11;
  t.fewshot_fraction = 1.0;
  t.val_max_records = 4;
  return t;
}

}  // namespace

TEST_CASE("config defaults and validation") {
  TrainConfig t;
  CHECK(t.lambda1 == 1.0f);
  CHECK(t.lambda2 == 1.0f);
  CHECK(t.lambda3 == 1.0f);
  CHECK(t.fewshot_fraction == 0.01);
  CHECK(t.batch_size == 8);
  CHECK(t.eval_beam == 3);
  CHECK(t.freeze_prompts_in_mpt);
  CHECK_NOTHROW(t.validate());

  t.lambda2 = 1.5f;
  CHECK_THROWS_AS(t.validate(), ContractError);
  t = TrainConfig{};
  t.patience = 0;
  CHECK_THROWS_AS(t.validate(), ContractError);
  t = TrainConfig{};
  t.fewshot_fraction = 0.0;
  CHECK_THROWS_AS(t.validate(), ContractError);

  CHECK(train::phase_from_string("upt") == Phase::upt);
  CHECK(train::setting_from_string("d") == Setting::d);
  CHECK_THROWS_AS(train::setting_from_string("zz"), ContractError);
}

TEST_CASE("per-setting lambda masks and prompt parameter counts") {
  TrainConfig t;
  t.lambda1 = 0.8f;
  CHECK(train::effective_lambdas(Setting::base, t) == std::array<float, 3>{0, 0, 0});
  CHECK(train::effective_lambdas(Setting::a, t) == std::array<float, 3>{0.8f, 0, 0});
  CHECK(train::effective_lambdas(Setting::b, t) == std::array<float, 3>{0, 1, 0});
  CHECK(train::effective_lambdas(Setting::c, t) == std::array<float, 3>{0, 0, 1});
  CHECK(train::effective_lambdas(Setting::mpl, t) ==
        std::array<float, 3>{0.8f, 1, 1});

  const auto cfg = tiny_config(32);
  CHECK(train::trainable_prompt_count(Setting::base, cfg) == 0);
  CHECK(train::trainable_prompt_count(Setting::c, cfg) == 2 * 16);
  CHECK(train::trainable_prompt_count(Setting::mpl, cfg) == 3 * 2 * 16);
}

TEST_CASE("upt loss decomposition and weight zeroing") {
  auto f = make_fixture();
  const auto params = model::init_params(f.cfg, 3);
  const auto bank = prompts::bank_init(f.cfg, 3);
  std::span<const train::EncodedRecord> batch(f.dataset.train.data(), 4);

  auto all = train::upt_losses<float>(batch, params, bank, f.cfg, {1, 1, 1});
  const float li = all.image.item(), la = all.attribute.item(), lt = all.title.item();
  CHECK(all.combined.item() ==
        doctest::Approx(li + la + lt).epsilon(1e-6));

  auto only_i = train::upt_losses<float>(batch, params, bank, f.cfg, {1, 0, 0});
  CHECK(only_i.combined.item() == only_i.image.item());
  CHECK(only_i.combined.item() == doctest::Approx(li).epsilon(1e-6));
  CHECK_FALSE(only_i.attribute.defined());
  CHECK_FALSE(only_i.title.defined());

  CHECK_THROWS_AS(
      train::upt_losses<float>(batch, params, bank, f.cfg, {0, 0, 0}),
      ContractError);
  std::span<const train::EncodedRecord> empty;
  CHECK_THROWS_AS(
      train::upt_losses<float>(empty, params, bank, f.cfg, {1, 1, 1}),
      ContractError);
}

TEST_CASE("one upt step decreases the recomputed batch loss (majority of seeds)") {
  auto f = make_fixture();
  std::span<const train::EncodedRecord> batch(f.dataset.train.data(), 4);
  int decreased = 0;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto params = model::init_params(f.cfg, 100 + seed);
    auto bank = prompts::bank_init(f.cfg, 100 + seed);
    TrainConfig t = fast_train_config();
    t.seed = seed;
    num::AdamW opt(num::AdamWConfig{1e-3f, 0.9f, 0.999f, 1e-8f, 0.01f});
    Rng rng(seed);

    const float before =
        train::upt_losses<float>(batch, params, bank, f.cfg, {1, 1, 1}).combined.item();
    train::upt_step(batch, params, bank, f.cfg, t, opt, rng);
    const float after =
        train::upt_losses<float>(batch, params, bank, f.cfg, {1, 1, 1}).combined.item();
    decreased += after < before;
  }
  CHECK(decreased > 10);
}

TEST_CASE("final-phase memory layouts per setting") {
  auto f = make_fixture();
  const auto bank = prompts::bank_init(f.cfg, 3);
  Rng rng(9);
  auto r_i = num::random_uniform<float>({5, f.cfg.d}, -1.0f, 1.0f, rng);
  auto r_a = num::random_uniform<float>({7, f.cfg.d}, -1.0f, 1.0f, rng);
  const int np = f.cfg.n_prompts;

  CHECK(train::final_memory(Setting::base, bank, r_i, r_a, 1.0f).rows() == 12);
  CHECK(train::final_memory(Setting::a, bank, r_i, r_a, 1.0f).rows() == np + 12);
  CHECK(train::final_memory(Setting::b, bank, r_i, r_a, 1.0f).rows() == np + 12);
  CHECK(train::final_memory(Setting::c, bank, r_i, r_a, 1.0f).rows() == np + 12);
  // Setting (d): all three banks verbatim, no aligned blocks.
  CHECK(train::final_memory(Setting::d, bank, r_i, r_a, 1.0f).rows() == 3 * np + 12);
  // Full framework: nine aligned blocks.
  CHECK(train::final_memory(Setting::mpl, bank, r_i, r_a, 1.0f).rows() == 9 * np + 12);

  // The (d) memory embeds the raw banks.
  auto mem_d = train::final_memory(Setting::d, bank, r_i, r_a, 1.0f);
  for (int i = 0; i < np; ++i)
    for (int j = 0; j < f.cfg.d; ++j) {
      CHECK(mem_d.at(i, j) == bank.visual.at(i, j));
      CHECK(mem_d.at(np + i, j) == bank.attribute.at(i, j));
      CHECK(mem_d.at(2 * np + i, j) == bank.language.at(i, j));
    }
}

TEST_CASE("mpt steps never touch the banks; upt moves all three") {
  auto f = make_fixture();
  auto params = model::init_params(f.cfg, 21);
  auto bank = prompts::bank_init(f.cfg, 21);
  const auto before = bank.detached_copy();
  std::span<const train::EncodedRecord> batch(f.dataset.train.data(), 4);
  TrainConfig t = fast_train_config();

  num::AdamW opt1(num::AdamWConfig{1e-3f});
  Rng rng(1);
  t.phase = Phase::mpt;
  for (int i = 0; i < 3; ++i)
    train::mpt_step(batch, params, bank, f.cfg, t, opt1, rng);
  for (size_t i = 0; i < bank.visual.size(); ++i) {
    CHECK(bank.visual.data()[i] == before.visual.data()[i]);
    CHECK(bank.attribute.data()[i] == before.attribute.data()[i]);
    CHECK(bank.language.data()[i] == before.language.data()[i]);
  }

  t.phase = Phase::upt;
  num::AdamW opt2(num::AdamWConfig{1e-3f});
  train::upt_step(batch, params, bank, f.cfg, t, opt2, rng);
  auto l2 = [](const num::Tensor& a, const num::Tensor& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      const double d = a.data()[i] - b.data()[i];
      s += d * d;
    }
    return std::sqrt(s);
  };
  CHECK(l2(bank.visual, before.visual) > 0.0);
  CHECK(l2(bank.attribute, before.attribute) > 0.0);
  CHECK(l2(bank.language, before.language) > 0.0);
}

TEST_CASE("mpt loss decreases over repeated steps on a fixed batch") {
  auto f = make_fixture();
  std::span<const train::EncodedRecord> batch(f.dataset.train.data(), 4);
  for (uint64_t seed : {1u, 2u, 3u}) {
    auto params = model::init_params(f.cfg, seed);
    auto bank = prompts::bank_init(f.cfg, seed);
    TrainConfig t = fast_train_config();
    t.phase = Phase::mpt;
    num::AdamW opt(num::AdamWConfig{1e-3f});
    Rng rng(seed);
    const float before =
        train::mpt_loss<float>(batch, params, bank, f.cfg, Setting::mpl).item();
    for (int i = 0; i < 20; ++i)
      train::mpt_step(batch, params, bank, f.cfg, t, opt, rng);
    const float after =
        train::mpt_loss<float>(batch, params, bank, f.cfg, Setting::mpl).item();
    CHECK(after < before);
  }
}

TEST_CASE("patience-1 with a frozen model stops after two epochs") {
  auto f = make_fixture();
  TrainConfig t = fast_train_config();
  t.learning_rate = 1e-12f;  // effectively frozen
  t.max_epochs = 10;
  t.patience = 1;
  t.phase = Phase::mpt;
  const auto res = train::train(t, f.cfg, f.dataset, model::init_params(f.cfg, 33),
                                prompts::bank_init(f.cfg, 33));
  CHECK(res.report.epochs.size() == 2);
  CHECK(res.report.best_epoch == 1);
}

TEST_CASE("training is deterministic and the best snapshot re-evaluates exactly") {
  auto f = make_fixture();
  TrainConfig t = fast_train_config();
  t.phase = Phase::mpt;
  t.max_epochs = 3;

  auto run = [&] {
    return train::train(t, f.cfg, f.dataset, model::init_params(f.cfg, 44),
                        prompts::bank_init(f.cfg, 44));
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.report.epochs.size() == b.report.epochs.size());
  for (size_t i = 0; i < a.report.epochs.size(); ++i) {
    CHECK(a.report.epochs[i].l_full == b.report.epochs[i].l_full);
    CHECK(a.report.epochs[i].val_scores.cider == b.report.epochs[i].val_scores.cider);
  }
  for (const auto& [name, tensor] : a.params.by_name) {
    const auto& other = b.params.at(name);
    for (size_t i = 0; i < tensor.size(); ++i)
      CHECK(tensor.data()[i] == other.data()[i]);
  }

  // Reported best CIDEr is the max over epochs and reproduces on re-eval.
  double max_cider = -1.0;
  for (const auto& e : a.report.epochs)
    if (e.validated) max_cider = std::max(max_cider, e.val_scores.cider);
  CHECK(a.report.best_val_cider == max_cider);

  std::span<const train::EncodedRecord> val_subset(
      f.dataset.validation.data(),
      std::min<size_t>(f.dataset.validation.size(), t.val_max_records));
  const auto examples = train::generate_for_records(
      val_subset, a.params, a.bank, f.cfg, t.setting, f.dataset.vocab, t.val_beam);
  CHECK(train::score_examples(examples).cider ==
        doctest::Approx(a.report.best_val_cider).epsilon(1e-12));
}

TEST_CASE("train rejects empty validation sets") {
  auto f = make_fixture();
  f.dataset.validation.clear();
  TrainConfig t = fast_train_config();
  CHECK_THROWS_AS(train::train(t, f.cfg, f.dataset, model::init_params(f.cfg, 1),
                               prompts::bank_init(f.cfg, 1)),
                  ContractError);
}

TEST_CASE("generated titles carry no reserved surface tokens") {
  auto f = make_fixture();
  const auto params = model::init_params(f.cfg, 55);
  const auto bank = prompts::bank_init(f.cfg, 55);
  const auto& rec = f.dataset.test.front();
  const auto title = train::generate_title(rec, params, bank, f.cfg, Setting::mpl,
                                           f.dataset.vocab, 3);
  CHECK(title.find("<pad>") == std::string::npos);
  CHECK(title.find("<bos>") == std::string::npos);
  CHECK(title.find("<eos>") == std::string::npos);
  const auto again = train::generate_title(rec, params, bank, f.cfg, Setting::mpl,
                                           f.dataset.vocab, 3);
  CHECK(title == again);
}

TEST_CASE("run_pipeline produces both phase traces and test metrics") {
  auto f = make_fixture(30);
  TrainConfig t = fast_train_config();
  t.max_epochs = 2;
  t.setting = Setting::mpl;
  const auto res = train::run_pipeline(t, f.cfg, f.dataset);
  REQUIRE(res.report.upt.has_value());
  CHECK(res.report.upt->phase == Phase::upt);
  CHECK(res.report.final_phase.phase == Phase::mpt);
  CHECK(!res.report.upt->epochs.empty());
  CHECK(!res.report.final_phase.epochs.empty());
  CHECK(res.report.fewshot_count == f.dataset.train.size());  // fraction = 1.0
  CHECK(std::isfinite(res.report.test_scores.cider));

  const auto json = train::pipeline_report_to_json(res.report);
  CHECK(json.find("\"upt\"") != std::string::npos);
  CHECK(json.find("\"test\"") != std::string::npos);

  // Base skips UPT entirely.
  TrainConfig tb = t;
  tb.setting = Setting::base;
  const auto base = train::run_pipeline(tb, f.cfg, f.dataset);
  CHECK_FALSE(base.report.upt.has_value());
}

TEST_CASE("fewshot fraction subsamples the train split") {
  auto f = make_fixture(40);
  TrainConfig t = fast_train_config();
  t.fewshot_fraction = 0.25;
  t.max_epochs = 1;
  t.setting = Setting::base;
  const auto res = train::run_pipeline(t, f.cfg, f.dataset);
  CHECK(res.report.fewshot_count ==
        static_cast<size_t>(std::ceil(0.25 * f.dataset.train.size())));
}

TEST_CASE("ablation rows and table formatting") {
  auto f = make_fixture(24);
  TrainConfig t = fast_train_config();
  t.max_epochs = 1;
  const auto rows =
      train::ablate(t, f.cfg, f.dataset, {Setting::base, Setting::mpl});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].setting == Setting::base);
  CHECK(rows[1].setting == Setting::mpl);

  const auto table = train::format_ablation_table(rows);
  CHECK(table.find("base") != std::string::npos);
  CHECK(table.find("mpl") != std::string::npos);
  CHECK(table.find("CIDEr") != std::string::npos);

  const auto json = train::ablation_to_json(rows);
  CHECK(json.find("\"setting\": \"base\"") != std::string::npos);
}

TEST_CASE("titles-only corpus feeds the auto-encoding pipeline") {
  auto f = make_fixture();
  // Borrow titles from the test split as an unlabeled text corpus.
  f.dataset.extra_titles = f.dataset.test;
  TrainConfig t = fast_train_config();
  t.phase = Phase::upt;
  t.max_epochs = 1;
  const auto res = train::train(t, f.cfg, f.dataset, model::init_params(f.cfg, 66),
                                prompts::bank_init(f.cfg, 66));
  CHECK(res.report.epochs.size() == 1);
  CHECK(std::isfinite(res.report.epochs[0].l_title));
  CHECK(res.report.epochs[0].l_title > 0.0f);
}

TEST_CASE("end-to-end upt and mpt losses pass finite differences") {
  // 2-layer, d = 16, two prompts per bank; double precision throughout.
  data::CorpusSpec spec;
  spec.num_products = 3;
  spec.num_categories = 2;
  spec.seed = 3;
  const auto records = data::generate_corpus(spec);
  const auto vocab = data::build_vocab(records);

  ModelConfig cfg = tiny_config(vocab.size());
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 2;
  cfg.dropout = 0.0f;
  auto params = model::init_params<double>(cfg, 7);
  auto bank = prompts::bank_init<double>(cfg, 7);
  const auto encoded = train::encode_records(records, vocab, cfg);
  std::span<const train::EncodedRecord> batch(encoded.data(), 2);

  std::vector<num::Tensor64*> leaves{&bank.visual, &bank.attribute, &bank.language};
  for (auto& [name, tensor] : params.by_name) leaves.push_back(&tensor);

  auto upt = oracle::finite_diff_check(
      leaves,
      [&] {
        return train::upt_losses<double>(batch, params, bank, cfg, {1, 1, 1}).combined;
      },
      1e-4, 4);
  CHECK(upt.max_rel_err < 1e-4);

  auto mpt = oracle::finite_diff_check(
      leaves,
      [&] { return train::mpt_loss<double>(batch, params, bank, cfg, Setting::mpl); },
      1e-4, 4);
  CHECK(mpt.max_rel_err < 1e-4);
}
