// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mpl/prompts.hpp"
#include "oracles.hpp"

using namespace mpl;
using model::ModelConfig;
using num::Tensor;
using num::Tensor64;

TEST_CASE("bank_init shapes follow the config") {
  ModelConfig paper;
  paper.vocab_size = 10;
  const auto bank = prompts::bank_init(paper, 1);
  CHECK(bank.visual.rows() == 16);
  CHECK(bank.visual.cols() == 512);
  CHECK(bank.attribute.rows() == 16);
  CHECK(bank.language.cols() == 512);

  ModelConfig desk = ModelConfig::desk();
  desk.vocab_size = 10;
  const auto db = prompts::bank_init(desk, 1);
  CHECK(db.visual.rows() == 8);
  CHECK(db.visual.cols() == 64);
}

TEST_CASE("bank_init is deterministic and per-bank independent") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.vocab_size = 10;
  const auto a = prompts::bank_init(cfg, 42);
  const auto b = prompts::bank_init(cfg, 42);
  for (size_t i = 0; i < a.visual.size(); ++i) {
    CHECK(a.visual.data()[i] == b.visual.data()[i]);
    CHECK(a.attribute.data()[i] == b.attribute.data()[i]);
    CHECK(a.language.data()[i] == b.language.data()[i]);
  }
  bool same = true;
  for (size_t i = 0; i < a.visual.size(); ++i)
    same &= a.visual.data()[i] == a.attribute.data()[i];
  CHECK_FALSE(same);

  const auto c = prompts::bank_init(cfg, 43);
  bool differs = false;
  for (size_t i = 0; i < a.visual.size(); ++i)
    differs |= a.visual.data()[i] != c.visual.data()[i];
  CHECK(differs);
}

TEST_CASE("concat_prompt: prompts first, grads to both sides") {
  auto p = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto r = Tensor::from_data({1, 3}, {7, 8, 9}, true);
  auto cat = prompts::concat_prompt(p, r);
  REQUIRE(cat.rows() == 3);
  REQUIRE(cat.cols() == 3);
  // First n_prompts rows are the prompt bank itself.
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) CHECK(cat.at(i, j) == p.at(i, j));
  for (int j = 0; j < 3; ++j) CHECK(cat.at(2, j) == r.at(0, j));

  num::sum_all(cat).backward();
  for (float g : p.grad()) CHECK(g == doctest::Approx(1.0f));
  for (float g : r.grad()) CHECK(g == doctest::Approx(1.0f));
}

TEST_CASE("concat_prompt: empty bank passes the representation through") {
  auto p = Tensor::zeros({0, 3});
  auto r = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto cat = prompts::concat_prompt(p, r);
  CHECK(cat.node() == r.node());
}

TEST_CASE("concat_prompt: width mismatch") {
  auto p = Tensor::zeros({2, 3});
  auto r = Tensor::zeros({2, 4});
  CHECK_THROWS_AS(prompts::concat_prompt(p, r), ShapeError);
}

TEST_CASE("concat_prompt shape contract (8x64 + 5x64)") {
  auto p = Tensor::zeros({8, 64});
  auto r = Tensor::zeros({5, 64});
  auto cat = prompts::concat_prompt(p, r);
  CHECK(cat.rows() == 13);
  CHECK(cat.cols() == 64);
}

TEST_CASE("phase flag toggles trainability") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.vocab_size = 10;
  auto bank = prompts::bank_init(cfg, 7);
  CHECK(bank.visual.requires_grad());
  bank.set_requires_grad(false);
  CHECK_FALSE(bank.visual.requires_grad());
  CHECK_FALSE(bank.attribute.requires_grad());
  CHECK_FALSE(bank.language.requires_grad());
}
