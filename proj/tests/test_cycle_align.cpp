// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mpl/cycle_align.hpp"
#include "oracles.hpp"

using namespace mpl;
using model::ModelConfig;
using num::Tensor;
using num::Tensor64;

namespace {

prompts::PromptBank random_bank(int n, int d, uint64_t seed) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.n_prompts = n;
  cfg.d = d;
  cfg.n_heads = 1;
  cfg.vocab_size = 8;
  return prompts::bank_init(cfg, seed);
}

}  // namespace

TEST_CASE("retrieve: rank-one key collapses every output row to it") {
  auto key_row = std::vector<float>{0.3f, -1.2f, 0.8f, 2.0f};
  std::vector<float> key_data;
  for (int i = 0; i < 3; ++i)
    key_data.insert(key_data.end(), key_row.begin(), key_row.end());
  auto key = Tensor::from_data({3, 4}, key_data);
  Rng rng(5);
  auto query = num::random_uniform<float>({3, 4}, -2.0f, 2.0f, rng);
  auto out = cycle::retrieve(query, key);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(out.at(i, j) == doctest::Approx(key_row[j]).epsilon(1e-6));
}

TEST_CASE("retrieve: scaled orthonormal rows attend to themselves") {
  // Orthogonal +-axis rows scaled by 100: softmax saturates on the diagonal.
  std::vector<float> rows(4 * 4, 0.0f);
  for (int i = 0; i < 4; ++i) rows[i * 4 + i] = 100.0f;
  auto bank = Tensor::from_data({4, 4}, rows);
  auto out = cycle::retrieve(bank, bank);
  double max_dev = 0.0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      max_dev = std::max(max_dev, static_cast<double>(std::abs(out.at(i, j) - bank.at(i, j))));
  CHECK(max_dev < 1e-3);
}

TEST_CASE("retrieve matches the explicit softmax-then-matmul oracle") {
  Rng rng(11);
  std::vector<double> qd(4 * 8), kd(4 * 8);
  for (auto& v : qd) v = rng.uniform(-1.5, 1.5);
  for (auto& v : kd) v = rng.uniform(-1.5, 1.5);
  auto q = Tensor64::from_data({4, 8}, qd);
  auto k = Tensor64::from_data({4, 8}, kd);
  auto got = cycle::retrieve(q, k);

  // Scores, row softmax, then product, all at 64-bit.
  auto scores = oracle::matmul_ref(qd, [&] {
    std::vector<double> kt(8 * 4);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 8; ++j) kt[j * 4 + i] = kd[i * 8 + j];
    return kt;
  }(), 4, 8, 4);
  std::vector<double> weights(4 * 4);
  for (int i = 0; i < 4; ++i) {
    std::span<const double> row(scores.data() + i * 4, 4);
    auto sm = oracle::softmax_ref(row);
    std::copy(sm.begin(), sm.end(), weights.begin() + i * 4);
  }
  auto expect = oracle::matmul_ref(weights, kd, 4, 4, 8);
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK(got.data()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
}

TEST_CASE("retrieve shape mismatch") {
  auto q = Tensor::zeros({3, 4});
  auto k = Tensor::zeros({4, 4});
  CHECK_THROWS_AS(cycle::retrieve(q, k), ShapeError);
}

TEST_CASE("cycle_align: degenerate equal banks give nine identical blocks") {
  auto bank = random_bank(4, 8, 3);
  bank.attribute = bank.visual.detached_copy();
  bank.language = bank.visual.detached_copy();
  const auto aligned = cycle::cycle_align(bank);
  REQUIRE(aligned.blocks.size() == 9);
  for (const auto& block : aligned.blocks) {
    for (size_t i = 0; i < block.size(); ++i)
      CHECK(block.data()[i] == aligned.blocks[0].data()[i]);
  }
}

TEST_CASE("cycle_align: fused shape and block order") {
  auto bank = random_bank(8, 64, 9);
  const auto aligned = cycle::cycle_align(bank);
  CHECK(aligned.fused.rows() == 72);
  CHECK(aligned.fused.cols() == 64);
  REQUIRE(cycle::block_labels().size() == 9);
  CHECK(std::string(cycle::block_labels()[0]) == "I->I");
  CHECK(std::string(cycle::block_labels()[4]) == "A->I");
  CHECK(std::string(cycle::block_labels()[8]) == "T->A");
  // Fused rows equal the blocks in declared order.
  int row = 0;
  for (const auto& block : aligned.blocks) {
    for (int i = 0; i < block.rows(); ++i, ++row)
      for (int j = 0; j < block.cols(); ++j)
        CHECK(aligned.fused.at(row, j) == block.at(i, j));
  }
}

TEST_CASE("every output row lies in the convex hull envelope of key rows") {
  for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    auto bank = random_bank(5, 12, seed);
    const auto aligned = cycle::cycle_align(bank);
    const std::array<const Tensor*, 9> keys = {
        &bank.visual, &bank.attribute, &bank.language,
        &bank.attribute, &bank.visual, &bank.language,
        &bank.language, &bank.visual, &bank.attribute};
    for (int b = 0; b < 9; ++b) {
      const auto& key = *keys[b];
      for (int j = 0; j < key.cols(); ++j) {
        float lo = key.at(0, j), hi = key.at(0, j);
        for (int i = 1; i < key.rows(); ++i) {
          lo = std::min(lo, key.at(i, j));
          hi = std::max(hi, key.at(i, j));
        }
        for (int i = 0; i < aligned.blocks[b].rows(); ++i) {
          CHECK(aligned.blocks[b].at(i, j) >= lo - 1e-5f);
          CHECK(aligned.blocks[b].at(i, j) <= hi + 1e-5f);
        }
      }
    }
  }
}

TEST_CASE("alignment weights are row-stochastic") {
  auto bank = random_bank(6, 10, 21);
  for (const auto& w : cycle::alignment_weights(bank)) {
    REQUIRE(w.rows() == 6);
    REQUIRE(w.cols() == 6);
    for (int i = 0; i < w.rows(); ++i) {
      float sum = 0.0f;
      for (int j = 0; j < w.cols(); ++j) {
        CHECK(w.at(i, j) >= 0.0f);
        sum += w.at(i, j);
      }
      CHECK(sum == doctest::Approx(1.0f).epsilon(1e-6));
    }
  }
}

TEST_CASE("cycle_align is deterministic and parameter-free") {
  auto bank = random_bank(4, 8, 31);
  const auto a = cycle::cycle_align(bank);
  const auto b = cycle::cycle_align(bank);
  for (size_t i = 0; i < a.fused.size(); ++i)
    CHECK(a.fused.data()[i] == b.fused.data()[i]);
}

TEST_CASE("gradients flow through cycle_align to all three banks") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.n_prompts = 2;
  cfg.d = 4;
  cfg.vocab_size = 8;
  auto bank = prompts::bank_init<double>(cfg, 77);
  Rng rng(78);
  auto target = num::random_uniform<double>({18, 4}, -1.0, 1.0, rng);

  auto make_loss = [&] {
    auto fused = cycle::cycle_align(bank).fused;
    auto diff = num::sub(fused, target);
    return num::sum_all(num::mul(diff, diff));
  };
  auto res = oracle::finite_diff_check(
      {&bank.visual, &bank.attribute, &bank.language}, make_loss);
  CHECK(res.max_rel_err < 1e-4);
  CHECK(res.checked == 3 * bank.visual.size());
}

TEST_CASE("optional scale knob defaults to the raw product") {
  ModelConfig cfg;
  CHECK(cfg.align_scale == doctest::Approx(1.0f));
  auto bank = random_bank(3, 6, 41);
  auto raw = cycle::retrieve(bank.visual, bank.attribute);
  auto scaled = cycle::retrieve(bank.visual, bank.attribute, 0.5f);
  bool differs = false;
  for (size_t i = 0; i < raw.size(); ++i) differs |= raw.data()[i] != scaled.data()[i];
  CHECK(differs);
}
