// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "mpl/model.hpp"
#include "mpl/rng.hpp"
#include "mpl/tensor.hpp"

namespace mpl::prompts {

// The three trainable soft-prompt banks, one per modality. Trainable during
// unimodal prompt training, frozen afterwards.
template <typename T>
struct BankT {
  num::TensorT<T> visual;     // P_I
  num::TensorT<T> attribute;  // P_A
  num::TensorT<T> language;   // P_T

  void set_requires_grad(bool v) {
    visual.set_requires_grad(v);
    attribute.set_requires_grad(v);
    language.set_requires_grad(v);
  }

  BankT detached_copy() const {
    return BankT{visual.detached_copy(), attribute.detached_copy(),
                 language.detached_copy()};
  }
};

using PromptBank = BankT<float>;

// Three independently initialized n_prompts x d banks, N(0, 0.02).
template <typename T>
BankT<T> bank_init(const model::ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  BankT<T> bank;
  Rng ri(derive_seed(seed, 0x70492031ull));
  Rng ra(derive_seed(seed, 0x70492032ull));
  Rng rt(derive_seed(seed, 0x70492033ull));
  bank.visual = num::random_normal<T>({cfg.n_prompts, cfg.d}, T(0), T(0.02), ri, true);
  bank.attribute = num::random_normal<T>({cfg.n_prompts, cfg.d}, T(0), T(0.02), ra, true);
  bank.language = num::random_normal<T>({cfg.n_prompts, cfg.d}, T(0), T(0.02), rt, true);
  return bank;
}

inline PromptBank bank_init(const model::ModelConfig& cfg, uint64_t seed) {
  return bank_init<float>(cfg, seed);
}

// [P; R]: prompt rows first, then the representation. An empty bank
// (0 rows) passes R through unchanged.
template <typename T>
num::TensorT<T> concat_prompt(const num::TensorT<T>& prompt,
                              const num::TensorT<T>& repr) {
  if (prompt.rows() == 0) return repr;
  if (prompt.cols() != repr.cols()) {
    throw ShapeError("concat_prompt: width mismatch " + num::shape_str(prompt.shape()) +
                     " vs " + num::shape_str(repr.shape()));
  }
  return num::concat_rows(prompt, repr);
}

}  // namespace mpl::prompts
