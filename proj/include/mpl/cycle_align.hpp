// SPDX-License-Identifier: Apache-2.0
//
// Cycle alignment: each prompt bank queries every bank (itself included),
// giving nine parameter-free attention retrievals whose concatenation forms
// the aligned prompt set.

#pragma once

#include <array>
#include <string>
#include <vector>

#include "mpl/prompts.hpp"
#include "mpl/tensor.hpp"

namespace mpl::cycle {

// Fixed, I-major block order; checkpointed attention dumps rely on it.
inline const std::array<const char*, 9>& block_labels() {
  static const std::array<const char*, 9> labels = {
      "I->I", "I->A", "I->T", "A->A", "A->I", "A->T", "T->T", "T->I", "T->A"};
  return labels;
}

template <typename T>
struct AlignedPromptSetT {
  std::vector<num::TensorT<T>> blocks;  // nine n_prompts x d retrievals
  num::TensorT<T> fused;                // their concatenation, 9*n_prompts x d
};

using AlignedPromptSet = AlignedPromptSetT<float>;

// softmax(query . key^T * scale) . key. Parameter-free; the raw product is
// used unless a scale is configured.
template <typename T>
num::TensorT<T> retrieve(const num::TensorT<T>& query, const num::TensorT<T>& key,
                         T scale = T(1)) {
  if (query.shape() != key.shape()) {
    throw ShapeError("retrieve: query " + num::shape_str(query.shape()) +
                     " vs key " + num::shape_str(key.shape()));
  }
  auto scores = num::matmul(query, num::transpose(key));
  if (scale != T(1)) scores = num::scale(scores, scale);
  return num::matmul(num::softmax_rows(scores), key);
}

// Attention weights of one retrieval, for inspection dumps.
template <typename T>
num::TensorT<T> retrieval_weights(const num::TensorT<T>& query,
                                  const num::TensorT<T>& key, T scale = T(1)) {
  auto scores = num::matmul(query, num::transpose(key));
  if (scale != T(1)) scores = num::scale(scores, scale);
  return num::softmax_rows(scores);
}

template <typename T>
AlignedPromptSetT<T> cycle_align(const prompts::BankT<T>& bank, T scale = T(1)) {
  const auto& I = bank.visual;
  const auto& A = bank.attribute;
  const auto& L = bank.language;
  AlignedPromptSetT<T> out;
  out.blocks = {retrieve(I, I, scale), retrieve(I, A, scale), retrieve(I, L, scale),
                retrieve(A, A, scale), retrieve(A, I, scale), retrieve(A, L, scale),
                retrieve(L, L, scale), retrieve(L, I, scale), retrieve(L, A, scale)};
  out.fused = num::concat_rows(out.blocks);
  return out;
}

// The nine attention-weight matrices in block order.
template <typename T>
std::vector<num::TensorT<T>> alignment_weights(const prompts::BankT<T>& bank,
                                               T scale = T(1)) {
  const auto& I = bank.visual;
  const auto& A = bank.attribute;
  const auto& L = bank.language;
  return {retrieval_weights(I, I, scale), retrieval_weights(I, A, scale),
          retrieval_weights(I, L, scale), retrieval_weights(A, A, scale),
          retrieval_weights(A, I, scale), retrieval_weights(A, L, scale),
          retrieval_weights(L, L, scale), retrieval_weights(L, I, scale),
          retrieval_weights(L, A, scale)};
}

}  // namespace mpl::cycle
