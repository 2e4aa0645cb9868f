// SPDX-License-Identifier: Apache-2.0
//
// Corpus-level generation metrics implemented from their original
// definitions: BLEU-4 (modified n-gram precision, geometric mean, brevity
// penalty, no smoothing), ROUGE-L (LCS F-measure), and CIDEr-D (tf-idf
// n-gram cosine with gaussian length penalty and count clipping).

#pragma once

#include <string>
#include <vector>

namespace mpl::metrics {

using TokenSeq = std::vector<std::string>;

struct EvalEntry {
  TokenSeq candidate;
  std::vector<TokenSeq> references;  // at least one
};

using EvalCorpus = std::vector<EvalEntry>;

struct Scores {
  double bleu4 = 0.0;    // 0..100
  double rouge_l = 0.0;  // 0..100
  double cider = 0.0;    // >= 0, x10 scale
};

// Metric tokenization, identical to the training tokenizer: lowercase,
// punctuation stripped, whitespace split.
TokenSeq tokenize(const std::string& text);

double bleu4(const EvalCorpus& corpus);
double rouge_l(const EvalCorpus& corpus);
double cider(const EvalCorpus& corpus);

Scores score_all(const EvalCorpus& corpus);

}  // namespace mpl::metrics
