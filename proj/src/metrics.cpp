// SPDX-License-Identifier: Apache-2.0
#include "mpl/metrics.hpp"

#include <array>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <unordered_map>
#include <unordered_set>

#include "mpl/error.hpp"

namespace mpl::metrics {

namespace {

constexpr int kMaxOrder = 4;
constexpr double kRougeBetaSq = 1.2;
constexpr double kCiderSigma = 6.0;

void require_nonempty(const EvalCorpus& corpus, const char* metric) {
  if (corpus.empty()) {
    throw ContractError(std::string(metric) + ": empty corpus");
  }
  for (const auto& e : corpus) {
    if (e.references.empty()) {
      throw ContractError(std::string(metric) + ": entry without references");
    }
  }
}

// n-grams are keyed by joining tokens with an unlikely separator byte.
std::unordered_map<std::string, int> ngram_counts(const TokenSeq& toks, int n) {
  std::unordered_map<std::string, int> counts;
  if (static_cast<int>(toks.size()) < n) return counts;
  for (size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key = toks[i];
    for (int j = 1; j < n; ++j) {
      key += '\x1f';
      key += toks[i + j];
    }
    ++counts[key];
  }
  return counts;
}

size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  const size_t m = a.size(), n = b.size();
  std::vector<size_t> prev(n + 1, 0), cur(n + 1, 0);
  for (size_t i = 1; i <= m; ++i) {
    for (size_t j = 1; j <= n; ++j) {
      cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1
                                      : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

}  // namespace

TokenSeq tokenize(const std::string& text) {
  TokenSeq out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else {
      if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

double bleu4(const EvalCorpus& corpus) {
  require_nonempty(corpus, "bleu4");
  std::array<long long, kMaxOrder> matched{};
  std::array<long long, kMaxOrder> total{};
  long long cand_len = 0, ref_len = 0;

  for (const auto& entry : corpus) {
    cand_len += static_cast<long long>(entry.candidate.size());
    // Effective reference length: closest to the candidate, ties toward
    // the shorter reference.
    long long best_ref = static_cast<long long>(entry.references[0].size());
    for (const auto& ref : entry.references) {
      const long long rl = static_cast<long long>(ref.size());
      const long long c = static_cast<long long>(entry.candidate.size());
      if (std::llabs(rl - c) < std::llabs(best_ref - c) ||
          (std::llabs(rl - c) == std::llabs(best_ref - c) && rl < best_ref)) {
        best_ref = rl;
      }
    }
    ref_len += best_ref;

    for (int n = 1; n <= kMaxOrder; ++n) {
      std::unordered_map<std::string, int> max_ref_counts;
      for (const auto& ref : entry.references) {
        for (const auto& [g, c] : ngram_counts(ref, n)) {
          auto& slot = max_ref_counts[g];
          slot = std::max(slot, c);
        }
      }
      for (const auto& [g, c] : ngram_counts(entry.candidate, n)) {
        total[n - 1] += c;
        auto it = max_ref_counts.find(g);
        if (it != max_ref_counts.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }

  if (cand_len == 0) return 0.0;
  double log_precision = 0.0;
  for (int n = 0; n < kMaxOrder; ++n) {
    if (matched[n] == 0 || total[n] == 0) return 0.0;  // no smoothing
    log_precision += 0.25 * std::log(static_cast<double>(matched[n]) /
                                     static_cast<double>(total[n]));
  }
  const double bp = cand_len >= ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref_len) /
                                             static_cast<double>(cand_len));
  return 100.0 * bp * std::exp(log_precision);
}

double rouge_l(const EvalCorpus& corpus) {
  require_nonempty(corpus, "rouge_l");
  double sum_f = 0.0;
  for (const auto& entry : corpus) {
    double best_f = 0.0;
    for (const auto& ref : entry.references) {
      if (entry.candidate.empty() || ref.empty()) continue;
      const double lcs = static_cast<double>(lcs_length(entry.candidate, ref));
      if (lcs == 0.0) continue;
      const double prec = lcs / static_cast<double>(entry.candidate.size());
      const double rec = lcs / static_cast<double>(ref.size());
      const double f =
          (1.0 + kRougeBetaSq) * prec * rec / (rec + kRougeBetaSq * prec);
      best_f = std::max(best_f, f);
    }
    sum_f += best_f;
  }
  return 100.0 * sum_f / static_cast<double>(corpus.size());
}

namespace {

// Per-order tf-idf vector plus its norm and the sentence length.
struct CiderVec {
  std::array<std::unordered_map<std::string, double>, kMaxOrder> weights;
  std::array<double, kMaxOrder> norm{};
  double length = 0.0;
};

CiderVec cider_vec(const TokenSeq& toks,
                   const std::unordered_map<std::string, int>& doc_freq,
                   double log_num_docs) {
  CiderVec v;
  v.length = static_cast<double>(toks.size());
  for (int n = 1; n <= kMaxOrder; ++n) {
    for (const auto& [g, c] : ngram_counts(toks, n)) {
      auto it = doc_freq.find(g);
      const double df = it == doc_freq.end() ? 0.0 : static_cast<double>(it->second);
      const double idf = log_num_docs - std::log(std::max(1.0, df));
      const double w = static_cast<double>(c) * idf;
      v.weights[n - 1][g] = w;
      v.norm[n - 1] += w * w;
    }
    v.norm[n - 1] = std::sqrt(v.norm[n - 1]);
  }
  return v;
}

}  // namespace

double cider(const EvalCorpus& corpus) {
  require_nonempty(corpus, "cider");
  if (corpus.size() < 2) {
    throw ContractError(
        "cider: a single-entry corpus has degenerate idf; score the pooled "
        "validation corpus instead");
  }

  // Document frequency over reference sets: one count per entry whose
  // references contain the n-gram.
  std::unordered_map<std::string, int> doc_freq;
  for (const auto& entry : corpus) {
    std::unordered_set<std::string> seen;
    for (const auto& ref : entry.references) {
      for (int n = 1; n <= kMaxOrder; ++n) {
        for (const auto& [g, c] : ngram_counts(ref, n)) seen.insert(g);
      }
    }
    for (const auto& g : seen) ++doc_freq[g];
  }
  const double log_num_docs = std::log(static_cast<double>(corpus.size()));

  double total = 0.0;
  for (const auto& entry : corpus) {
    const CiderVec cv = cider_vec(entry.candidate, doc_freq, log_num_docs);
    std::array<double, kMaxOrder> acc{};
    for (const auto& ref : entry.references) {
      const CiderVec rv = cider_vec(ref, doc_freq, log_num_docs);
      const double delta = cv.length - rv.length;
      const double penalty =
          std::exp(-delta * delta / (2.0 * kCiderSigma * kCiderSigma));
      for (int n = 0; n < kMaxOrder; ++n) {
        double dot = 0.0;
        for (const auto& [g, w] : cv.weights[n]) {
          auto it = rv.weights[n].find(g);
          if (it == rv.weights[n].end()) continue;
          dot += std::min(w, it->second) * it->second;  // count clipping
        }
        if (cv.norm[n] > 0.0 && rv.norm[n] > 0.0) {
          acc[n] += penalty * dot / (cv.norm[n] * rv.norm[n]);
        }
      }
    }
    double entry_score = 0.0;
    for (int n = 0; n < kMaxOrder; ++n) entry_score += acc[n];
    entry_score /= kMaxOrder;  // mean over orders
    entry_score /= static_cast<double>(entry.references.size());
    total += 10.0 * entry_score;
  }
  return total / static_cast<double>(corpus.size());
}

Scores score_all(const EvalCorpus& corpus) {
  return Scores{bleu4(corpus), rouge_l(corpus), cider(corpus)};
}

}  // namespace mpl::metrics
