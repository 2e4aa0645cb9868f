// SPDX-License-Identifier: Apache-2.0
//
// Synthetic product corpus: latent factors (category, brand, color,
// material, size) rendered into attributes, templated titles, and factor
// embeddings standing in for image features. Two disjoint domains with
// different title styles support the novel-category protocol.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mpl/tensor.hpp"
#include "mpl/tokens.hpp"

namespace mpl::data {

struct ProductRecord {
  std::string id;
  num::Tensor image_features;             // [image_seq_len x image_feature_dim]
  std::vector<std::string> attributes;    // "key:value" strings
  std::string title;
};

enum class Domain { pretrain, novel };

struct CorpusSpec {
  int num_products = 1000;
  int num_categories = 4;
  // Attribute vocabulary sizes per slot.
  int num_brands = 10;
  int num_colors = 8;
  int num_materials = 6;
  int num_sizes = 4;
  int image_feature_dim = 32;
  int image_seq_len = 5;  // one row per latent factor
  double noise = 0.1;     // stddev of gaussian noise on image features
  // Chance that a non-category factor is exposed as an attribute. The title
  // always renders every factor, so hidden factors must be read off the
  // image features.
  double expose_brand = 0.9;
  double expose_color = 0.55;
  double expose_material = 0.55;
  double expose_size = 0.55;
  Domain domain = Domain::novel;
  uint64_t seed = 0;

  void validate() const;
};

class Vocabulary {
 public:
  Vocabulary();

  // Non-reserved tokens, ordered by frequency (desc) then lexicographically.
  void add_tokens(const std::vector<std::pair<std::string, int64_t>>& ordered);

  int size() const { return static_cast<int>(id_to_token_.size()); }
  int id_of(const std::string& token) const;  // kUnkId when absent
  const std::string& token_of(int id) const;
  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  // Surface tokens, reserved ids skipped except unk.
  std::vector<std::string> decode(const std::vector<int>& ids) const;

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

std::vector<ProductRecord> generate_corpus(const CorpusSpec& spec);

Vocabulary build_vocab(const std::vector<ProductRecord>& records);

struct Splits {
  std::vector<ProductRecord> train;
  std::vector<ProductRecord> validation;
  std::vector<ProductRecord> test;
};

// Disjoint product-level partition with largest-remainder rounding.
Splits split(const std::vector<ProductRecord>& records,
             const std::array<double, 3>& ratios, uint64_t seed);

// Uniform sample of ceil(fraction * n) indices in ascending order; the
// selection shared by every few-shot consumer.
std::vector<size_t> fewshot_indices(size_t n, double fraction, uint64_t seed);

// Uniform sample of ceil(fraction * |train|) records, original order kept.
std::vector<ProductRecord> subsample_fewshot(const std::vector<ProductRecord>& train,
                                             double fraction, uint64_t seed);

// Tokenization used everywhere: attributes as alternating key/value tokens,
// titles through the metric tokenizer.
std::vector<std::string> attribute_tokens(const ProductRecord& rec);
std::vector<std::string> title_tokens(const ProductRecord& rec);

// JSONL dataset files with a format-version header line.
void save_records(const std::string& path, const std::vector<ProductRecord>& records);
std::vector<ProductRecord> load_records(const std::string& path);

}  // namespace mpl::data
