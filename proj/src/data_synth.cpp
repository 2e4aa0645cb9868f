// SPDX-License-Identifier: Apache-2.0
#include "mpl/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "mpl/error.hpp"
#include "mpl/metrics.hpp"
#include "mpl/rng.hpp"

namespace mpl::data {

namespace {

using ordered_json = nlohmann::ordered_json;

const std::vector<std::string> kPretrainCategories = {
    "lamp", "mug",   "chair",  "rug",   "clock",  "vase",
    "shelf", "stool", "kettle", "tray", "mirror", "basket"};
const std::vector<std::string> kNovelCategories = {
    "drone",   "headset",  "tent",      "scooter",  "blender", "easel",
    "hammock", "telescope", "keyboard", "speaker",  "tripod",  "projector"};
const std::vector<std::string> kBrands = {
    "acme",  "bolton", "corex", "dalix", "ember", "fluxo", "glint",
    "havok", "ionix",  "jetra", "krato", "lumen", "mirra", "nexo"};
const std::vector<std::string> kColors = {
    "red",  "blue",   "green", "black", "white",
    "silver", "amber", "teal",  "violet", "coral"};
const std::vector<std::string> kMaterials = {
    "steel", "oak", "cotton", "ceramic", "nylon", "bamboo", "leather", "glass"};
const std::vector<std::string> kSizes = {"small",   "medium", "large",
                                         "compact", "xl",     "mini"};

struct Factors {
  std::string category;
  std::string brand;
  std::string color;
  std::string material;
  std::string size;
};

// Category-specific templates over all five factors. The two domains write
// in different styles (category-first vs brand-first) so that style is a
// learnable signal.
std::string render_title(const Factors& f, Domain domain, int category_index) {
  auto pick = [&](std::initializer_list<std::string> options) {
    auto it = options.begin();
    std::advance(it, category_index % options.size());
    return *it;
  };
  if (domain == Domain::pretrain) {
    const std::string t = pick({
        "classic {c} from {b} {k} {m} {s} series",
        "everyday {c} by {b} in {k} {m} {s} range",
        "{c} collection {b} {k} {m} {s} model",
        "household {c} made by {b} {k} {m} {s} line",
    });
    std::string out = t;
    auto sub = [&out](const std::string& key, const std::string& val) {
      const auto pos = out.find(key);
      out.replace(pos, key.size(), val);
    };
    sub("{c}", f.category);
    sub("{b}", f.brand);
    sub("{k}", f.color);
    sub("{m}", f.material);
    sub("{s}", f.size);
    return out;
  }
  const std::string t = pick({
      "{b} {s} {k} {m} {c} pro edition",
      "{b} signature {c} {k} {m} {s} build",
      "{b} {c} sport {s} {k} {m} gear",
      "{b} travel {c} {m} {k} {s} kit",
  });
  std::string out = t;
  auto sub = [&out](const std::string& key, const std::string& val) {
    const auto pos = out.find(key);
    out.replace(pos, key.size(), val);
  };
  sub("{b}", f.brand);
  sub("{c}", f.category);
  sub("{k}", f.color);
  sub("{m}", f.material);
  sub("{s}", f.size);
  return out;
}

// Deterministic unit-norm embedding of one factor value, keyed only by the
// slot and value so it is stable across corpora and seeds.
std::vector<float> factor_embedding(const std::string& slot, const std::string& value,
                                    int dim) {
  const uint64_t h = std::hash<std::string>{}(slot + ":" + value);
  Rng rng(derive_seed(0xfac70e5eedull, h));
  std::vector<float> v(dim);
  double norm_sq = 0.0;
  for (auto& x : v) {
    x = static_cast<float>(rng.normal());
    norm_sq += static_cast<double>(x) * x;
  }
  const float inv = static_cast<float>(1.0 / std::sqrt(std::max(norm_sq, 1e-12)));
  for (auto& x : v) x *= inv;
  return v;
}

}  // namespace

void CorpusSpec::validate() const {
  if (num_products < 1 || num_categories < 1 || num_brands < 1 || num_colors < 1 ||
      num_materials < 1 || num_sizes < 1) {
    throw ContractError("corpus spec: counts must be >= 1");
  }
  if (noise < 0.0) throw ContractError("corpus spec: noise must be >= 0");
  if (image_seq_len != 5) {
    throw ContractError("corpus spec: image_seq_len must be 5 (one row per factor)");
  }
  if (num_categories > static_cast<int>(kNovelCategories.size()) ||
      num_brands > static_cast<int>(kBrands.size()) ||
      num_colors > static_cast<int>(kColors.size()) ||
      num_materials > static_cast<int>(kMaterials.size()) ||
      num_sizes > static_cast<int>(kSizes.size())) {
    throw ContractError("corpus spec: slot vocabulary larger than the name pool");
  }
  for (double p : {expose_brand, expose_color, expose_material, expose_size}) {
    if (p < 0.0 || p > 1.0) throw ContractError("corpus spec: exposure probability");
  }
}

std::vector<ProductRecord> generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const auto& categories =
      spec.domain == Domain::pretrain ? kPretrainCategories : kNovelCategories;
  const char* prefix = spec.domain == Domain::pretrain ? "pre" : "nov";

  std::vector<ProductRecord> records;
  records.reserve(spec.num_products);
  for (int i = 0; i < spec.num_products; ++i) {
    Rng rng(derive_seed(spec.seed, static_cast<uint64_t>(i) +
                                       (spec.domain == Domain::pretrain ? 1u << 24 : 0u)));
    const int cat_idx = static_cast<int>(rng.below(spec.num_categories));
    Factors f;
    f.category = categories[cat_idx];
    f.brand = kBrands[rng.below(spec.num_brands)];
    f.color = kColors[rng.below(spec.num_colors)];
    f.material = kMaterials[rng.below(spec.num_materials)];
    f.size = kSizes[rng.below(spec.num_sizes)];

    ProductRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "%s-%06d", prefix, i);
    rec.id = idbuf;

    rec.attributes.push_back("category:" + f.category);
    if (rng.uniform() < spec.expose_brand) rec.attributes.push_back("brand:" + f.brand);
    if (rng.uniform() < spec.expose_color) rec.attributes.push_back("color:" + f.color);
    if (rng.uniform() < spec.expose_material)
      rec.attributes.push_back("material:" + f.material);
    if (rng.uniform() < spec.expose_size) rec.attributes.push_back("size:" + f.size);
    if (rec.attributes.size() < 2) rec.attributes.push_back("brand:" + f.brand);

    rec.title = render_title(f, spec.domain, cat_idx);

    const std::array<std::pair<const char*, const std::string*>, 5> slots = {{
        {"category", &f.category},
        {"brand", &f.brand},
        {"color", &f.color},
        {"material", &f.material},
        {"size", &f.size},
    }};
    std::vector<float> feats(static_cast<size_t>(spec.image_seq_len) *
                             spec.image_feature_dim);
    for (int row = 0; row < spec.image_seq_len; ++row) {
      const auto emb =
          factor_embedding(slots[row].first, *slots[row].second, spec.image_feature_dim);
      for (int j = 0; j < spec.image_feature_dim; ++j) {
        feats[static_cast<size_t>(row) * spec.image_feature_dim + j] =
            emb[j] + static_cast<float>(spec.noise * rng.normal());
      }
    }
    rec.image_features = num::Tensor::from_data(
        {spec.image_seq_len, spec.image_feature_dim}, std::move(feats));
    records.push_back(std::move(rec));
  }
  return records;
}

Vocabulary::Vocabulary() {
  id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (int i = 0; i < kNumReservedIds; ++i) token_to_id_[id_to_token_[i]] = i;
}

void Vocabulary::add_tokens(const std::vector<std::pair<std::string, int64_t>>& ordered) {
  for (const auto& [tok, _] : ordered) {
    if (token_to_id_.count(tok)) continue;
    token_to_id_[tok] = static_cast<int>(id_to_token_.size());
    id_to_token_.push_back(tok);
  }
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || id >= size()) {
    throw IndexError("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return id_to_token_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id_of(t));
  return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    out.push_back(token_of(id));
  }
  return out;
}

Vocabulary build_vocab(const std::vector<ProductRecord>& records) {
  if (records.empty()) throw ContractError("build_vocab: no records");
  std::unordered_map<std::string, int64_t> freq;
  for (const auto& rec : records) {
    for (const auto& t : attribute_tokens(rec)) ++freq[t];
    for (const auto& t : title_tokens(rec)) ++freq[t];
  }
  std::vector<std::pair<std::string, int64_t>> ordered(freq.begin(), freq.end());
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary vocab;
  vocab.add_tokens(ordered);
  return vocab;
}

Splits split(const std::vector<ProductRecord>& records,
             const std::array<double, 3>& ratios, uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9) {
    throw ContractError("split: ratios must sum to 1, got " + std::to_string(total));
  }
  const size_t n = records.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5917ull));
  rng.shuffle(order);

  // Largest-remainder rounding of the three quotas.
  std::array<size_t, 3> sizes{};
  std::array<double, 3> frac{};
  size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double quota = ratios[i] * static_cast<double>(n);
    sizes[i] = static_cast<size_t>(std::floor(quota));
    frac[i] = quota - std::floor(quota);
    assigned += sizes[i];
  }
  std::array<int, 3> by_frac{0, 1, 2};
  std::sort(by_frac.begin(), by_frac.end(), [&](int a, int b) {
    if (frac[a] != frac[b]) return frac[a] > frac[b];
    return a < b;
  });
  for (size_t left = n - assigned, i = 0; i < left; ++i) ++sizes[by_frac[i % 3]];

  Splits out;
  size_t pos = 0;
  for (size_t i = 0; i < sizes[0]; ++i) out.train.push_back(records[order[pos++]]);
  for (size_t i = 0; i < sizes[1]; ++i) out.validation.push_back(records[order[pos++]]);
  for (size_t i = 0; i < sizes[2]; ++i) out.test.push_back(records[order[pos++]]);
  return out;
}

std::vector<size_t> fewshot_indices(size_t n, double fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0) {
    throw ContractError("subsample_fewshot: fraction must be in (0, 1]");
  }
  const size_t k = static_cast<size_t>(
      std::min<double>(static_cast<double>(n),
                       std::ceil(fraction * static_cast<double>(n))));
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0xfe45ull));
  rng.shuffle(order);
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<ProductRecord> subsample_fewshot(const std::vector<ProductRecord>& train,
                                             double fraction, uint64_t seed) {
  std::vector<ProductRecord> out;
  for (size_t i : fewshot_indices(train.size(), fraction, seed)) {
    out.push_back(train[i]);
  }
  return out;
}

std::vector<std::string> attribute_tokens(const ProductRecord& rec) {
  std::vector<std::string> out;
  for (const auto& attr : rec.attributes) {
    const auto colon = attr.find(':');
    if (colon == std::string::npos) {
      out.push_back(attr);
      continue;
    }
    out.push_back(attr.substr(0, colon));
    out.push_back(attr.substr(colon + 1));
  }
  return out;
}

std::vector<std::string> title_tokens(const ProductRecord& rec) {
  return metrics::tokenize(rec.title);
}

void save_records(const std::string& path, const std::vector<ProductRecord>& records) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out.good()) throw Error("save_records: cannot open " + tmp);
    ordered_json header;
    header["format"] = "mpl.dataset";
    header["version"] = 1;
    out << header.dump() << "\n";
    for (const auto& rec : records) {
      ordered_json j;
      j["id"] = rec.id;
      j["image_features"]["shape"] = rec.image_features.shape();
      j["image_features"]["data"] = std::vector<float>(
          rec.image_features.data().begin(), rec.image_features.data().end());
      j["attributes"] = rec.attributes;
      j["title"] = rec.title;
      out << j.dump() << "\n";
    }
  }
  std::filesystem::rename(tmp, path);
}

std::vector<ProductRecord> load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw Error("load_records: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("load_records: empty file " + path);
  ordered_json header;
  try {
    header = ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_records: bad header: " + std::string(e.what()));
  }
  if (header.value("format", "") != "mpl.dataset" || header.value("version", 0) != 1) {
    throw FormatError("load_records: unrecognized dataset format/version");
  }
  std::vector<ProductRecord> records;
  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw CorruptionError("load_records: line " + std::to_string(line_no) + ": " +
                            e.what());
    }
    ProductRecord rec;
    rec.id = j.at("id").get<std::string>();
    const auto shape = j.at("image_features").at("shape").get<std::vector<int>>();
    auto data = j.at("image_features").at("data").get<std::vector<float>>();
    if (shape.size() != 2 || num::numel(shape) != data.size()) {
      throw CorruptionError("load_records: line " + std::to_string(line_no) +
                            ": feature shape/payload mismatch");
    }
    rec.image_features = num::Tensor::from_data(shape, std::move(data));
    rec.attributes = j.at("attributes").get<std::vector<std::string>>();
    rec.title = j.at("title").get<std::string>();
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace mpl::data
