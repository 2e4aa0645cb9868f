// SPDX-License-Identifier: Apache-2.0
//
// Encoders, prefix-conditioned transformer decoder, and beam search.
// The image encoder is a learned linear projection plus self-attention
// blocks over precomputed feature rows; attribute and title encoding share
// one text-encoder weight set. Decoder memory rows are treated as a set:
// prompts and encoder outputs carry no positional encoding of their own.

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mpl/error.hpp"
#include "mpl/rng.hpp"
#include "mpl/tensor.hpp"
#include "mpl/tokens.hpp"

namespace mpl::model {

struct ModelConfig {
  int d = 512;
  int n_heads = 8;
  int n_enc_layers = 6;
  int n_dec_layers = 6;
  int ffn_width = 2048;
  int vocab_size = 0;  // set after vocabulary construction
  int max_title_len = 32;
  int image_feature_dim = 64;
  int image_seq_len = 5;
  int n_prompts = 16;
  float dropout = 0.1f;
  // Scale applied to query-key products inside cycle alignment; the
  // alignment equations use the raw product, so this stays 1.
  float align_scale = 1.0f;

  static ModelConfig desk() {
    ModelConfig c;
    c.d = 64;
    c.n_heads = 4;
    c.n_enc_layers = 2;
    c.n_dec_layers = 2;
    c.ffn_width = 128;
    c.max_title_len = 24;
    c.image_feature_dim = 32;
    c.image_seq_len = 5;
    c.n_prompts = 8;
    return c;
  }

  void validate() const {
    if (d <= 0 || n_heads <= 0 || d % n_heads != 0) {
      throw ContractError("model config: d must be positive and divisible by n_heads");
    }
    if (n_prompts < 1) throw ContractError("model config: n_prompts must be >= 1");
    if (vocab_size < kNumReservedIds) {
      throw ContractError("model config: vocab_size must cover reserved ids");
    }
    if (n_enc_layers < 0 || n_dec_layers < 1 || ffn_width <= 0 ||
        max_title_len < 2 || image_feature_dim <= 0 || image_seq_len <= 0) {
      throw ContractError("model config: invalid dimension");
    }
    if (dropout < 0.0f || dropout >= 1.0f) {
      throw ContractError("model config: dropout must be in [0,1)");
    }
  }
};

// All trainable arrays, addressable by stable names. std::map keeps a
// deterministic order for optimizer sweeps and checkpoints.
template <typename T>
struct ParamsT {
  std::map<std::string, num::TensorT<T>> by_name;

  num::TensorT<T>& at(const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  const num::TensorT<T>& at(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  void set_requires_grad(bool v) {
    for (auto& [_, t] : by_name) t.set_requires_grad(v);
  }

  ParamsT detached_copy() const {
    ParamsT out;
    for (const auto& [k, t] : by_name) out.by_name.emplace(k, t.detached_copy());
    return out;
  }

  size_t total_size() const {
    size_t n = 0;
    for (const auto& [_, t] : by_name) n += t.size();
    return n;
  }
};

using ModelParams = ParamsT<float>;

// Forward-pass mode: dropout fires only when training with an RNG attached.
struct EvalCtx {
  bool training = false;
  Rng* rng = nullptr;
};

namespace detail {

template <typename T>
num::TensorT<T> uniform_fan_in(int rows, int cols, Rng& rng) {
  const T bound = T(1) / std::sqrt(static_cast<T>(rows));
  return num::random_uniform<T>({rows, cols}, -bound, bound, rng, true);
}

template <typename T>
void add_linear(ParamsT<T>& p, const std::string& name, int in, int out, Rng& rng) {
  p.by_name.emplace(name + ".w", uniform_fan_in<T>(in, out, rng));
  p.by_name.emplace(name + ".b", num::TensorT<T>::zeros({1, out}, true));
}

template <typename T>
void add_layer_norm(ParamsT<T>& p, const std::string& name, int d) {
  p.by_name.emplace(name + ".g", num::TensorT<T>::filled({1, d}, T(1), true));
  p.by_name.emplace(name + ".b", num::TensorT<T>::zeros({1, d}, true));
}

template <typename T>
void add_attention(ParamsT<T>& p, const std::string& name, int d, Rng& rng) {
  add_linear(p, name + ".q", d, d, rng);
  add_linear(p, name + ".k", d, d, rng);
  add_linear(p, name + ".v", d, d, rng);
  add_linear(p, name + ".o", d, d, rng);
}

template <typename T>
void add_block_stack(ParamsT<T>& p, const std::string& prefix, int layers,
                     bool cross, const ModelConfig& cfg, Rng& rng) {
  for (int i = 0; i < layers; ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    add_layer_norm(p, base + ".ln1", cfg.d);
    add_attention(p, base + ".self", cfg.d, rng);
    if (cross) {
      add_layer_norm(p, base + ".ln2", cfg.d);
      add_attention(p, base + ".cross", cfg.d, rng);
    }
    add_layer_norm(p, base + (cross ? ".ln3" : ".ln2"), cfg.d);
    add_linear(p, base + ".ffn.1", cfg.d, cfg.ffn_width, rng);
    add_linear(p, base + ".ffn.2", cfg.ffn_width, cfg.d, rng);
  }
  if (layers > 0) add_layer_norm(p, prefix + ".lnf", cfg.d);
}

}  // namespace detail

// Fresh parameter set. Weight matrices draw from U(+-1/sqrt(fan_in));
// biases and layer-norm offsets start at zero.
template <typename T>
ParamsT<T> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0x6d6f64656cull));  // independent stream per use
  ParamsT<T> p;
  p.by_name.emplace("embed.tok", detail::uniform_fan_in<T>(cfg.vocab_size, cfg.d, rng));
  detail::add_linear(p, "img.proj", cfg.image_feature_dim, cfg.d, rng);
  detail::add_block_stack(p, "ienc", cfg.n_enc_layers, false, cfg, rng);
  detail::add_block_stack(p, "tenc", cfg.n_enc_layers, false, cfg, rng);
  detail::add_block_stack(p, "dec", cfg.n_dec_layers, true, cfg, rng);
  detail::add_linear(p, "out.proj", cfg.d, cfg.vocab_size, rng);
  return p;
}

inline ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
  return init_params<float>(cfg, seed);
}

// Sinusoidal position table, rebuilt per call (cheap at these sizes).
template <typename T>
num::TensorT<T> positional_encoding(int len, int d) {
  std::vector<T> data(static_cast<size_t>(len) * d);
  for (int pos = 0; pos < len; ++pos) {
    for (int i = 0; i < d; ++i) {
      const double angle =
          pos / std::pow(10000.0, 2.0 * (i / 2) / static_cast<double>(d));
      data[static_cast<size_t>(pos) * d + i] =
          static_cast<T>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  }
  return num::constant<T>({len, d}, std::move(data));
}

namespace detail {

template <typename T>
num::TensorT<T> linear(const ParamsT<T>& p, const std::string& name,
                       const num::TensorT<T>& x) {
  return num::add_rowvec(num::matmul(x, p.at(name + ".w")), p.at(name + ".b"));
}

// Additive attention mask: 0 where attendable, large negative where not.
// mask[q * n_keys + k]; an empty vector means no masking.
template <typename T>
num::TensorT<T> multi_head_attention(const ParamsT<T>& p, const std::string& name,
                                     const num::TensorT<T>& q_in,
                                     const num::TensorT<T>& kv_in,
                                     const std::vector<T>& mask,
                                     const ModelConfig& cfg, const EvalCtx& ctx) {
  const int dh = cfg.d / cfg.n_heads;
  auto q = linear(p, name + ".q", q_in);
  auto k = linear(p, name + ".k", kv_in);
  auto v = linear(p, name + ".v", kv_in);
  num::TensorT<T> mask_t;
  if (!mask.empty()) {
    mask_t = num::constant<T>({q_in.rows(), kv_in.rows()}, std::vector<T>(mask));
  }
  std::vector<num::TensorT<T>> heads;
  heads.reserve(cfg.n_heads);
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
  for (int h = 0; h < cfg.n_heads; ++h) {
    auto qh = num::slice_cols(q, h * dh, (h + 1) * dh);
    auto kh = num::slice_cols(k, h * dh, (h + 1) * dh);
    auto vh = num::slice_cols(v, h * dh, (h + 1) * dh);
    auto scores = num::scale(num::matmul(qh, num::transpose(kh)), inv_sqrt_dh);
    if (mask_t.defined()) scores = num::add(scores, mask_t);
    auto weights = num::softmax_rows(scores);
    weights = num::dropout(weights, static_cast<T>(cfg.dropout), ctx.training, ctx.rng);
    heads.push_back(num::matmul(weights, vh));
  }
  return linear(p, name + ".o", num::concat_cols(heads));
}

template <typename T>
num::TensorT<T> ffn(const ParamsT<T>& p, const std::string& base,
                    const num::TensorT<T>& x, const ModelConfig& cfg,
                    const EvalCtx& ctx) {
  auto h = num::gelu(linear(p, base + ".ffn.1", x));
  h = num::dropout(h, static_cast<T>(cfg.dropout), ctx.training, ctx.rng);
  return linear(p, base + ".ffn.2", h);
}

template <typename T>
num::TensorT<T> layer_norm(const ParamsT<T>& p, const std::string& name,
                           const num::TensorT<T>& x) {
  return num::layer_norm_rows(x, p.at(name + ".g"), p.at(name + ".b"));
}

// Pre-norm self-attention encoder stack with a closing layer norm.
template <typename T>
num::TensorT<T> encoder_stack(const ParamsT<T>& p, const std::string& prefix,
                              num::TensorT<T> x, const std::vector<T>& self_mask,
                              const ModelConfig& cfg, const EvalCtx& ctx) {
  if (cfg.n_enc_layers == 0) return x;  // empty stack is the identity
  const T drop = static_cast<T>(cfg.dropout);
  for (int i = 0; i < cfg.n_enc_layers; ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    auto ln = layer_norm(p, base + ".ln1", x);
    auto a = multi_head_attention(p, base + ".self", ln, ln, self_mask, cfg, ctx);
    x = num::add(x, num::dropout(a, drop, ctx.training, ctx.rng));
    auto f = ffn(p, base, layer_norm(p, base + ".ln2", x), cfg, ctx);
    x = num::add(x, num::dropout(f, drop, ctx.training, ctx.rng));
  }
  return layer_norm(p, prefix + ".lnf", x);
}

// Mask builders. Entries use -1e30 so masked weights underflow to exact 0.
template <typename T>
std::vector<T> key_pad_mask(std::span<const int> key_ids, int n_queries) {
  bool any = false;
  for (int id : key_ids) any |= (id == kPadId);
  if (!any) return {};
  std::vector<T> m(static_cast<size_t>(n_queries) * key_ids.size(), T(0));
  for (int q = 0; q < n_queries; ++q)
    for (size_t k = 0; k < key_ids.size(); ++k)
      if (key_ids[k] == kPadId) m[q * key_ids.size() + k] = T(-1e30);
  return m;
}

template <typename T>
std::vector<T> causal_mask(int len) {
  std::vector<T> m(static_cast<size_t>(len) * len, T(0));
  for (int q = 0; q < len; ++q)
    for (int k = q + 1; k < len; ++k) m[q * len + k] = T(-1e30);
  return m;
}

}  // namespace detail

// Image feature rows -> R_I [image_seq_len x d].
template <typename T>
num::TensorT<T> encode_image(const num::TensorT<T>& features, const ParamsT<T>& p,
                             const ModelConfig& cfg, const EvalCtx& ctx = {}) {
  if (features.rows() != cfg.image_seq_len || features.cols() != cfg.image_feature_dim) {
    throw ShapeError("encode_image: features " + num::shape_str(features.shape()) +
                     ", expected [" + std::to_string(cfg.image_seq_len) + "x" +
                     std::to_string(cfg.image_feature_dim) + "]");
  }
  auto x = num::add(detail::linear(p, "img.proj", features),
                    positional_encoding<T>(cfg.image_seq_len, cfg.d));
  return detail::encoder_stack(p, "ienc", x, {}, cfg, ctx);
}

// Token ids -> [L x d] through the shared text encoder. Pad positions are
// masked out of every attention row.
template <typename T>
num::TensorT<T> encode_tokens(std::span<const int> ids, const ParamsT<T>& p,
                              const ModelConfig& cfg, const EvalCtx& ctx = {}) {
  if (ids.empty()) throw ContractError("encode_tokens: empty sequence");
  auto x = num::add(num::embedding_rows(p.at("embed.tok"), ids),
                    positional_encoding<T>(static_cast<int>(ids.size()), cfg.d));
  auto mask = detail::key_pad_mask<T>(ids, static_cast<int>(ids.size()));
  return detail::encoder_stack(p, "tenc", x, mask, cfg, ctx);
}

template <typename T>
num::TensorT<T> encode_attributes(std::span<const int> attribute_ids,
                                  const ParamsT<T>& p, const ModelConfig& cfg,
                                  const EvalCtx& ctx = {}) {
  return encode_tokens(attribute_ids, p, cfg, ctx);
}

template <typename T>
num::TensorT<T> encode_title(std::span<const int> title_ids, const ParamsT<T>& p,
                             const ModelConfig& cfg, const EvalCtx& ctx = {}) {
  return encode_tokens(title_ids, p, cfg, ctx);
}

// Decoder over an already-embedded input sequence: causal self-attention,
// cross-attention into memory, vocabulary projection.
template <typename T>
num::TensorT<T> decode_logits(const num::TensorT<T>& memory,
                              std::span<const int> input_ids, const ParamsT<T>& p,
                              const ModelConfig& cfg, const EvalCtx& ctx = {}) {
  if (memory.rows() < 1 || memory.cols() != cfg.d) {
    throw ShapeError("decode_logits: memory " + num::shape_str(memory.shape()) +
                     ", expected [M>=1 x " + std::to_string(cfg.d) + "]");
  }
  if (input_ids.empty()) throw ContractError("decode_logits: empty input");
  const int len = static_cast<int>(input_ids.size());
  const T drop = static_cast<T>(cfg.dropout);
  auto x = num::add(num::embedding_rows(p.at("embed.tok"), input_ids),
                    positional_encoding<T>(len, cfg.d));
  auto causal = detail::causal_mask<T>(len);
  for (int i = 0; i < cfg.n_dec_layers; ++i) {
    const std::string base = "dec." + std::to_string(i);
    auto ln = detail::layer_norm(p, base + ".ln1", x);
    auto a = detail::multi_head_attention(p, base + ".self", ln, ln, causal, cfg, ctx);
    x = num::add(x, num::dropout(a, drop, ctx.training, ctx.rng));
    auto c = detail::multi_head_attention(p, base + ".cross",
                                          detail::layer_norm(p, base + ".ln2", x),
                                          memory, {}, cfg, ctx);
    x = num::add(x, num::dropout(c, drop, ctx.training, ctx.rng));
    auto f = detail::ffn(p, base, detail::layer_norm(p, base + ".ln3", x), cfg, ctx);
    x = num::add(x, num::dropout(f, drop, ctx.training, ctx.rng));
  }
  x = detail::layer_norm(p, "dec.lnf", x);
  return detail::linear(p, "out.proj", x);
}

// Teacher-forced cross-entropy of a bos...eos title against the decoder
// conditioned on `memory`.
template <typename T>
num::TensorT<T> decode_loss(const num::TensorT<T>& memory,
                            std::span<const int> title_ids, const ParamsT<T>& p,
                            const ModelConfig& cfg, const EvalCtx& ctx = {}) {
  if (title_ids.size() < 2 || title_ids.front() != kBosId || title_ids.back() != kEosId) {
    throw ContractError("decode_loss: title must start with bos and end with eos");
  }
  if (static_cast<int>(title_ids.size()) > cfg.max_title_len + 2) {
    throw ContractError("decode_loss: title longer than max_title_len");
  }
  auto input = title_ids.subspan(0, title_ids.size() - 1);
  auto target = title_ids.subspan(1);
  auto logits = decode_logits(memory, input, p, cfg, ctx);
  return num::cross_entropy(logits, target, kPadId);
}

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

struct GenerationHypothesis {
  std::vector<int> tokens;  // emitted tokens, bos excluded
  double log_prob = 0.0;
  bool finished = false;

  double normalized_score() const {
    return log_prob / std::max<size_t>(1, tokens.size());
  }
};

// Next-token log-probabilities given the prefix (bos included).
using StepScorer = std::function<std::vector<double>(std::span<const int>)>;

// Length-normalized beam search over an arbitrary scorer. Ties in the
// normalized score break toward the lexicographically smaller sequence,
// which prefers lower token ids and earlier finishes.
inline GenerationHypothesis beam_search_generic(const StepScorer& score_step,
                                                int beam_size, int max_len) {
  if (beam_size < 1) throw ContractError("beam_search: beam_size must be >= 1");
  if (max_len < 1) throw ContractError("beam_search: max_len must be >= 1");

  auto better = [](const GenerationHypothesis& a, const GenerationHypothesis& b) {
    const double sa = a.normalized_score(), sb = b.normalized_score();
    if (sa != sb) return sa > sb;
    return a.tokens < b.tokens;
  };

  std::vector<GenerationHypothesis> beam{GenerationHypothesis{}};
  for (int step = 0; step < max_len; ++step) {
    bool any_open = false;
    for (const auto& h : beam) any_open |= !h.finished;
    if (!any_open) break;

    std::vector<GenerationHypothesis> candidates;
    for (const auto& h : beam) {
      if (h.finished) {
        candidates.push_back(h);
        continue;
      }
      std::vector<int> prefix;
      prefix.reserve(h.tokens.size() + 1);
      prefix.push_back(kBosId);
      prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
      const auto log_probs = score_step(prefix);
      for (int tok = 0; tok < static_cast<int>(log_probs.size()); ++tok) {
        if (tok == kPadId || tok == kBosId) continue;  // never emitted
        GenerationHypothesis next = h;
        next.tokens.push_back(tok);
        next.log_prob += log_probs[tok];
        next.finished = (tok == kEosId);
        candidates.push_back(std::move(next));
      }
    }
    std::sort(candidates.begin(), candidates.end(), better);
    if (static_cast<int>(candidates.size()) > beam_size) candidates.resize(beam_size);
    beam = std::move(candidates);
  }

  // Best finished hypothesis, else best unfinished at the length cap.
  const GenerationHypothesis* best = nullptr;
  for (const auto& h : beam) {
    if (h.finished && (!best || better(h, *best))) best = &h;
  }
  if (!best) {
    for (const auto& h : beam) {
      if (!best || better(h, *best)) best = &h;
    }
  }
  return *best;
}

// Beam search over the decoder. Returns emitted token ids (bos excluded;
// ends with eos unless the length cap was hit).
template <typename T>
std::vector<int> beam_search(const num::TensorT<T>& memory, const ParamsT<T>& p,
                             const ModelConfig& cfg, int beam_size, int max_len) {
  StepScorer scorer = [&](std::span<const int> prefix) {
    auto logits = decode_logits(memory, prefix, p, cfg, EvalCtx{});
    const int v = logits.cols();
    std::span<const T> last(logits.data().data() + (logits.rows() - 1) * v, v);
    auto lp = num::log_softmax_row(last);
    return std::vector<double>(lp.begin(), lp.end());
  };
  return beam_search_generic(scorer, beam_size, max_len).tokens;
}

// Plain argmax decoding, written independently of beam search so the two
// can be checked against each other.
template <typename T>
std::vector<int> greedy_decode(const num::TensorT<T>& memory, const ParamsT<T>& p,
                               const ModelConfig& cfg, int max_len) {
  std::vector<int> prefix{kBosId};
  std::vector<int> out;
  for (int step = 0; step < max_len; ++step) {
    auto logits = decode_logits(memory, prefix, p, cfg, EvalCtx{});
    const int v = logits.cols();
    std::span<const T> last(logits.data().data() + (logits.rows() - 1) * v, v);
    int best = -1;
    for (int tok = 0; tok < v; ++tok) {
      if (tok == kPadId || tok == kBosId) continue;
      if (best < 0 || last[tok] > last[best]) best = tok;
    }
    out.push_back(best);
    if (best == kEosId) break;
    prefix.push_back(best);
  }
  return out;
}

}  // namespace mpl::model
