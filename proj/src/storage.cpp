// SPDX-License-Identifier: Apache-2.0
#include "mpl/storage.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mpl/error.hpp"

namespace mpl::storage {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr char kMagic[8] = {'M', 'P', 'L', 'C', 'K', 'P', 'T', '\0'};
constexpr uint32_t kVersion = 1;

// The format mandates little-endian payloads.
bool little_endian() {
  const uint16_t probe = 1;
  uint8_t byte;
  std::memcpy(&byte, &probe, 1);
  return byte == 1;
}

void require_little_endian() {
  if (!little_endian()) {
    throw Error("checkpoint format is little-endian; this host is big-endian");
  }
}

void write_u32(std::ostream& out, uint32_t v) {
  char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, 4);
}

void write_u64(std::ostream& out, uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, 8);
}

uint32_t read_u32(std::istream& in, size_t& offset) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (in.gcount() != 4) {
    throw CorruptionError("checkpoint truncated at byte " + std::to_string(offset));
  }
  offset += 4;
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& in, size_t& offset) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (in.gcount() != 8) {
    throw CorruptionError("checkpoint truncated at byte " + std::to_string(offset));
  }
  offset += 8;
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return v;
}

void write_floats(std::ostream& out, std::span<const float> data) {
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
}

std::vector<float> read_floats(std::istream& in, size_t count, size_t& offset) {
  std::vector<float> data(count);
  const auto bytes = static_cast<std::streamsize>(count * sizeof(float));
  in.read(reinterpret_cast<char*>(data.data()), bytes);
  if (in.gcount() != bytes) {
    throw CorruptionError("checkpoint truncated at byte " +
                          std::to_string(offset + static_cast<size_t>(in.gcount())));
  }
  offset += static_cast<size_t>(bytes);
  return data;
}

ordered_json config_json(const model::ModelConfig& c) {
  ordered_json j;
  j["d"] = c.d;
  j["n_heads"] = c.n_heads;
  j["n_enc_layers"] = c.n_enc_layers;
  j["n_dec_layers"] = c.n_dec_layers;
  j["ffn_width"] = c.ffn_width;
  j["vocab_size"] = c.vocab_size;
  j["max_title_len"] = c.max_title_len;
  j["image_feature_dim"] = c.image_feature_dim;
  j["image_seq_len"] = c.image_seq_len;
  j["n_prompts"] = c.n_prompts;
  j["dropout"] = c.dropout;
  j["align_scale"] = c.align_scale;
  return j;
}

model::ModelConfig config_from_json(const ordered_json& j) {
  model::ModelConfig c;
  c.d = j.at("d").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.n_enc_layers = j.at("n_enc_layers").get<int>();
  c.n_dec_layers = j.at("n_dec_layers").get<int>();
  c.ffn_width = j.at("ffn_width").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_title_len = j.at("max_title_len").get<int>();
  c.image_feature_dim = j.at("image_feature_dim").get<int>();
  c.image_seq_len = j.at("image_seq_len").get<int>();
  c.n_prompts = j.at("n_prompts").get<int>();
  c.dropout = j.at("dropout").get<float>();
  c.align_scale = j.at("align_scale").get<float>();
  return c;
}

}  // namespace

OptimizerState OptimizerState::from(const num::AdamW& opt) {
  OptimizerState out;
  out.step_count = opt.step_count();
  for (const auto& [name, slot] : opt.slots()) {
    out.moments.emplace(name, std::make_pair(slot.m, slot.v));
  }
  return out;
}

void OptimizerState::install(num::AdamW& opt) const {
  opt.set_step_count(step_count);
  opt.slots().clear();
  for (const auto& [name, mv] : moments) {
    opt.slots()[name] = num::AdamW::Slot{mv.first, mv.second};
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  require_little_endian();

  // Header: array directory in write order.
  ordered_json header;
  header["config"] = config_json(ckpt.config);
  header["phase"] = train::to_string(ckpt.phase);
  header["setting"] = train::to_string(ckpt.setting);
  header["seed"] = ckpt.seed;
  header["best_val_cider"] = ckpt.best_val_cider;
  header["run_config"] = ckpt.run_config_echo;
  header["opt_step"] = ckpt.optimizer ? ckpt.optimizer->step_count : -1;
  auto arrays = ordered_json::array();
  auto add_array = [&arrays](const std::string& name, size_t rows, size_t cols) {
    arrays.push_back({{"name", name}, {"rows", rows}, {"cols", cols}});
  };
  for (const auto& [name, t] : ckpt.params.by_name) {
    add_array("param." + name, static_cast<size_t>(t.rows()),
              static_cast<size_t>(t.cols()));
  }
  add_array("bank.visual", ckpt.bank.visual.rows(), ckpt.bank.visual.cols());
  add_array("bank.attribute", ckpt.bank.attribute.rows(), ckpt.bank.attribute.cols());
  add_array("bank.language", ckpt.bank.language.rows(), ckpt.bank.language.cols());
  if (ckpt.optimizer) {
    for (const auto& [name, mv] : ckpt.optimizer->moments) {
      add_array("opt.m." + name, 1, mv.first.size());
      add_array("opt.v." + name, 1, mv.second.size());
    }
  }
  header["arrays"] = arrays;
  const std::string header_text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out.good()) throw Error("save_checkpoint: cannot open " + tmp);
    out.write(kMagic, sizeof(kMagic));
    write_u32(out, kVersion);
    write_u64(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, t] : ckpt.params.by_name) write_floats(out, t.data());
    write_floats(out, ckpt.bank.visual.data());
    write_floats(out, ckpt.bank.attribute.data());
    write_floats(out, ckpt.bank.language.data());
    if (ckpt.optimizer) {
      for (const auto& [name, mv] : ckpt.optimizer->moments) {
        write_floats(out, mv.first);
        write_floats(out, mv.second);
      }
    }
    if (!out.good()) throw Error("save_checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  require_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw Error("load_checkpoint: cannot open " + path);
  size_t offset = 0;

  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != sizeof(magic) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw FormatError("load_checkpoint: bad magic in " + path);
  }
  offset += sizeof(magic);
  const uint32_t version = read_u32(in, offset);
  if (version != kVersion) {
    throw FormatError("load_checkpoint: unsupported version " + std::to_string(version));
  }
  const uint64_t header_len = read_u64(in, offset);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<uint64_t>(in.gcount()) != header_len) {
    throw CorruptionError("checkpoint truncated at byte " + std::to_string(offset));
  }
  offset += header_len;

  ordered_json header;
  try {
    header = ordered_json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_checkpoint: bad header: " + std::string(e.what()));
  }

  Checkpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  ckpt.phase = train::phase_from_string(header.at("phase").get<std::string>());
  ckpt.setting = train::setting_from_string(header.at("setting").get<std::string>());
  ckpt.seed = header.at("seed").get<uint64_t>();
  ckpt.best_val_cider = header.at("best_val_cider").get<double>();
  ckpt.run_config_echo = header.at("run_config").get<std::string>();
  const int64_t opt_step = header.at("opt_step").get<int64_t>();

  OptimizerState opt_state;
  opt_state.step_count = opt_step;
  bool has_opt = false;
  for (const auto& entry : header.at("arrays")) {
    const auto name = entry.at("name").get<std::string>();
    const auto rows = entry.at("rows").get<size_t>();
    const auto cols = entry.at("cols").get<size_t>();
    auto data = read_floats(in, rows * cols, offset);
    if (name.rfind("param.", 0) == 0) {
      ckpt.params.by_name.emplace(
          name.substr(6),
          num::Tensor::from_data({static_cast<int>(rows), static_cast<int>(cols)},
                                 std::move(data), true));
    } else if (name == "bank.visual") {
      ckpt.bank.visual = num::Tensor::from_data(
          {static_cast<int>(rows), static_cast<int>(cols)}, std::move(data));
    } else if (name == "bank.attribute") {
      ckpt.bank.attribute = num::Tensor::from_data(
          {static_cast<int>(rows), static_cast<int>(cols)}, std::move(data));
    } else if (name == "bank.language") {
      ckpt.bank.language = num::Tensor::from_data(
          {static_cast<int>(rows), static_cast<int>(cols)}, std::move(data));
    } else if (name.rfind("opt.m.", 0) == 0) {
      has_opt = true;
      opt_state.moments[name.substr(6)].first = std::move(data);
    } else if (name.rfind("opt.v.", 0) == 0) {
      has_opt = true;
      opt_state.moments[name.substr(6)].second = std::move(data);
    } else {
      throw FormatError("load_checkpoint: unknown array '" + name + "'");
    }
  }
  if (has_opt) ckpt.optimizer = std::move(opt_state);
  return ckpt;
}

}  // namespace mpl::storage
