#pragma once

// Checkpoint file layout:
//
//   8 bytes   magic "ACDCKPT1"
//   8 bytes   header length L, unsigned little-endian
//   L bytes   UTF-8 JSON header
//   payload   every tensor's values as little-endian f64, in header order
//
// The header carries format_version, the config echo, the vocabulary, the
// model config, and a "tensors" array of {name, shape, offset} where offset
// counts f64 values from the start of the payload. Policy arrays, when
// present, use the "policy." name prefix.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "acd/dataset.hpp"
#include "acd/errors.hpp"
#include "acd/model.hpp"
#include "acd/threshold.hpp"

namespace acd {

inline constexpr char kCheckpointMagic[8] = {'A', 'C', 'D', 'C', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams model;
  std::optional<PolicyParams> policy;
  nlohmann::json config;  // echo of the run configuration
};

namespace detail {

inline void write_u64_le(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 8);
}

inline std::uint64_t read_u64_le(std::istream& in) {
  unsigned char bytes[8];
  if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw FormatError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  auto named = ckpt.model.named_parameters();
  if (ckpt.policy)
    for (auto& p : ckpt.policy->named_parameters()) named.push_back(p);

  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = ckpt.config;
  header["model"] = ckpt.model.config;
  header["vocabulary"] = ckpt.model.embeddings.vocab.tokens();
  if (ckpt.policy)
    header["policy"] = {{"n_way", ckpt.policy->n_way},
                        {"state_dim", ckpt.policy->state_dim},
                        {"hidden_dim", ckpt.policy->hidden_dim}};
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : named) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.numel();
  }
  const std::string text = header.dump();
  out.write(kCheckpointMagic, 8);
  detail::write_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, t] : named)
    for (double v : t.data()) detail::write_u64_le(out, std::bit_cast<std::uint64_t>(v));
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint " + path);
  save_checkpoint(out, ckpt);
  if (!out) throw ConfigError("failed while writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError("not a checkpoint file (bad magic)");
  const std::uint64_t len = detail::read_u64_le(in);
  if (len > (1ULL << 32)) throw FormatError("checkpoint header length implausible");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (header.value("format_version", 0) != kCheckpointVersion)
    throw FormatError("unsupported checkpoint format version");

  std::map<std::string, Tensor> tensors;
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    std::vector<double> values(numel_of(shape));
    for (double& v : values) v = std::bit_cast<double>(detail::read_u64_le(in));
    tensors.emplace(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values), true));
  }
  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    return it->second;
  };

  Checkpoint ckpt;
  ckpt.config = header.value("config", nlohmann::json::object());
  ckpt.model.config = header.at("model").get<ModelConfig>();
  ckpt.model.embeddings.vocab = Vocabulary();
  auto words = header.at("vocabulary").get<std::vector<std::string>>();
  if (words.empty() || words.front() != Vocabulary::kUnknown) throw FormatError("checkpoint vocabulary malformed");
  for (std::size_t i = 1; i < words.size(); ++i) ckpt.model.embeddings.vocab.add(words[i]);
  ckpt.model.embeddings.matrix = take("embedding");
  ckpt.model.conv_kernel = take("encoder.conv_kernel");
  ckpt.model.conv_bias = take("encoder.conv_bias");
  ckpt.model.sa_weight = take("sa.weight");
  ckpt.model.sa_bias = take("sa.bias");
  if (ckpt.model.embeddings.matrix.rows() != ckpt.model.embeddings.vocab.size())
    throw FormatError("embedding rows do not match vocabulary size");
  if (header.contains("policy")) {
    PolicyParams p;
    p.n_way = header["policy"].at("n_way").get<std::size_t>();
    p.state_dim = header["policy"].at("state_dim").get<std::size_t>();
    p.hidden_dim = header["policy"].at("hidden_dim").get<std::size_t>();
    p.trunk_weight = take("policy.trunk_weight");
    p.trunk_bias = take("policy.trunk_bias");
    p.head_a_weight = take("policy.head_a_weight");
    p.head_a_bias = take("policy.head_a_bias");
    p.head_b_weight = take("policy.head_b_weight");
    p.head_b_bias = take("policy.head_b_bias");
    ckpt.policy = std::move(p);
  }
  return ckpt;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path);
  return load_checkpoint(in);
}

}  // namespace acd
