#pragma once

// Prototype network with support-set and query-set attention.
//
// For each episode class i the K support sentences are encoded, averaged
// word-wise into a common aspect vector v, turned into a class-specific
// attention matrix W^i, and attended into denoised instance vectors whose
// mean is the prototype. Each query is attended once per prototype and the
// negative distances to the prototypes are softmax-normalised into ŷ.

#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "acd/dataset.hpp"
#include "acd/episode.hpp"
#include "acd/tensor.hpp"

namespace acd {

struct AblationFlags {
  bool no_support_attention = false;  // prototype = mean of word-mean instance vectors
  bool no_attention_matrix = false;   // W^i replaced by the identity
  bool no_query_attention = false;    // query representation = word mean
  bool no_dynamic_threshold = false;  // evaluate with the static threshold only

  bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
  std::size_t embedding_dim = 50;
  std::size_t hidden_dim = 50;
  std::size_t window = 3;
  std::size_t repeat = 10;  // e_M
  bool squared_distance = false;

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const AblationFlags& f) {
  j = {{"no_sa", f.no_support_attention},
       {"no_wi", f.no_attention_matrix},
       {"no_qa", f.no_query_attention},
       {"no_dt", f.no_dynamic_threshold}};
}
inline void from_json(const nlohmann::json& j, AblationFlags& f) {
  f.no_support_attention = j.value("no_sa", false);
  f.no_attention_matrix = j.value("no_wi", false);
  f.no_query_attention = j.value("no_qa", false);
  f.no_dynamic_threshold = j.value("no_dt", false);
}

// Parses a comma-separated list of no-sa, no-wi, no-qa, no-dt.
inline AblationFlags parse_ablation(const std::string& list) {
  AblationFlags f;
  std::string item;
  std::istringstream is(list);
  while (std::getline(is, item, ',')) {
    if (item.empty() || item == "none") continue;
    if (item == "no-sa") f.no_support_attention = true;
    else if (item == "no-wi") f.no_attention_matrix = true;
    else if (item == "no-qa") f.no_query_attention = true;
    else if (item == "no-dt") f.no_dynamic_threshold = true;
    else throw ConfigError("unknown ablation '" + item + "' (expected no-sa, no-wi, no-qa, no-dt)");
  }
  return f;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"embedding_dim", c.embedding_dim},
       {"hidden_dim", c.hidden_dim},
       {"window", c.window},
       {"repeat", c.repeat},
       {"squared_distance", c.squared_distance}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.embedding_dim = j.value("embedding_dim", d.embedding_dim);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.window = j.value("window", d.window);
  c.repeat = j.value("repeat", d.repeat);
  c.squared_distance = j.value("squared_distance", d.squared_distance);
}

struct ModelParams {
  ModelConfig config;
  EmbeddingTable embeddings;
  Tensor conv_kernel;  // m×d_e×d
  Tensor conv_bias;    // d
  Tensor sa_weight;    // d×e_M
  Tensor sa_bias;      // d

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    return {{"embedding", embeddings.matrix},
            {"encoder.conv_kernel", conv_kernel},
            {"encoder.conv_bias", conv_bias},
            {"sa.weight", sa_weight},
            {"sa.bias", sa_bias}};
  }
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [_, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // Deep copy with fresh, gradient-free-history leaves.
  ModelParams clone() const {
    ModelParams p = *this;
    auto fresh = [](const Tensor& t) { return Tensor(t.shape(), {t.data().begin(), t.data().end()}, true); };
    p.embeddings.matrix = fresh(embeddings.matrix);
    p.conv_kernel = fresh(conv_kernel);
    p.conv_bias = fresh(conv_bias);
    p.sa_weight = fresh(sa_weight);
    p.sa_bias = fresh(sa_bias);
    return p;
  }
};

// Non-embedding parameters are drawn from N(0, 0.1).
inline ModelParams init_model(const ModelConfig& cfg, EmbeddingTable embeddings, std::mt19937_64& rng) {
  if (cfg.window % 2 == 0) throw ConfigError("convolution window must be odd");
  if (cfg.repeat == 0 || cfg.hidden_dim == 0 || cfg.embedding_dim == 0)
    throw ConfigError("model dimensions must be positive");
  if (embeddings.dim() != cfg.embedding_dim)
    throw ConfigError("embedding table width " + std::to_string(embeddings.dim()) + " differs from embedding_dim " +
                      std::to_string(cfg.embedding_dim));
  const std::size_t m = cfg.window, de = cfg.embedding_dim, d = cfg.hidden_dim;
  ModelParams p;
  p.config = cfg;
  p.embeddings = std::move(embeddings);
  p.conv_kernel = Tensor({m, de, d}, sample_normal(m * de * d, rng), true);
  p.conv_bias = Tensor({d}, sample_normal(d, rng), true);
  p.sa_weight = Tensor({d, cfg.repeat}, sample_normal(d * cfg.repeat, rng), true);
  p.sa_bias = Tensor({d}, sample_normal(d, rng), true);
  return p;
}

// H = conv1d_same(embedding rows of the tokens): n×d.
inline Tensor encode(std::span<const std::size_t> tokens, const ModelParams& params) {
  if (tokens.empty()) throw ContractError("cannot encode an empty sentence");
  return conv1d_same(gather_rows(params.embeddings.matrix, tokens), params.conv_kernel, params.conv_bias);
}

// v^i: grand mean over all word rows of the K encoded sequences.
inline Tensor common_aspect_vector(const std::vector<Tensor>& encoded) {
  if (encoded.empty()) throw ContractError("common aspect vector needs at least one sequence");
  return mean_rows(concat(encoded));
}

// W^i = W · (v stacked e_M times as rows) + b broadcast over rows: d×d.
inline Tensor class_attention_matrix(const Tensor& v, const Tensor& weight, const Tensor& bias) {
  const std::size_t repeat = weight.cols();
  std::vector<Tensor> copies(repeat, v);
  Tensor stacked = reshape(concat(copies), {repeat, v.numel()});
  return row_broadcast_add(matmul(weight, stacked), bias);
}

// β = softmax(tanh(H W^i) v) over the n words.
inline Tensor support_attention(const Tensor& encoded, const Tensor& v, const Tensor& attention_matrix) {
  const std::size_t d = encoded.cols();
  return softmax_t(reshape(matmul(tanh(matmul(encoded, attention_matrix)), reshape(v, {d, 1})), {encoded.rows()}));
}

// β with the attention matrix removed: softmax(tanh(H) v).
inline Tensor support_attention_identity(const Tensor& encoded, const Tensor& v) {
  const std::size_t d = encoded.cols();
  return softmax_t(reshape(matmul(tanh(encoded), reshape(v, {d, 1})), {encoded.rows()}));
}

// r = β H.
inline Tensor denoise_instance(const Tensor& encoded, const Tensor& v, const Tensor& attention_matrix) {
  return matmul(support_attention(encoded, v, attention_matrix), encoded);
}

inline Tensor denoise_instance_identity(const Tensor& encoded, const Tensor& v) {
  return matmul(support_attention_identity(encoded, v), encoded);
}

inline Tensor compute_prototype(const std::vector<Tensor>& denoised) {
  if (denoised.empty()) throw ContractError("prototype needs at least one instance");
  const std::size_t d = denoised.front().numel();
  return mean_rows(reshape(concat(denoised), {denoised.size(), d}));
}

// ρ = softmax(tanh(H_q) r). No learned parameters.
inline Tensor query_attention(const Tensor& encoded_query, const Tensor& prototype) {
  const std::size_t d = encoded_query.cols();
  return softmax_t(reshape(matmul(tanh(encoded_query), reshape(prototype, {d, 1})), {encoded_query.rows()}));
}

// r_q = ρ H_q.
inline Tensor query_representation(const Tensor& encoded_query, const Tensor& prototype) {
  return matmul(query_attention(encoded_query, prototype), encoded_query);
}

inline Tensor distance(const Tensor& a, const Tensor& b, bool squared) {
  Tensor sq = sum(square(sub(a, b)));
  return squared ? sq : sqrt(sq);
}

// ŷ = softmax(-distance_i / T) over the N (prototype, query representation) pairs.
inline Tensor rank(const std::vector<Tensor>& prototypes, const std::vector<Tensor>& query_reps,
                   double temperature = 1.0, bool squared = false) {
  if (prototypes.size() != query_reps.size() || prototypes.empty())
    throw ShapeError("rank: prototype and query representation counts differ");
  std::vector<Tensor> dists;
  dists.reserve(prototypes.size());
  for (std::size_t i = 0; i < prototypes.size(); ++i) dists.push_back(distance(prototypes[i], query_reps[i], squared));
  return softmax_t(neg(concat(dists)), temperature);
}

struct QueryOutput {
  Tensor scores;                 // ŷ
  std::vector<Tensor> reps;      // r^i_q per class
};

struct EpisodeOutput {
  std::vector<Tensor> prototypes;
  std::vector<Tensor> common_vectors;
  std::vector<QueryOutput> queries;
};

inline std::vector<Tensor> prototypes_for(const MetaTask& task, const Corpus& corpus, const ModelParams& params,
                                          const AblationFlags& flags, std::vector<Tensor>* common_out = nullptr) {
  std::vector<Tensor> prototypes;
  for (const auto& group : task.support) {
    std::vector<Tensor> encoded;
    for (std::size_t idx : group) encoded.push_back(encode(corpus.sentences[idx].tokens, params));
    Tensor v = common_aspect_vector(encoded);
    if (common_out) common_out->push_back(v);
    std::vector<Tensor> instances;
    if (flags.no_support_attention) {
      for (const auto& h : encoded) instances.push_back(mean_rows(h));
    } else if (flags.no_attention_matrix) {
      for (const auto& h : encoded) instances.push_back(denoise_instance_identity(h, v));
    } else {
      Tensor wi = class_attention_matrix(v, params.sa_weight, params.sa_bias);
      for (const auto& h : encoded) instances.push_back(denoise_instance(h, v, wi));
    }
    prototypes.push_back(compute_prototype(instances));
  }
  return prototypes;
}

inline QueryOutput score_query(const Sentence& sentence, const std::vector<Tensor>& prototypes,
                               const ModelParams& params, const AblationFlags& flags, double temperature) {
  Tensor hq = encode(sentence.tokens, params);
  QueryOutput q;
  if (flags.no_query_attention) {
    Tensor m = mean_rows(hq);
    q.reps.assign(prototypes.size(), m);
  } else {
    for (const auto& r : prototypes) q.reps.push_back(query_representation(hq, r));
  }
  q.scores = rank(prototypes, q.reps, temperature, params.config.squared_distance);
  return q;
}

inline EpisodeOutput forward_episode(const MetaTask& task, const Corpus& corpus, const ModelParams& params,
                                     const AblationFlags& flags = {}, double temperature = 1.0) {
  if (task.support.size() != task.classes.size() || task.classes.empty())
    throw ContractError("malformed meta-task");
  EpisodeOutput out;
  out.prototypes = prototypes_for(task, corpus, params, flags, &out.common_vectors);
  for (const auto& q : task.queries)
    out.queries.push_back(score_query(corpus.sentences[q.sentence], out.prototypes, params, flags, temperature));
  return out;
}

// Recomputes ŷ from the (detached) distances at another temperature.
inline std::vector<double> rescore(const QueryOutput& q, const std::vector<Tensor>& prototypes, double temperature,
                                   bool squared) {
  NoGradGuard guard;
  std::vector<Tensor> protos, reps;
  for (std::size_t i = 0; i < prototypes.size(); ++i) {
    protos.push_back(prototypes[i].detach());
    reps.push_back(q.reps[i].detach());
  }
  Tensor y = rank(protos, reps, temperature, squared);
  return {y.data().begin(), y.data().end()};
}

}  // namespace acd
