#pragma once

#include <algorithm>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "acd/dataset.hpp"
#include "acd/errors.hpp"

namespace acd {

struct EpisodeShape {
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t queries_per_class = 5;
};

struct Query {
  std::size_t sentence = 0;   // index into the corpus
  std::vector<int> labels;    // y_q over the episode classes
};

// One N-way K-shot meta-task. support[i] holds sentence indices that all
// carry classes[i].
struct MetaTask {
  std::vector<std::string> classes;
  std::vector<std::vector<std::size_t>> support;
  std::vector<Query> queries;

  std::size_t n_way() const { return classes.size(); }
};

inline std::vector<int> label_vector(const Sentence& s, const std::vector<std::string>& classes) {
  std::vector<int> y(classes.size(), 0);
  for (std::size_t i = 0; i < classes.size(); ++i) y[i] = s.has_aspect(classes[i]) ? 1 : 0;
  return y;
}

// Draws episodes from one class partition with its own generator. Support
// sets of different classes may share a multi-aspect sentence; query
// sentences never repeat and never appear in the episode's support.
class EpisodeSampler {
 public:
  EpisodeSampler(const Corpus& corpus, std::vector<std::string> partition, EpisodeShape shape,
                 std::uint64_t seed)
      : corpus_(&corpus), partition_(std::move(partition)), shape_(shape), rng_(seed) {
    if (shape_.n_way == 0 || shape_.k_shot == 0 || shape_.queries_per_class == 0)
      throw ConfigError("episode shape counts must be positive");
    if (partition_.size() < shape_.n_way)
      throw SamplingError("partition has " + std::to_string(partition_.size()) + " classes, need " +
                          std::to_string(shape_.n_way));
    for (const auto& c : partition_) {
      const std::size_t have = corpus_->class_size(c);
      if (have < shape_.k_shot + shape_.queries_per_class)
        throw SamplingError("class '" + c + "' has " + std::to_string(have) + " sentences, need " +
                            std::to_string(shape_.k_shot + shape_.queries_per_class));
    }
  }

  const EpisodeShape& shape() const { return shape_; }

  MetaTask next() {
    MetaTask task;
    std::vector<std::string> pool = partition_;
    // Partial Fisher-Yates keeps the sampled order.
    for (std::size_t i = 0; i < shape_.n_way; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng_)]);
    }
    task.classes.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(shape_.n_way));

    std::set<std::size_t> used;
    std::vector<std::vector<std::size_t>> candidates(shape_.n_way);
    for (std::size_t i = 0; i < shape_.n_way; ++i) {
      std::vector<std::size_t> members = corpus_->by_class.at(task.classes[i]);
      shuffle_prefix(members, shape_.k_shot);
      task.support.emplace_back(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(shape_.k_shot));
      used.insert(task.support.back().begin(), task.support.back().end());
      candidates[i].assign(members.begin() + static_cast<std::ptrdiff_t>(shape_.k_shot), members.end());
    }
    for (std::size_t i = 0; i < shape_.n_way; ++i) {
      auto& rest = candidates[i];
      std::size_t taken = 0;
      // Draw without replacement, skipping anything already in the episode.
      for (std::size_t j = 0; j < rest.size() && taken < shape_.queries_per_class; ++j) {
        std::uniform_int_distribution<std::size_t> pick(j, rest.size() - 1);
        std::swap(rest[j], rest[pick(rng_)]);
        if (!used.insert(rest[j]).second) continue;
        task.queries.push_back({rest[j], label_vector(corpus_->sentences[rest[j]], task.classes)});
        ++taken;
      }
      if (taken < shape_.queries_per_class)
        throw SamplingError("class '" + task.classes[i] + "' ran out of sentences not already used in the episode");
    }
    return task;
  }

 private:
  void shuffle_prefix(std::vector<std::size_t>& v, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, v.size() - 1);
      std::swap(v[i], v[pick(rng_)]);
    }
  }

  const Corpus* corpus_;
  std::vector<std::string> partition_;
  EpisodeShape shape_;
  std::mt19937_64 rng_;
};

// Audit record for one episode: classes, support texts, queries with labels.
inline nlohmann::json episode_to_json(const MetaTask& task, const Corpus& corpus) {
  auto text = [&](std::size_t idx) {
    std::string t;
    for (const auto& w : corpus.sentences[idx].words) t += (t.empty() ? "" : " ") + w;
    return t;
  };
  nlohmann::json j;
  j["classes"] = task.classes;
  j["support"] = nlohmann::json::array();
  for (const auto& group : task.support) {
    nlohmann::json g = nlohmann::json::array();
    for (std::size_t idx : group) g.push_back({{"sentence", idx}, {"text", text(idx)}});
    j["support"].push_back(g);
  }
  j["queries"] = nlohmann::json::array();
  for (const auto& q : task.queries)
    j["queries"].push_back({{"sentence", q.sentence}, {"text", text(q.sentence)}, {"labels", q.labels}});
  return j;
}

}  // namespace acd
