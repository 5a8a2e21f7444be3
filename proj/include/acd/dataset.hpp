#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "acd/errors.hpp"
#include "acd/tensor.hpp"

namespace acd {

using json = nlohmann::json;

// Token → id map in first-occurrence order. Id 0 is reserved for tokens that
// were unseen when the vocabulary was built.
class Vocabulary {
 public:
  static constexpr const char* kUnknown = "<unk>";

  Vocabulary() { add(kUnknown); }
  explicit Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
    for (const auto& t : tokens) add(t);
  }

  std::size_t add(const std::string& token) {
    auto [it, inserted] = ids_.try_emplace(token, tokens_.size());
    if (inserted) tokens_.push_back(token);
    return it->second;
  }
  std::size_t id_or_unknown(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? 0 : it->second;
  }
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

struct Sentence {
  std::vector<std::string> words;
  std::vector<std::size_t> tokens;
  std::vector<std::string> aspects;  // sorted, unique

  std::size_t length() const { return tokens.size(); }
  bool has_aspect(const std::string& a) const {
    return std::binary_search(aspects.begin(), aspects.end(), a);
  }
};

// Sentences grouped by aspect category. A multi-aspect sentence is listed
// under every aspect it carries.
struct Corpus {
  Vocabulary vocab;
  std::vector<Sentence> sentences;
  std::vector<std::string> classes;  // first-occurrence order
  std::map<std::string, std::vector<std::size_t>> by_class;

  void add_sentence(std::vector<std::string> words, std::vector<std::string> labels,
                    bool grow_vocab = true) {
    if (words.empty()) throw ValidationError("sentence has no tokens");
    if (labels.empty()) throw ValidationError("sentence has no labels");
    Sentence s;
    s.tokens.reserve(words.size());
    for (const auto& w : words) s.tokens.push_back(grow_vocab ? vocab.add(w) : vocab.id_or_unknown(w));
    s.words = std::move(words);
    for (const auto& l : labels) {
      if (!by_class.count(l)) classes.push_back(l);
      auto& members = by_class[l];
      if (members.empty() || members.back() != sentences.size()) members.push_back(sentences.size());
    }
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    s.aspects = std::move(labels);
    sentences.push_back(std::move(s));
  }

  std::size_t class_size(const std::string& c) const {
    auto it = by_class.find(c);
    return it == by_class.end() ? 0 : it->second.size();
  }
};

inline std::vector<std::string> split_whitespace(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

namespace detail {

inline std::pair<std::vector<std::string>, std::vector<std::string>> parse_record(
    const std::string& line, std::size_t line_no) {
  json rec;
  try {
    rec = json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
  }
  if (!rec.is_object() || !rec.contains("text") || !rec["text"].is_string() ||
      !rec.contains("labels") || !rec["labels"].is_array())
    throw ParseError("line " + std::to_string(line_no) +
                     ": expected an object with string \"text\" and array \"labels\"");
  std::vector<std::string> labels;
  for (const auto& l : rec["labels"]) {
    if (!l.is_string()) throw ParseError("line " + std::to_string(line_no) + ": non-string label");
    labels.push_back(l.get<std::string>());
  }
  if (labels.empty()) throw ValidationError("line " + std::to_string(line_no) + ": empty label list");
  auto words = split_whitespace(rec["text"].get<std::string>());
  if (words.empty()) throw ValidationError("line " + std::to_string(line_no) + ": empty text");
  return {std::move(words), std::move(labels)};
}

inline void read_records(std::istream& in, Corpus& corpus, bool grow_vocab) {
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto [words, labels] = parse_record(line, line_no);
    corpus.add_sentence(std::move(words), std::move(labels), grow_vocab);
  }
}

}  // namespace detail

// Reads line-delimited {"text": ..., "labels": [...]} records and builds the
// vocabulary in first-occurrence order.
inline Corpus load_corpus(std::istream& in) {
  Corpus corpus;
  detail::read_records(in, corpus, true);
  return corpus;
}

inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open corpus file " + path);
  return load_corpus(in);
}

// Tokenizes against a fixed vocabulary (unseen words map to the unknown row).
inline Corpus load_corpus(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open corpus file " + path);
  Corpus corpus;
  corpus.vocab = vocab;
  detail::read_records(in, corpus, false);
  return corpus;
}

inline void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const auto& s : corpus.sentences) {
    std::string text;
    for (std::size_t i = 0; i < s.words.size(); ++i) text += (i ? " " : "") + s.words[i];
    json rec;
    rec["text"] = text;
    rec["labels"] = s.aspects;
    out << rec.dump() << '\n';
  }
}

inline void write_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write corpus file " + path);
  write_corpus(out, corpus);
  if (!out) throw ConfigError("failed while writing " + path);
}

// FNV-1a over the canonical serialization.
inline std::uint64_t corpus_hash(const Corpus& corpus) {
  std::ostringstream os;
  write_corpus(os, corpus);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : os.str()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Embeddings

struct EmbeddingTable {
  Vocabulary vocab;
  Tensor matrix;  // V×d_e, trainable
  std::size_t dim() const { return matrix.cols(); }
};

// Parameter init used across the model: N(0, 0.1) with 0.1 the standard deviation.
inline constexpr double kInitStddev = 0.1;

inline std::vector<double> sample_normal(std::size_t count, std::mt19937_64& rng,
                                         double stddev = kInitStddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> out(count);
  for (double& v : out) v = dist(rng);
  return out;
}

// Rows for tokens found in the GloVe-format stream are copied verbatim; every
// other row (including unknown) is drawn from N(0, 0.1).
inline EmbeddingTable load_embeddings(std::istream& in, const Vocabulary& vocab, std::size_t dim,
                                      std::mt19937_64& rng) {
  std::vector<double> values = sample_normal(vocab.size() * dim, rng);
  std::string line;
  std::size_t width = 0;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    std::istringstream is(line);
    std::string token;
    if (!(is >> token)) continue;
    std::vector<double> vec;
    for (std::string f; is >> f;) {
      try {
        std::size_t used = 0;
        vec.push_back(std::stod(f, &used));
        if (used != f.size()) throw std::invalid_argument(f);
      } catch (const std::exception&) {
        throw FormatError("embedding line " + std::to_string(line_no) + ": bad number '" + f + "'");
      }
    }
    if (width == 0) width = vec.size();
    if (vec.size() != width || width != dim)
      throw FormatError("embedding line " + std::to_string(line_no) + ": width " +
                        std::to_string(vec.size()) + ", expected " + std::to_string(width ? width : dim) +
                        (width != dim ? " (model embedding dim " + std::to_string(dim) + ")" : ""));
    if (!vocab.contains(token)) continue;
    const std::size_t id = vocab.id_or_unknown(token);
    std::copy(vec.begin(), vec.end(), values.begin() + static_cast<std::ptrdiff_t>(id * dim));
  }
  return {vocab, Tensor::matrix(vocab.size(), dim, std::move(values), true)};
}

inline EmbeddingTable load_embeddings(const std::string& path, const Vocabulary& vocab,
                                      std::size_t dim, std::mt19937_64& rng) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open embeddings file " + path);
  return load_embeddings(in, vocab, dim, rng);
}

inline EmbeddingTable random_embeddings(const Vocabulary& vocab, std::size_t dim, std::mt19937_64& rng) {
  std::istringstream empty;
  return load_embeddings(empty, vocab, dim, rng);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SyntheticConfig {
  std::size_t num_classes = 50;
  std::size_t sentences_per_class = 100;
  double multi_aspect_fraction = 0.3;
  std::size_t vocab_size = 600;
  std::size_t min_length = 8;
  std::size_t max_length = 16;
  std::size_t signal_tokens_per_class = 6;
  std::size_t signal_per_sentence = 2;  // per aspect carried
};

inline std::string synthetic_class_name(std::size_t c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "aspect_%03zu", c);
  return buf;
}

// Each class owns a disjoint pool of signal tokens; the rest of the vocabulary
// is shared background. A sentence carries signal tokens for each of its
// aspects scattered among background tokens.
inline Corpus generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (!(cfg.multi_aspect_fraction >= 0.0 && cfg.multi_aspect_fraction <= 1.0))
    throw ConfigError("multi_aspect_fraction must lie in [0, 1]");
  if (cfg.num_classes == 0 || cfg.sentences_per_class == 0)
    throw ConfigError("synthetic corpus needs at least one class and one sentence per class");
  if (cfg.multi_aspect_fraction > 0.0 && cfg.num_classes < 2)
    throw ConfigError("multi-aspect sentences need at least two classes");
  if (cfg.min_length == 0 || cfg.min_length > cfg.max_length)
    throw ConfigError("invalid sentence length range");
  if (cfg.signal_tokens_per_class == 0 || cfg.signal_per_sentence == 0)
    throw ConfigError("signal token counts must be positive");
  const std::size_t signal_total = cfg.num_classes * cfg.signal_tokens_per_class;
  if (cfg.vocab_size <= signal_total)
    throw ConfigError("vocab_size " + std::to_string(cfg.vocab_size) + " leaves no background tokens after " +
                      std::to_string(signal_total) + " signal tokens");
  if (2 * cfg.signal_per_sentence > cfg.min_length)
    throw ConfigError("min_length too short for the signal tokens of a two-aspect sentence");
  const std::size_t background = cfg.vocab_size - signal_total;

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len_dist(cfg.min_length, cfg.max_length);
  std::uniform_int_distribution<std::size_t> bg_dist(0, background - 1);
  std::uniform_int_distribution<std::size_t> sig_dist(0, cfg.signal_tokens_per_class - 1);
  std::uniform_int_distribution<std::size_t> other_dist(0, cfg.num_classes - 2);
  std::bernoulli_distribution multi(cfg.multi_aspect_fraction);

  auto signal_word = [](std::size_t c, std::size_t j) {
    return "s" + std::to_string(c) + "_" + std::to_string(j);
  };

  Corpus corpus;
  for (std::size_t c = 0; c < cfg.num_classes; ++c) corpus.classes.push_back(synthetic_class_name(c));
  for (const auto& name : corpus.classes) corpus.by_class[name];

  for (std::size_t i = 0; i < cfg.sentences_per_class; ++i) {
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
      std::vector<std::size_t> owners{c};
      if (multi(rng)) {
        std::size_t other = other_dist(rng);
        if (other >= c) ++other;
        owners.push_back(other);
      }
      const std::size_t len = len_dist(rng);
      std::vector<std::string> words(len);
      for (auto& w : words) w = "w" + std::to_string(bg_dist(rng));
      std::vector<std::size_t> slots(len);
      std::iota(slots.begin(), slots.end(), std::size_t{0});
      std::shuffle(slots.begin(), slots.end(), rng);
      std::size_t next_slot = 0;
      for (std::size_t owner : owners)
        for (std::size_t k = 0; k < cfg.signal_per_sentence; ++k)
          words[slots[next_slot++]] = signal_word(owner, sig_dist(rng));
      std::vector<std::string> labels;
      for (std::size_t owner : owners) labels.push_back(corpus.classes[owner]);
      corpus.add_sentence(std::move(words), std::move(labels));
    }
  }
  return corpus;
}

// Stand-in for pretrained word vectors over a synthetic vocabulary: each
// class's signal tokens sit near a per-class centroid and background tokens
// sit near one shared centroid. Coordinates are drawn from N(0, scale).
struct SyntheticEmbeddingConfig {
  std::size_t dim = 50;
  double scale = 0.5;
  double signal_noise = 0.5;      // spread of signal tokens around their class centroid
  double background_noise = 0.5;  // spread of background tokens around the shared centroid
  std::size_t signal_rank = 8;    // class centroids span this many random directions; 0 = all of them
};

inline std::vector<std::pair<std::string, std::vector<double>>> generate_synthetic_embeddings(
    const SyntheticConfig& corpus_cfg, const SyntheticEmbeddingConfig& cfg, std::uint64_t seed) {
  if (cfg.dim == 0 || !(cfg.scale > 0.0) || cfg.signal_noise < 0.0 || cfg.background_noise < 0.0)
    throw ConfigError("synthetic embeddings need dim > 0, scale > 0 and non-negative noise");
  if (cfg.signal_rank > cfg.dim)
    throw ConfigError("synthetic embedding signal_rank " + std::to_string(cfg.signal_rank) + " exceeds dim " +
                      std::to_string(cfg.dim));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, cfg.scale);
  auto draw = [&](double s) {
    std::vector<double> v(cfg.dim);
    for (double& x : v) x = s * normal(rng);
    return v;
  };
  const std::size_t rank = cfg.signal_rank == 0 ? cfg.dim : cfg.signal_rank;
  std::vector<std::vector<double>> basis;
  if (rank < cfg.dim) {
    std::normal_distribution<double> unit(0.0, 1.0);
    for (std::size_t r = 0; r < rank; ++r) {
      std::vector<double> v(cfg.dim);
      for (double& x : v) x = unit(rng);
      basis.push_back(std::move(v));
    }
  }
  auto draw_centroid = [&]() {
    if (basis.empty()) return draw(1.0);
    // Keep the per-coordinate variance at scale² while confining the direction.
    std::vector<double> v(cfg.dim, 0.0);
    const double norm = 1.0 / std::sqrt(static_cast<double>(rank));
    for (const auto& b : basis) {
      const double z = normal(rng) * norm;
      for (std::size_t k = 0; k < cfg.dim; ++k) v[k] += z * b[k];
    }
    return v;
  };
  std::vector<std::pair<std::string, std::vector<double>>> out;
  for (std::size_t c = 0; c < corpus_cfg.num_classes; ++c) {
    std::vector<double> centroid = draw_centroid();
    for (std::size_t j = 0; j < corpus_cfg.signal_tokens_per_class; ++j) {
      std::vector<double> v = draw(cfg.signal_noise);
      for (std::size_t k = 0; k < cfg.dim; ++k) v[k] += centroid[k];
      out.emplace_back("s" + std::to_string(c) + "_" + std::to_string(j), std::move(v));
    }
  }
  const std::size_t background = corpus_cfg.vocab_size - corpus_cfg.num_classes * corpus_cfg.signal_tokens_per_class;
  const std::vector<double> shared = draw(1.0);
  for (std::size_t j = 0; j < background; ++j) {
    std::vector<double> v = draw(cfg.background_noise);
    for (std::size_t k = 0; k < cfg.dim; ++k) v[k] += shared[k];
    out.emplace_back("w" + std::to_string(j), std::move(v));
  }
  return out;
}

// GloVe text format: token followed by space-separated values.
inline void write_embeddings(std::ostream& out, const std::vector<std::pair<std::string, std::vector<double>>>& rows) {
  char buf[32];
  for (const auto& [token, vec] : rows) {
    out << token;
    for (double v : vec) {
      std::snprintf(buf, sizeof buf, " %.6f", v);
      out << buf;
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Class splits

struct ClassSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;

  const std::vector<std::string>& partition(const std::string& name) const {
    if (name == "train") return train;
    if (name == "validation" || name == "val") return validation;
    if (name == "test") return test;
    throw ConfigError("unknown partition '" + name + "'");
  }
};

inline void validate_split(const ClassSplit& split, const std::vector<std::string>* universe = nullptr) {
  std::set<std::string> seen;
  for (const auto* part : {&split.train, &split.validation, &split.test})
    for (const auto& c : *part)
      if (!seen.insert(c).second) throw ValidationError("class '" + c + "' appears in more than one partition");
  if (universe) {
    std::set<std::string> all(universe->begin(), universe->end());
    for (const auto& c : seen)
      if (!all.count(c)) throw ValidationError("split names unknown class '" + c + "'");
  }
}

// Shuffles the class list under the seed and cuts it into the given counts,
// which must sum to the number of classes.
inline ClassSplit split_classes(const std::vector<std::string>& classes, std::size_t n_train,
                                std::size_t n_val, std::size_t n_test, std::uint64_t seed) {
  if (n_train + n_val + n_test != classes.size())
    throw ValidationError("split sizes " + std::to_string(n_train) + "+" + std::to_string(n_val) + "+" +
                          std::to_string(n_test) + " do not sum to class count " +
                          std::to_string(classes.size()));
  std::vector<std::string> shuffled = classes;
  std::mt19937_64 rng(seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  ClassSplit split;
  auto it = shuffled.begin();
  split.train.assign(it, it + static_cast<std::ptrdiff_t>(n_train));
  it += static_cast<std::ptrdiff_t>(n_train);
  split.validation.assign(it, it + static_cast<std::ptrdiff_t>(n_val));
  it += static_cast<std::ptrdiff_t>(n_val);
  split.test.assign(it, shuffled.end());
  validate_split(split);
  return split;
}

// Explicit lists are checked for disjointness and returned unchanged.
inline ClassSplit split_classes(ClassSplit explicit_lists) {
  validate_split(explicit_lists);
  return explicit_lists;
}

// Counts proportional to the given weights; rounding remainder goes to train.
inline ClassSplit split_classes_by_ratio(const std::vector<std::string>& classes, double w_train,
                                         double w_val, double w_test, std::uint64_t seed) {
  const double total = w_train + w_val + w_test;
  if (!(total > 0.0) || w_train < 0 || w_val < 0 || w_test < 0)
    throw ValidationError("split ratios must be non-negative with a positive sum");
  const auto n = static_cast<double>(classes.size());
  const auto n_val = static_cast<std::size_t>(std::llround(n * w_val / total));
  const auto n_test = static_cast<std::size_t>(std::llround(n * w_test / total));
  if (n_val + n_test > classes.size()) throw ValidationError("split ratios exceed class count");
  return split_classes(classes, classes.size() - n_val - n_test, n_val, n_test, seed);
}

inline json split_to_json(const ClassSplit& s) {
  return {{"train", s.train}, {"validation", s.validation}, {"test", s.test}};
}

inline ClassSplit split_from_json(const json& j) {
  ClassSplit s;
  try {
    s.train = j.at("train").get<std::vector<std::string>>();
    s.validation = j.at("validation").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("split file: ") + e.what());
  }
  validate_split(s);
  return s;
}

}  // namespace acd
