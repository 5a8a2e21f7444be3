// acd: command-line driver for corpus generation, class splits, training,
// evaluation and vector export.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "acd/acd.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

// Writes through a sibling temporary file so a failed command never leaves a
// partial artifact behind.
void write_atomically(const std::string& path, const std::function<void(std::ostream&)>& body,
                      bool binary = false) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, binary ? std::ios::binary : std::ios::out);
    if (!out) throw acd::ConfigError("cannot write " + path);
    body(out);
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw acd::ConfigError("failed while writing " + path);
    }
  }
  fs::rename(tmp, path);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw acd::ConfigError("bad seed '" + item + "' in --seeds");
    }
  }
  if (seeds.empty()) throw acd::ConfigError("--seeds is empty");
  return seeds;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw acd::ConfigError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw acd::ParseError(path + ": " + e.what());
  }
}

// Shared run options. Fields stay empty unless given on the command line so
// that a config file can fill them first.
struct RunOptions {
  std::string config_path;
  std::optional<std::size_t> n, k, q, episodes, val_episodes, test_episodes, max_epochs, patience, repeat, dim;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, policy_lr, joint_lr, tau;
  std::optional<std::string> ablation;
  bool squared = false;

  void add_to(CLI::App& app) {
    app.add_option("--config", config_path, "JSON config file (flags take precedence)");
    app.add_option("--n", n, "classes per episode (N)");
    app.add_option("--k", k, "support sentences per class (K)");
    app.add_option("--q", q, "query sentences per class");
    app.add_option("--seed", seed, "run seed");
    app.add_option("--episodes", episodes, "training episodes per epoch");
    app.add_option("--val-episodes", val_episodes, "validation episodes per epoch");
    app.add_option("--test-episodes", test_episodes, "evaluation episodes");
    app.add_option("--max-epochs", max_epochs, "epoch cap");
    app.add_option("--patience", patience, "early-stopping patience in epochs");
    app.add_option("--lr", lr, "stage-1 learning rate");
    app.add_option("--policy-lr", policy_lr, "policy learning rate");
    app.add_option("--joint-lr", joint_lr, "main-network learning rate during the policy stage");
    app.add_option("--repeat", repeat, "repeat count e_M");
    app.add_option("--dim", dim, "embedding and hidden width");
    app.add_option("--ablation", ablation, "comma list of no-sa, no-wi, no-qa, no-dt");
    app.add_flag("--squared-distance", squared, "use squared Euclidean distance");
  }

  acd::TrainConfig resolve() const {
    acd::TrainConfig cfg;
    if (!config_path.empty()) cfg = read_json_file(config_path).get<acd::TrainConfig>();
    if (n) cfg.shape.n_way = *n;
    if (k) cfg.shape.k_shot = *k;
    if (q) cfg.shape.queries_per_class = *q;
    if (seed) cfg.seed = *seed;
    if (episodes) cfg.episodes_per_epoch = *episodes;
    if (val_episodes) cfg.val_episodes = *val_episodes;
    if (test_episodes) cfg.test_episodes = *test_episodes;
    if (max_epochs) cfg.max_epochs = *max_epochs;
    if (patience) cfg.patience = *patience;
    if (lr) cfg.learning_rate = *lr;
    if (policy_lr) cfg.policy_learning_rate = *policy_lr;
    if (joint_lr) cfg.joint_learning_rate = *joint_lr;
    if (repeat) cfg.model.repeat = *repeat;
    if (dim) cfg.model.embedding_dim = cfg.model.hidden_dim = *dim;
    if (ablation) cfg.ablation = acd::parse_ablation(*ablation);
    if (squared) cfg.model.squared_distance = true;
    if (tau) cfg.static_threshold = *tau;
    cfg.validate();
    return cfg;
  }
};

// ---------------------------------------------------------------------------

struct GenDataArgs {
  acd::SyntheticConfig corpus;
  acd::SyntheticEmbeddingConfig embeddings;
  std::optional<std::size_t> vocab;
  std::uint64_t seed = 5;
  std::string out;
  std::string embeddings_out;
};

// Background tokens left over when --vocab is not given.
constexpr std::size_t kDefaultBackgroundTokens = 300;

int cmd_gen_data(GenDataArgs a) {
  a.corpus.vocab_size =
      a.vocab.value_or(a.corpus.num_classes * a.corpus.signal_tokens_per_class + kDefaultBackgroundTokens);
  acd::Corpus corpus = acd::generate_synthetic(a.corpus, a.seed);
  write_atomically(a.out, [&](std::ostream& os) { acd::write_corpus(os, corpus); });
  if (!a.embeddings_out.empty()) {
    auto rows = acd::generate_synthetic_embeddings(a.corpus, a.embeddings, a.seed + 1);
    write_atomically(a.embeddings_out, [&](std::ostream& os) { acd::write_embeddings(os, rows); });
  }
  std::cout << json{{"sentences", corpus.sentences.size()},
                    {"classes", corpus.classes.size()},
                    {"vocabulary", corpus.vocab.size()},
                    {"hash", corpus_hash(corpus)}}
                   .dump()
            << '\n';
  return 0;
}

struct SplitArgs {
  std::string corpus;
  std::vector<std::size_t> counts;
  std::vector<double> ratios;
  std::uint64_t seed = 5;
  std::string out;
};

int cmd_split(const SplitArgs& a) {
  acd::Corpus corpus = acd::load_corpus(a.corpus);
  acd::ClassSplit split;
  if (!a.counts.empty()) {
    if (a.counts.size() != 3) throw acd::ConfigError("--counts takes train,val,test");
    split = acd::split_classes(corpus.classes, a.counts[0], a.counts[1], a.counts[2], a.seed);
  } else {
    const auto& r = a.ratios.empty() ? std::vector<double>{64, 16, 20} : a.ratios;
    if (r.size() != 3) throw acd::ConfigError("--ratios takes train,val,test");
    split = acd::split_classes_by_ratio(corpus.classes, r[0], r[1], r[2], a.seed);
  }
  write_atomically(a.out, [&](std::ostream& os) { os << acd::split_to_json(split).dump(2) << '\n'; });
  return 0;
}

struct TrainArgs {
  RunOptions run;
  std::string corpus, split, embeddings, from, out, log;
  std::string stage = "main";
  bool dump_config = false;
};

acd::EmbeddingTable build_embeddings(const std::string& path, const acd::Vocabulary& vocab, std::size_t dim,
                                     std::mt19937_64& rng) {
  return path.empty() ? acd::random_embeddings(vocab, dim, rng) : acd::load_embeddings(path, vocab, dim, rng);
}

int cmd_train(const TrainArgs& a) {
  acd::TrainConfig cfg = a.run.resolve();
  if (a.dump_config) {
    std::cout << json(cfg).dump(2) << '\n';
    return 0;
  }
  if (a.stage != "main" && a.stage != "dt" && a.stage != "both")
    throw acd::ConfigError("--stage must be main, dt or both");
  if (a.stage == "dt" && a.from.empty())
    throw acd::ConfigError("--stage dt needs a stage-1 checkpoint (--from)");
  if (a.corpus.empty() || a.split.empty() || a.out.empty())
    throw acd::ConfigError("train needs --corpus, --split and --out");

  acd::ClassSplit split = acd::split_from_json(read_json_file(a.split));
  std::optional<acd::Checkpoint> initial;
  acd::Corpus corpus;
  if (!a.from.empty()) {
    initial = acd::load_checkpoint(a.from);
    cfg.model = initial->model.config;
    corpus = acd::load_corpus(a.corpus, initial->model.embeddings.vocab);
  } else {
    corpus = acd::load_corpus(a.corpus);
  }
  acd::validate_split(split, &corpus.classes);

  std::ofstream log_stream;
  if (!a.log.empty()) {
    log_stream.open(a.log);
    if (!log_stream) throw acd::ConfigError("cannot write log " + a.log);
  }
  auto on_epoch = [&](const char* stage) {
    return [&, stage](const acd::EpochRecord& r) {
      json rec = acd::to_json_record(r);
      rec["stage"] = stage;
      std::cerr << rec.dump() << '\n';
      if (log_stream) log_stream << rec.dump() << '\n' << std::flush;
    };
  };

  acd::ModelParams model;
  if (a.stage == "dt") {
    model = initial->model;
  } else {
    std::mt19937_64 rng(cfg.seed);
    acd::ModelParams start = initial ? initial->model
                                     : acd::init_model(cfg.model,
                                                       build_embeddings(a.embeddings, corpus.vocab,
                                                                        cfg.model.embedding_dim, rng),
                                                       rng);
    model = acd::train_main(corpus, split, cfg, start, on_epoch("main")).model;
  }
  acd::Checkpoint ckpt{model, std::nullopt, json(cfg)};
  if (a.stage != "main") {
    auto seed_policy = initial ? initial->policy : std::nullopt;
    acd::TrainResult joint = acd::train_policy(corpus, split, cfg, model, seed_policy, on_epoch("dt"));
    ckpt.model = joint.model;
    ckpt.policy = joint.policy;
  }
  write_atomically(a.out, [&](std::ostream& os) { acd::save_checkpoint(os, ckpt); }, true);
  if (log_stream && !log_stream.flush()) throw acd::ConfigError("failed while writing " + a.log);
  return 0;
}

struct EvalArgs {
  RunOptions run;
  std::string corpus, split, checkpoint, report;
  std::string partition = "test";
  std::string threshold = "static";
  std::string seeds;
  bool per_episode = false;
};

int cmd_eval(EvalArgs a) {
  acd::Checkpoint ckpt = acd::load_checkpoint(a.checkpoint);
  // The checkpoint's run config is the base layer under any --config and flags.
  acd::TrainConfig base = ckpt.config.is_object() ? ckpt.config.get<acd::TrainConfig>() : acd::TrainConfig{};
  if (a.run.config_path.empty()) {
    if (!a.run.n) a.run.n = base.shape.n_way;
    if (!a.run.k) a.run.k = base.shape.k_shot;
    if (!a.run.q) a.run.q = base.shape.queries_per_class;
    if (!a.run.test_episodes) a.run.test_episodes = base.test_episodes;
  }
  acd::TrainConfig cfg = a.run.resolve();
  cfg.model = ckpt.model.config;
  if (!a.run.ablation && a.run.config_path.empty()) cfg.ablation = base.ablation;

  acd::ThresholdMode mode;
  if (a.threshold == "static") {
    mode = acd::ThresholdMode::fixed(acd::static_threshold_for(cfg));
  } else if (a.threshold == "dynamic") {
    if (cfg.ablation.no_dynamic_threshold) throw acd::ConfigError("--threshold dynamic conflicts with --ablation no-dt");
    mode = acd::ThresholdMode::dynamic();
  } else {
    throw acd::ConfigError("--threshold must be static or dynamic");
  }
  const std::vector<std::uint64_t> seeds = a.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : parse_seed_list(a.seeds);

  acd::Corpus corpus = acd::load_corpus(a.corpus, ckpt.model.embeddings.vocab);
  acd::ClassSplit split = acd::split_from_json(read_json_file(a.split));
  acd::validate_split(split, &corpus.classes);
  const auto& partition = split.partition(a.partition);
  const acd::PolicyParams* policy = ckpt.policy ? &*ckpt.policy : nullptr;

  json report;
  report["config"] = json(cfg);
  report["partition"] = a.partition;
  report["threshold_mode"] = mode.name();
  if (mode.kind == acd::ThresholdMode::Kind::Static) report["tau"] = mode.tau;
  report["auc_variant"] = "pooled (query, class) pairs per episode, averaged over episodes";
  report["runs"] = json::array();
  std::vector<double> aucs, f1s;
  for (std::uint64_t seed : seeds) {
    acd::EvalSummary s = acd::evaluate(ckpt.model, policy, corpus, partition, cfg, mode, cfg.test_episodes, seed);
    json run = acd::summary_to_json(s);
    run["seed"] = seed;
    if (!a.per_episode) {
      run.erase("episode_auc");
      run.erase("episode_macro_f1");
    }
    report["runs"].push_back(run);
    aucs.push_back(s.mean_auc());
    f1s.push_back(s.mean_macro_f1());
    if (s.auc_skipped) std::cerr << "warning: " << s.auc_skipped << " episodes had an undefined AUC and were skipped\n";
  }
  const acd::MeanStd auc_ms = acd::mean_std(aucs), f1_ms = acd::mean_std(f1s);
  report["summary"] = {{"mean_auc", auc_ms.mean}, {"std_auc", auc_ms.stddev},
                       {"mean_macro_f1", f1_ms.mean}, {"std_macro_f1", f1_ms.stddev}};
  std::cout << report["summary"].dump() << '\n';
  if (!a.report.empty())
    write_atomically(a.report, [&](std::ostream& os) { os << report.dump(2) << '\n'; });
  return 0;
}

struct ExportArgs {
  RunOptions run;
  std::string corpus, split, checkpoint, out;
  std::string partition = "test";
  std::size_t count = 1;
};

// One CSV row per vector: episode, kind (prototype or query), class, query
// index, then the d coordinates.
int cmd_export_vectors(ExportArgs a) {
  acd::Checkpoint ckpt = acd::load_checkpoint(a.checkpoint);
  acd::TrainConfig base = ckpt.config.is_object() ? ckpt.config.get<acd::TrainConfig>() : acd::TrainConfig{};
  if (a.run.config_path.empty()) {
    if (!a.run.n) a.run.n = base.shape.n_way;
    if (!a.run.k) a.run.k = base.shape.k_shot;
    if (!a.run.q) a.run.q = base.shape.queries_per_class;
  }
  acd::TrainConfig cfg = a.run.resolve();
  if (!a.run.ablation && a.run.config_path.empty()) cfg.ablation = base.ablation;
  acd::Corpus corpus = acd::load_corpus(a.corpus, ckpt.model.embeddings.vocab);
  acd::ClassSplit split = acd::split_from_json(read_json_file(a.split));
  acd::EpisodeSampler sampler(corpus, split.partition(a.partition), cfg.shape, cfg.seed);
  write_atomically(a.out, [&](std::ostream& os) {
    const std::size_t d = ckpt.model.config.hidden_dim;
    os << "episode,kind,class,query";
    for (std::size_t j = 0; j < d; ++j) os << ",x" << j;
    os << '\n';
    char buf[40];
    auto row = [&](std::size_t e, const char* kind, const std::string& cls, const std::string& q,
                   const acd::Tensor& v) {
      os << e << ',' << kind << ',' << cls << ',' << q;
      for (double x : v.data()) {
        std::snprintf(buf, sizeof buf, ",%.17g", x);
        os << buf;
      }
      os << '\n';
    };
    acd::NoGradGuard no_grad;
    for (std::size_t e = 0; e < a.count; ++e) {
      acd::MetaTask task = sampler.next();
      acd::EpisodeOutput out = acd::forward_episode(task, corpus, ckpt.model, cfg.ablation, cfg.train_temperature);
      for (std::size_t i = 0; i < task.n_way(); ++i) row(e, "prototype", task.classes[i], "", out.prototypes[i]);
      for (std::size_t qi = 0; qi < task.queries.size(); ++qi)
        for (std::size_t i = 0; i < task.n_way(); ++i)
          row(e, "query", task.classes[i], std::to_string(qi), out.queries[qi].reps[i]);
    }
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-label few-shot aspect category detection"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic multi-aspect corpus");
  gen_cmd->add_option("--classes", gen.corpus.num_classes, "number of aspect classes")->capture_default_str();
  gen_cmd->add_option("--per-class", gen.corpus.sentences_per_class, "sentences seeded per class")->capture_default_str();
  gen_cmd->add_option("--multi-frac", gen.corpus.multi_aspect_fraction, "fraction of two-aspect sentences")
      ->capture_default_str();
  gen_cmd->add_option("--vocab", gen.vocab, "vocabulary size (default: signal tokens + 300)");
  gen_cmd->add_option("--min-length", gen.corpus.min_length)->capture_default_str();
  gen_cmd->add_option("--max-length", gen.corpus.max_length)->capture_default_str();
  gen_cmd->add_option("--signal-tokens", gen.corpus.signal_tokens_per_class, "signal tokens owned by each class")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "corpus output path")->required();
  gen_cmd->add_option("--emit-embeddings", gen.embeddings_out, "also write synthetic GloVe-format vectors here");
  gen_cmd->add_option("--dim", gen.embeddings.dim, "width of the emitted vectors")->capture_default_str();

  SplitArgs sp;
  auto* split_cmd = app.add_subcommand("split", "split the class list into train/validation/test");
  split_cmd->add_option("--corpus", sp.corpus)->required();
  split_cmd->add_option("--counts", sp.counts, "class counts train,val,test")->delimiter(',');
  split_cmd->add_option("--ratios", sp.ratios, "class ratios train,val,test (default 64,16,20)")->delimiter(',');
  split_cmd->add_option("--seed", sp.seed)->capture_default_str();
  split_cmd->add_option("--out", sp.out)->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train the main network and optionally the threshold policy");
  tr.run.add_to(*train_cmd);
  train_cmd->add_option("--corpus", tr.corpus);
  train_cmd->add_option("--split", tr.split);
  train_cmd->add_option("--embeddings", tr.embeddings, "GloVe-format vectors (default: random init)");
  train_cmd->add_option("--stage", tr.stage, "main, dt or both")->capture_default_str();
  train_cmd->add_option("--from", tr.from, "checkpoint to start from (required for --stage dt)");
  train_cmd->add_option("--out", tr.out, "checkpoint output path");
  train_cmd->add_option("--log", tr.log, "line-delimited JSON training log");
  train_cmd->add_flag("--dump-config", tr.dump_config, "print the resolved config and exit");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on sampled episodes");
  ev.run.add_to(*eval_cmd);
  eval_cmd->add_option("--corpus", ev.corpus)->required();
  eval_cmd->add_option("--split", ev.split)->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--partition", ev.partition)->capture_default_str();
  eval_cmd->add_option("--threshold", ev.threshold, "static or dynamic")->capture_default_str();
  eval_cmd->add_option("--tau", ev.run.tau, "static threshold (default 0.3 for N < 10, else 0.2)");
  eval_cmd->add_option("--seeds", ev.seeds, "comma list of evaluation seeds");
  eval_cmd->add_option("--report", ev.report, "JSON report path");
  eval_cmd->add_flag("--per-episode", ev.per_episode, "include per-episode metric arrays in the report");

  ExportArgs ex;
  auto* export_cmd = app.add_subcommand("export-vectors", "dump prototypes and query representations as CSV");
  ex.run.add_to(*export_cmd);
  export_cmd->add_option("--corpus", ex.corpus)->required();
  export_cmd->add_option("--split", ex.split)->required();
  export_cmd->add_option("--checkpoint", ex.checkpoint)->required();
  export_cmd->add_option("--partition", ex.partition)->capture_default_str();
  export_cmd->add_option("--count", ex.count, "episodes to export")->capture_default_str();
  export_cmd->add_option("--out", ex.out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*split_cmd) return cmd_split(sp);
    if (*train_cmd) return cmd_train(tr);
    if (*eval_cmd) return cmd_eval(ev);
    if (*export_cmd) return cmd_export_vectors(ex);
  } catch (const acd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const acd::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const acd::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
