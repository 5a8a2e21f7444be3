#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "acd/config.hpp"
#include "acd/episode.hpp"
#include "acd/metrics.hpp"
#include "acd/model.hpp"
#include "acd/threshold.hpp"

namespace acd {

struct ThresholdMode {
  enum class Kind { Static, Dynamic };
  Kind kind = Kind::Static;
  double tau = 0.3;

  static ThresholdMode fixed(double tau) { return {Kind::Static, tau}; }
  static ThresholdMode dynamic() { return {Kind::Dynamic, 0.0}; }
  std::string name() const { return kind == Kind::Static ? "static" : "dynamic"; }
};

struct EpisodeReport {
  std::vector<std::string> classes;
  std::vector<std::vector<double>> scores;  // ŷ per query
  std::vector<std::vector<int>> labels;
  std::vector<LabelSet> predicted;
  std::vector<double> thresholds;           // per query
  std::optional<double> auc;
  double macro_f1 = 0.0;
};

struct EvalSummary {
  ThresholdMode mode;
  std::vector<double> aucs;      // episodes with a defined AUC
  std::vector<double> macro_f1s;
  std::size_t auc_skipped = 0;
  std::vector<EpisodeReport> episodes;  // only when requested
  double mean_auc() const { return mean_std(aucs).mean; }
  double mean_macro_f1() const { return mean_std(macro_f1s).mean; }
};

// Scores one episode. Static mode thresholds ŷ at the training temperature;
// dynamic mode thresholds ŷ at the policy temperature with the Beta mode.
inline EpisodeReport evaluate_episode(const MetaTask& task, const Corpus& corpus, const ModelParams& params,
                                      const PolicyParams* policy, const TrainConfig& cfg, const ThresholdMode& mode) {
  NoGradGuard no_grad;
  EpisodeOutput out = forward_episode(task, corpus, params, cfg.ablation, cfg.train_temperature);
  EpisodeReport rep;
  rep.classes = task.classes;
  std::vector<double> flat_scores;
  std::vector<int> flat_labels;
  for (std::size_t qi = 0; qi < task.queries.size(); ++qi) {
    const auto& q = out.queries[qi];
    std::vector<double> y(q.scores.data().begin(), q.scores.data().end());
    double tau = mode.tau;
    if (mode.kind == ThresholdMode::Kind::Dynamic) {
      y = rescore(q, out.prototypes, cfg.policy_temperature, params.config.squared_distance);
      auto beta = policy_forward(build_state(out.prototypes, q.reps, y), *policy).values();
      tau = beta_mode(beta.a, beta.b);
    }
    rep.predicted.push_back(apply_threshold(y, tau));
    rep.thresholds.push_back(tau);
    flat_scores.insert(flat_scores.end(), y.begin(), y.end());
    flat_labels.insert(flat_labels.end(), task.queries[qi].labels.begin(), task.queries[qi].labels.end());
    rep.scores.push_back(std::move(y));
    rep.labels.push_back(task.queries[qi].labels);
  }
  rep.auc = auc(flat_scores, flat_labels);
  rep.macro_f1 = macro_f1(rep.predicted, rep.labels, task.n_way());
  return rep;
}

// Mean episode metrics over `episodes` episodes drawn from the partition with
// the given seed.
inline EvalSummary evaluate(const ModelParams& params, const PolicyParams* policy, const Corpus& corpus,
                            const std::vector<std::string>& partition, const TrainConfig& cfg,
                            const ThresholdMode& mode, std::size_t episodes, std::uint64_t seed,
                            bool keep_episodes = false) {
  if (partition.empty()) throw ConfigError("evaluation partition is empty");
  if (mode.kind == ThresholdMode::Kind::Dynamic) {
    if (!policy) throw ConfigError("dynamic threshold requires policy parameters in the checkpoint");
    if (policy->n_way != cfg.shape.n_way)
      throw ConfigError("policy was trained for " + std::to_string(policy->n_way) + "-way episodes, requested " +
                        std::to_string(cfg.shape.n_way) + "-way");
  }
  EpisodeSampler sampler(corpus, partition, cfg.shape, seed);
  EvalSummary summary;
  summary.mode = mode;
  for (std::size_t e = 0; e < episodes; ++e) {
    MetaTask task = sampler.next();
    EpisodeReport rep = evaluate_episode(task, corpus, params, policy, cfg, mode);
    if (rep.auc) summary.aucs.push_back(*rep.auc);
    else ++summary.auc_skipped;
    summary.macro_f1s.push_back(rep.macro_f1);
    if (keep_episodes) summary.episodes.push_back(std::move(rep));
  }
  return summary;
}

inline nlohmann::json summary_to_json(const EvalSummary& s) {
  nlohmann::json j;
  j["threshold_mode"] = s.mode.name();
  if (s.mode.kind == ThresholdMode::Kind::Static) j["tau"] = s.mode.tau;
  j["auc_variant"] = "pooled (query, class) pairs per episode, averaged over episodes";
  j["episode_auc"] = s.aucs;
  j["episode_macro_f1"] = s.macro_f1s;
  j["auc_skipped_episodes"] = s.auc_skipped;
  j["mean_auc"] = s.mean_auc();
  j["mean_macro_f1"] = s.mean_macro_f1();
  return j;
}

}  // namespace acd
