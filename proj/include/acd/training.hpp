#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "acd/config.hpp"
#include "acd/evaluation.hpp"
#include "acd/model.hpp"
#include "acd/tensor.hpp"
#include "acd/threshold.hpp"

namespace acd {

// Σ_i (ŷ_i - y_i / |y|₁)²
inline Tensor mse_loss(const Tensor& scores, std::span<const int> labels) {
  if (scores.numel() != labels.size()) throw ShapeError("mse_loss: score and label lengths differ");
  double positives = 0.0;
  for (int l : labels) positives += l != 0;
  if (positives == 0.0) throw ContractError("mse_loss requires at least one positive label");
  std::vector<double> target(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) target[i] = labels[i] ? 1.0 / positives : 0.0;
  return sum(square(sub(scores, Tensor(scores.shape(), std::move(target)))));
}

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Parameters that received
// no gradient since the last zero_grad() are skipped.
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor>> params, AdamOptions opts)
      : params_(std::move(params)), opts_(opts) {
    for (const auto& [_, p] : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step() {
    for (const auto& [name, p] : params_)
      if (p.has_grad())
        for (double g : p.grad())
          if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + name + "'");
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(opts_.beta1, t);
    const double c2 = 1.0 - std::pow(opts_.beta2, t);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k].second;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
        w[i] -= opts_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + opts_.epsilon);
      }
    }
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::size_t steps() const { return steps_; }
  const std::vector<double>& first_moment(std::size_t k) const { return m_.at(k); }
  const std::vector<double>& second_moment(std::size_t k) const { return v_.at(k); }
  void set_learning_rate(double lr) { opts_.learning_rate = lr; }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t steps_ = 0;
};

// Stops once `patience` consecutive epochs fail to beat the best value.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw ConfigError("patience must be at least 1");
  }
  // Returns true when the value is a new best.
  bool update(double value) {
    ++epoch_;
    if (!best_ || value > *best_) {
      best_ = value;
      best_epoch_ = epoch_;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }
  bool should_stop() const { return stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_value() const { return best_.value_or(0.0); }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
  std::optional<double> best_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_auc = 0.0;
  double val_macro_f1 = 0.0;
  // Policy stage only.
  std::optional<double> policy_loss;
  std::optional<double> val_dynamic_macro_f1;
  std::optional<double> mean_threshold;
};

inline nlohmann::json to_json_record(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_auc", r.val_auc},
                      {"val_macro_f1", r.val_macro_f1}};
  if (r.policy_loss) j["policy_loss"] = *r.policy_loss;
  if (r.val_dynamic_macro_f1) j["val_dynamic_macro_f1"] = *r.val_dynamic_macro_f1;
  if (r.mean_threshold) j["mean_threshold"] = *r.mean_threshold;
  return j;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

struct TrainResult {
  ModelParams model;
  std::optional<PolicyParams> policy;
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_value = 0.0;
};

// Seed offsets so training, validation and policy sampling draw from
// independent streams.
inline constexpr std::uint64_t kValidationSeedOffset = 1000003;
inline constexpr std::uint64_t kPolicySeedOffset = 2000003;

// One optimizer step on the summed per-query MSE of an episode. Returns the
// episode loss.
inline double train_episode(const MetaTask& task, const Corpus& corpus, const ModelParams& params,
                            const TrainConfig& cfg, Adam& opt) {
  opt.zero_grad();
  EpisodeOutput out = forward_episode(task, corpus, params, cfg.ablation, cfg.train_temperature);
  std::vector<Tensor> losses;
  for (std::size_t q = 0; q < task.queries.size(); ++q)
    losses.push_back(mse_loss(out.queries[q].scores, task.queries[q].labels));
  Tensor loss = sum(concat(losses));
  const double value = loss.item();
  if (!std::isfinite(value)) throw NumericError("non-finite training loss");
  backward(loss);
  opt.step();
  return value;
}

// Stage 1: episodic MSE training with early stopping on validation AUC.
inline TrainResult train_main(const Corpus& corpus, const ClassSplit& split, const TrainConfig& cfg,
                              const ModelParams& initial, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  ModelParams params = initial.clone();
  ModelParams best = params.clone();
  Adam opt(params.named_parameters(), {cfg.learning_rate});
  EpisodeSampler sampler(corpus, split.train, cfg.shape, cfg.seed);
  EarlyStopping stopper(cfg.patience);
  TrainResult result;
  const ThresholdMode static_mode = ThresholdMode::fixed(static_threshold_for(cfg));

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double total = 0.0;
    for (std::size_t e = 0; e < cfg.episodes_per_epoch; ++e) total += train_episode(sampler.next(), corpus, params, cfg, opt);
    EvalSummary val = evaluate(params, nullptr, corpus, split.validation, cfg, static_mode, cfg.val_episodes,
                               cfg.seed + kValidationSeedOffset);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(cfg.episodes_per_epoch);
    rec.val_auc = val.mean_auc();
    rec.val_macro_f1 = val.mean_macro_f1();
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopper.update(rec.val_auc)) best = params.clone();
    if (stopper.should_stop()) break;
  }
  result.model = std::move(best);
  result.best_epoch = stopper.best_epoch();
  result.best_value = stopper.best_value();
  return result;
}

struct PolicyStepStats {
  double loss = 0.0;
  double mean_threshold = 0.0;
};

// Accumulates the policy objective over an episode's queries and takes one
// policy optimizer step. The main network's outputs enter as constants.
inline PolicyStepStats policy_episode(const MetaTask& task, const EpisodeOutput& out, const ModelParams& params,
                                      const PolicyParams& policy, const TrainConfig& cfg, Adam& opt,
                                      std::mt19937_64& rng) {
  opt.zero_grad();
  std::vector<Tensor> losses;
  PolicyStepStats stats;
  for (std::size_t qi = 0; qi < task.queries.size(); ++qi) {
    const auto& q = out.queries[qi];
    std::vector<double> y = rescore(q, out.prototypes, cfg.policy_temperature, params.config.squared_distance);
    std::vector<Tensor> protos, reps;
    for (std::size_t i = 0; i < out.prototypes.size(); ++i) {
      protos.push_back(out.prototypes[i].detach());
      reps.push_back(q.reps[i].detach());
    }
    PolicyOutput beta = policy_forward(build_state(protos, reps, y), policy);
    const BetaParams bp = beta.values();
    const double tau = sample_threshold(bp, rng);
    const double mode = beta_mode(bp.a, bp.b);
    const LabelSet truth = positives(task.queries[qi].labels);
    const double score = instance_f1(apply_threshold(y, tau), truth);
    const double baseline = instance_f1(apply_threshold(y, mode), truth);
    losses.push_back(policy_loss(score, baseline, beta_log_pdf(tau, beta.a, beta.b)));
    stats.mean_threshold += tau;
  }
  Tensor loss = sum(concat(losses));
  stats.loss = loss.item();
  stats.mean_threshold /= static_cast<double>(task.queries.size());
  backward(loss);
  opt.step();
  return stats;
}

// Stage 2: starts from the stage-1 parameters and trains the threshold policy
// jointly with the main network (which keeps its MSE objective). Model
// selection uses validation macro-F1 under the dynamic threshold.
inline TrainResult train_policy(const Corpus& corpus, const ClassSplit& split, const TrainConfig& cfg,
                                const ModelParams& stage1, const std::optional<PolicyParams>& initial_policy = {},
                                const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (!stage1.conv_kernel.defined()) throw ConfigError("policy training needs a stage-1 checkpoint");
  ModelParams params = stage1.clone();
  std::mt19937_64 init_rng(cfg.seed + kPolicySeedOffset);
  PolicyParams policy = initial_policy ? initial_policy->clone()
                                       : init_policy(cfg.shape.n_way, params.config.hidden_dim, cfg.policy_width, init_rng);
  if (policy.n_way != cfg.shape.n_way) throw ConfigError("policy N does not match the episode N");

  Adam main_opt(params.named_parameters(), {cfg.joint_learning_rate});
  Adam policy_opt(policy.named_parameters(), {cfg.policy_learning_rate});
  EpisodeSampler sampler(corpus, split.train, cfg.shape, cfg.seed + kPolicySeedOffset);
  std::mt19937_64 action_rng(cfg.seed + 2 * kPolicySeedOffset);
  EarlyStopping stopper(cfg.patience);
  TrainResult result;
  ModelParams best_model = params.clone();
  PolicyParams best_policy = policy.clone();
  const ThresholdMode static_mode = ThresholdMode::fixed(static_threshold_for(cfg));

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double main_total = 0.0, policy_total = 0.0, tau_total = 0.0;
    for (std::size_t e = 0; e < cfg.episodes_per_epoch; ++e) {
      MetaTask task = sampler.next();
      main_opt.zero_grad();
      EpisodeOutput out = forward_episode(task, corpus, params, cfg.ablation, cfg.train_temperature);
      PolicyStepStats ps = policy_episode(task, out, params, policy, cfg, policy_opt, action_rng);
      policy_total += ps.loss;
      tau_total += ps.mean_threshold;
      if (cfg.joint_learning_rate > 0.0) {
        std::vector<Tensor> losses;
        for (std::size_t q = 0; q < task.queries.size(); ++q)
          losses.push_back(mse_loss(out.queries[q].scores, task.queries[q].labels));
        Tensor loss = sum(concat(losses));
        if (!std::isfinite(loss.item())) throw NumericError("non-finite training loss");
        main_total += loss.item();
        backward(loss);
        main_opt.step();
      }
    }
    const double n = static_cast<double>(cfg.episodes_per_epoch);
    const std::uint64_t val_seed = cfg.seed + kValidationSeedOffset;
    EvalSummary val_static = evaluate(params, nullptr, corpus, split.validation, cfg, static_mode, cfg.val_episodes, val_seed);
    EvalSummary val_dynamic =
        evaluate(params, &policy, corpus, split.validation, cfg, ThresholdMode::dynamic(), cfg.val_episodes, val_seed);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = main_total / n;
    rec.val_auc = val_static.mean_auc();
    rec.val_macro_f1 = val_static.mean_macro_f1();
    rec.policy_loss = policy_total / n;
    rec.val_dynamic_macro_f1 = val_dynamic.mean_macro_f1();
    rec.mean_threshold = tau_total / n;
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stopper.update(*rec.val_dynamic_macro_f1)) {
      best_model = params.clone();
      best_policy = policy.clone();
    }
    if (stopper.should_stop()) break;
  }
  result.model = std::move(best_model);
  result.policy = std::move(best_policy);
  result.best_epoch = stopper.best_epoch();
  result.best_value = stopper.best_value();
  return result;
}

}  // namespace acd
