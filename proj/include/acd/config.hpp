#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "acd/episode.hpp"
#include "acd/model.hpp"

namespace acd {

// Training and evaluation protocol. Defaults follow the published setup:
// 800 training episodes per epoch, 600 validation and test episodes, Adam at
// 1e-3 then 1e-4 for the joint policy stage, patience 3 on validation AUC,
// temperature 2 for the policy stage, five seeds.
struct TrainConfig {
  EpisodeShape shape{5, 5, 5};
  std::size_t episodes_per_epoch = 800;
  std::size_t val_episodes = 600;
  std::size_t test_episodes = 600;
  double learning_rate = 1e-3;
  double policy_learning_rate = 1e-4;
  double joint_learning_rate = 1e-4;  // main network during the policy stage
  std::size_t patience = 3;
  std::size_t max_epochs = 30;
  std::uint64_t seed = 5;
  std::vector<std::uint64_t> seeds{5, 10, 15, 20, 25};
  double train_temperature = 1.0;
  double policy_temperature = 2.0;
  std::optional<double> static_threshold;  // falls back to default_static_threshold(N)
  std::size_t policy_width = 50;
  ModelConfig model;
  AblationFlags ablation;

  void validate() const {
    if (shape.n_way == 0 || shape.k_shot == 0 || shape.queries_per_class == 0)
      throw ConfigError("N, K and queries per class must be positive");
    if (episodes_per_epoch == 0 || val_episodes == 0 || test_episodes == 0)
      throw ConfigError("episode counts must be positive");
    if (patience == 0) throw ConfigError("patience must be at least 1");
    if (max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
    if (!(learning_rate > 0) || !(policy_learning_rate > 0) || !(joint_learning_rate >= 0))
      throw ConfigError("learning rates must be positive");
    if (!(train_temperature > 0) || !(policy_temperature > 0)) throw ConfigError("temperatures must be positive");
    if (static_threshold && !(*static_threshold >= 0.0 && *static_threshold <= 1.0))
      throw ConfigError("static threshold must lie in [0, 1]");
    if (policy_width == 0) throw ConfigError("policy width must be positive");
  }
};

// Best static thresholds reported for 5-way (0.3) and 10-way (0.2) episodes.
inline double default_static_threshold(std::size_t n_way) { return n_way >= 10 ? 0.2 : 0.3; }

inline double static_threshold_for(const TrainConfig& c) {
  return c.static_threshold.value_or(default_static_threshold(c.shape.n_way));
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"n_way", c.shape.n_way},
       {"k_shot", c.shape.k_shot},
       {"queries_per_class", c.shape.queries_per_class},
       {"episodes_per_epoch", c.episodes_per_epoch},
       {"val_episodes", c.val_episodes},
       {"test_episodes", c.test_episodes},
       {"learning_rate", c.learning_rate},
       {"policy_learning_rate", c.policy_learning_rate},
       {"joint_learning_rate", c.joint_learning_rate},
       {"patience", c.patience},
       {"max_epochs", c.max_epochs},
       {"seed", c.seed},
       {"seeds", c.seeds},
       {"train_temperature", c.train_temperature},
       {"policy_temperature", c.policy_temperature},
       {"static_threshold", c.static_threshold ? nlohmann::json(*c.static_threshold) : nlohmann::json()},
       {"effective_static_threshold", static_threshold_for(c)},
       {"policy_width", c.policy_width},
       {"model", c.model},
       {"ablation", c.ablation}};
}

// Missing keys keep their defaults; unknown keys are rejected. The
// effective_static_threshold echo is ignored on input.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::vector<std::string> known{
      "n_way", "k_shot", "queries_per_class", "episodes_per_epoch", "val_episodes", "test_episodes",
      "learning_rate", "policy_learning_rate", "joint_learning_rate", "patience", "max_epochs", "seed",
      "seeds", "train_temperature", "policy_temperature", "static_threshold", "policy_width", "model",
      "ablation", "effective_static_threshold"};
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("unknown config key '" + it.key() + "'");
  try {
    c.shape.n_way = j.value("n_way", c.shape.n_way);
    c.shape.k_shot = j.value("k_shot", c.shape.k_shot);
    c.shape.queries_per_class = j.value("queries_per_class", c.shape.queries_per_class);
    c.episodes_per_epoch = j.value("episodes_per_epoch", c.episodes_per_epoch);
    c.val_episodes = j.value("val_episodes", c.val_episodes);
    c.test_episodes = j.value("test_episodes", c.test_episodes);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.policy_learning_rate = j.value("policy_learning_rate", c.policy_learning_rate);
    c.joint_learning_rate = j.value("joint_learning_rate", c.joint_learning_rate);
    c.patience = j.value("patience", c.patience);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.seed = j.value("seed", c.seed);
    c.seeds = j.value("seeds", c.seeds);
    c.train_temperature = j.value("train_temperature", c.train_temperature);
    c.policy_temperature = j.value("policy_temperature", c.policy_temperature);
    if (j.contains("static_threshold") && !j["static_threshold"].is_null())
      c.static_threshold = j["static_threshold"].get<double>();
    c.policy_width = j.value("policy_width", c.policy_width);
    if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
    if (j.contains("ablation")) c.ablation = j["ablation"].get<AblationFlags>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

}  // namespace acd
