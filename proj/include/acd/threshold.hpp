#pragma once

// Per-instance dynamic threshold: a small policy network maps the query state
// to Beta(a, b); the threshold is sampled during training and taken at the
// mode during inference.

#include <cmath>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "acd/dataset.hpp"
#include "acd/errors.hpp"
#include "acd/tensor.hpp"

namespace acd {

using LabelSet = std::set<std::size_t>;

// {i : scores[i] >= tau}
inline LabelSet apply_threshold(std::span<const double> scores, double tau) {
  LabelSet out;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] >= tau) out.insert(i);
  return out;
}

inline LabelSet positives(std::span<const int> labels) {
  LabelSet out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) out.insert(i);
  return out;
}

// Set F1; an empty prediction scores 0.
inline double instance_f1(const LabelSet& predicted, const LabelSet& truth) {
  if (truth.empty()) throw ContractError("instance_f1 requires a non-empty true label set");
  if (predicted.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i : predicted) hit += truth.count(i);
  return 2.0 * static_cast<double>(hit) / static_cast<double>(predicted.size() + truth.size());
}

struct BetaParams {
  double a = 2.0;
  double b = 2.0;
};

inline double beta_mode(double a, double b) {
  if (!(a > 1.0) || !(b > 1.0)) throw DomainError("beta_mode requires a > 1 and b > 1");
  return (a - 1.0) / (a + b - 2.0);
}

inline double log_beta_function(double a, double b) {
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

inline double beta_log_pdf(double tau, double a, double b) {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("beta_log_pdf requires tau in (0, 1)");
  if (!(a > 0.0 && b > 0.0)) throw DomainError("beta_log_pdf requires positive shape parameters");
  return (a - 1.0) * std::log(tau) + (b - 1.0) * std::log1p(-tau) - log_beta_function(a, b);
}

// Differentiable in a and b (scalar tensors); tau is a constant.
inline Tensor beta_log_pdf(double tau, const Tensor& a, const Tensor& b) {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("beta_log_pdf requires tau in (0, 1)");
  Tensor term_a = scale(add_scalar(a, -1.0), std::log(tau));
  Tensor term_b = scale(add_scalar(b, -1.0), std::log1p(-tau));
  Tensor log_norm = sub(add(lgamma(a), lgamma(b)), lgamma(add(a, b)));
  return sub(add(term_a, term_b), log_norm);
}

// X/(X+Y) with X ~ Gamma(a), Y ~ Gamma(b), kept strictly inside (0, 1).
inline double sample_threshold(const BetaParams& p, std::mt19937_64& rng) {
  if (!(p.a > 1.0) || !(p.b > 1.0)) throw DomainError("sample_threshold requires a > 1 and b > 1");
  std::gamma_distribution<double> ga(p.a, 1.0), gb(p.b, 1.0);
  const double x = ga(rng), y = gb(rng);
  double tau = x / (x + y);
  constexpr double eps = 1e-9;
  return std::clamp(tau, eps, 1.0 - eps);
}

// L_t = -(score - score*) · log P(tau)
inline Tensor policy_loss(double score, double baseline_score, const Tensor& log_p) {
  return scale(log_p, -(score - baseline_score));
}

inline double policy_loss(double score, double baseline_score, double log_p) {
  return -(score - baseline_score) * log_p;
}

// State: N squared-difference vectors (r^i - r^i_q)^2 followed by ŷ.
inline std::vector<double> build_state(const std::vector<Tensor>& prototypes, const std::vector<Tensor>& query_reps,
                                       std::span<const double> scores) {
  if (prototypes.size() != query_reps.size() || prototypes.size() != scores.size())
    throw ShapeError("build_state: N mismatch");
  std::vector<double> state;
  for (std::size_t i = 0; i < prototypes.size(); ++i) {
    auto r = prototypes[i].data();
    auto q = query_reps[i].data();
    if (r.size() != q.size()) throw ShapeError("build_state: d mismatch");
    for (std::size_t j = 0; j < r.size(); ++j) state.push_back((r[j] - q[j]) * (r[j] - q[j]));
  }
  state.insert(state.end(), scores.begin(), scores.end());
  return state;
}

struct PolicyParams {
  std::size_t n_way = 0;
  std::size_t state_dim = 0;
  std::size_t hidden_dim = 0;
  Tensor trunk_weight;   // state_dim × hidden
  Tensor trunk_bias;     // hidden
  Tensor head_a_weight;  // hidden × 1
  Tensor head_a_bias;    // 1
  Tensor head_b_weight;
  Tensor head_b_bias;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    return {{"policy.trunk_weight", trunk_weight}, {"policy.trunk_bias", trunk_bias},
            {"policy.head_a_weight", head_a_weight}, {"policy.head_a_bias", head_a_bias},
            {"policy.head_b_weight", head_b_weight}, {"policy.head_b_bias", head_b_bias}};
  }
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [_, t] : named_parameters()) out.push_back(t);
    return out;
  }
  PolicyParams clone() const {
    PolicyParams p = *this;
    auto fresh = [](const Tensor& t) { return Tensor(t.shape(), {t.data().begin(), t.data().end()}, true); };
    p.trunk_weight = fresh(trunk_weight);
    p.trunk_bias = fresh(trunk_bias);
    p.head_a_weight = fresh(head_a_weight);
    p.head_a_bias = fresh(head_a_bias);
    p.head_b_weight = fresh(head_b_weight);
    p.head_b_bias = fresh(head_b_bias);
    return p;
  }
};

inline PolicyParams init_policy(std::size_t n_way, std::size_t hidden_dim, std::size_t width, std::mt19937_64& rng) {
  PolicyParams p;
  p.n_way = n_way;
  p.state_dim = n_way * hidden_dim + n_way;
  p.hidden_dim = width;
  p.trunk_weight = Tensor({p.state_dim, width}, sample_normal(p.state_dim * width, rng), true);
  p.trunk_bias = Tensor({width}, sample_normal(width, rng), true);
  p.head_a_weight = Tensor({width, 1}, sample_normal(width, rng), true);
  p.head_a_bias = Tensor({1}, sample_normal(1, rng), true);
  p.head_b_weight = Tensor({width, 1}, sample_normal(width, rng), true);
  p.head_b_bias = Tensor({1}, sample_normal(1, rng), true);
  return p;
}

struct PolicyOutput {
  Tensor a;  // scalar
  Tensor b;  // scalar
  BetaParams values() const { return {a.item(), b.item()}; }
};

// hidden = tanh(state·W + c); a = 1 + softplus(hidden·w_a + c_a); b likewise.
inline PolicyOutput policy_forward(std::span<const double> state, const PolicyParams& params) {
  if (state.size() != params.state_dim)
    throw ShapeError("policy state length " + std::to_string(state.size()) + ", expected " +
                     std::to_string(params.state_dim));
  detail::require_finite(state, "policy state");
  Tensor s = Tensor::vector({state.begin(), state.end()});
  Tensor hidden = tanh(reshape(row_broadcast_add(reshape(matmul(s, params.trunk_weight), {1, params.hidden_dim}),
                                                 params.trunk_bias),
                               {params.hidden_dim}));
  auto head = [&](const Tensor& w, const Tensor& c) {
    return reshape(add_scalar(softplus(add(matmul(hidden, w), c)), 1.0), {});
  };
  PolicyOutput out{head(params.head_a_weight, params.head_a_bias), head(params.head_b_weight, params.head_b_bias)};
  if (!std::isfinite(out.a.item()) || !std::isfinite(out.b.item()))
    throw NumericError("policy produced non-finite Beta parameters");
  // 1 + softplus(x) rounds to 1 once x < -37.
  if (!(out.a.item() > 1.0) || !(out.b.item() > 1.0))
    throw NumericError("policy head saturated: Beta parameter rounded to 1");
  return out;
}

}  // namespace acd
