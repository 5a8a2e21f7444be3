#pragma once

// Independent reference computations used by the unit tests and the
// acceptance binary. Everything here is plain loops over std::vector and
// never calls the tensor ops under test.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <set>
#include <vector>

#include "acd/acd.hpp"

namespace acd::oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major rows

inline Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), Vec(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline Vec to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Tensor from_mat(const Mat& m, bool requires_grad = false) {
  Vec flat;
  for (const auto& r : m) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::matrix(m.size(), m.front().size(), std::move(flat), requires_grad);
}

inline Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(r, Vec(c));
  for (auto& row : m)
    for (double& x : row) x = u(rng);
  return m;
}

inline Vec random_vec(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// Softmax in long double, the reference for the f64 implementation.
inline Vec softmax(const Vec& s, double temperature = 1.0) {
  long double mx = *std::max_element(s.begin(), s.end());
  std::vector<long double> e(s.size());
  long double z = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    e[i] = std::exp((static_cast<long double>(s[i]) - mx) / temperature);
    z += e[i];
  }
  Vec out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = static_cast<double>(e[i] / z);
  return out;
}

// out[i][o] = b[o] + Σ_t Σ_c x[i + t - half][c] · K[t][c][o], zero outside.
inline Mat conv1d_same(const Mat& x, const std::vector<Mat>& kernel, const Vec& bias) {
  const std::size_t n = x.size(), m = kernel.size(), din = x.front().size(), dout = bias.size();
  const long half = static_cast<long>(m / 2);
  Mat out(n, Vec(dout));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < dout; ++o) {
      double s = bias[o];
      for (std::size_t t = 0; t < m; ++t) {
        const long src = static_cast<long>(i) + static_cast<long>(t) - half;
        if (src < 0 || src >= static_cast<long>(n)) continue;
        for (std::size_t c = 0; c < din; ++c) s += x[static_cast<std::size_t>(src)][c] * kernel[t][c][o];
      }
      out[i][o] = s;
    }
  return out;
}

// Grand mean over every row of every sequence.
inline Vec common_aspect_vector(const std::vector<Mat>& seqs) {
  const std::size_t d = seqs.front().front().size();
  Vec v(d, 0.0);
  std::size_t rows = 0;
  for (const auto& h : seqs)
    for (const auto& row : h) {
      for (std::size_t j = 0; j < d; ++j) v[j] += row[j];
      ++rows;
    }
  for (double& x : v) x /= static_cast<double>(rows);
  return v;
}

// With v stacked as e_M rows, (W·V)[r][c] = Σ_e W[r][e] · v[c]; b[c] is then
// added to every row.
inline Mat class_attention_matrix(const Vec& v, const Mat& weight, const Vec& bias) {
  const std::size_t d = weight.size(), repeat = weight.front().size();
  Mat out(d, Vec(v.size()));
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < v.size(); ++c) {
      double s = 0.0;
      for (std::size_t e = 0; e < repeat; ++e) s += weight[r][e] * v[c];
      out[r][c] = s + bias[c];
    }
  return out;
}

// β_k ∝ exp(Σ_j tanh((H W)[k][j]) v[j]); r = Σ_k β_k H[k].
inline Vec denoise_instance(const Mat& h, const Vec& v, const Mat& w, Vec* beta_out = nullptr) {
  const std::size_t n = h.size(), d = v.size();
  Vec scores(n);
  for (std::size_t k = 0; k < n; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double hw = 0.0;
      for (std::size_t p = 0; p < d; ++p) hw += h[k][p] * w[p][j];
      s += std::tanh(hw) * v[j];
    }
    scores[k] = s;
  }
  Vec beta = softmax(scores);
  if (beta_out) *beta_out = beta;
  Vec r(d, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < d; ++j) r[j] += beta[k] * h[k][j];
  return r;
}

inline Vec mean_of(const std::vector<Vec>& xs) {
  Vec out(xs.front().size(), 0.0);
  for (const auto& x : xs)
    for (std::size_t j = 0; j < x.size(); ++j) out[j] += x[j];
  for (double& v : out) v /= static_cast<double>(xs.size());
  return out;
}

// ρ_k ∝ exp(Σ_j tanh(Hq[k][j]) r[j]); r_q = Σ_k ρ_k Hq[k].
inline Vec query_representation(const Mat& hq, const Vec& r, Vec* rho_out = nullptr) {
  const std::size_t n = hq.size(), d = r.size();
  Vec scores(n);
  for (std::size_t k = 0; k < n; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += std::tanh(hq[k][j]) * r[j];
    scores[k] = s;
  }
  Vec rho = softmax(scores);
  if (rho_out) *rho_out = rho;
  Vec out(d, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < d; ++j) out[j] += rho[k] * hq[k][j];
  return out;
}

inline Vec rank(const std::vector<Vec>& protos, const std::vector<Vec>& reps, double temperature, bool squared) {
  Vec neg(protos.size());
  for (std::size_t i = 0; i < protos.size(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < protos[i].size(); ++j) s += (protos[i][j] - reps[i][j]) * (protos[i][j] - reps[i][j]);
    neg[i] = -(squared ? s : std::sqrt(s));
  }
  return softmax(neg, temperature);
}

// Per-class confusion counts built query by query.
inline double macro_f1(const std::vector<std::set<std::size_t>>& predicted, const std::vector<std::vector<int>>& labels,
                       std::size_t n_way) {
  double total = 0.0;
  for (std::size_t c = 0; c < n_way; ++c) {
    int confusion[2][2] = {{0, 0}, {0, 0}};  // [truth][pred]
    for (std::size_t q = 0; q < labels.size(); ++q) confusion[labels[q][c] != 0][predicted[q].count(c) > 0]++;
    const int tp = confusion[1][1], fp = confusion[0][1], fn = confusion[1][0];
    if (2 * tp + fp + fn == 0) continue;
    total += 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
  }
  return total / static_cast<double>(n_way);
}

// All (positive, negative) pairs enumerated directly.
inline double auc(const Vec& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (!labels[i] || labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  return wins / static_cast<double>(pairs);
}

// ---------------------------------------------------------------------------
// Finite differences

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Compares backward() with central differences for every entry of every input.
// The relative error uses max(|a|, |n|, 1e-3) in the denominator so entries
// whose true gradient is zero are compared on an absolute scale.
inline GradCheck grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  std::vector<Vec> analytic;
  for (auto& t : inputs) analytic.push_back(t.has_grad() ? Vec(t.grad().begin(), t.grad().end()) : Vec(t.numel(), 0.0));
  GradCheck out;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn().item();
      data[i] = saved - h;
      const double down = loss_fn().item();
      data[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
      ++out.checked;
    }
  }
  return out;
}

}  // namespace acd::oracle
