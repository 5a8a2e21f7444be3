#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "acd/acd.hpp"
#include "support/checks.hpp"
#include "support/oracles.hpp"

namespace acd {
namespace {

ModelParams identity_encoder_params(const Corpus& corpus, std::vector<double> embedding_values) {
  ModelConfig cfg;
  cfg.embedding_dim = cfg.hidden_dim = 2;
  cfg.window = 1;
  cfg.repeat = 1;
  std::mt19937_64 rng(1);
  EmbeddingTable table{corpus.vocab, Tensor::matrix(corpus.vocab.size(), 2, std::move(embedding_values), true)};
  ModelParams p = init_model(cfg, table, rng);
  p.conv_kernel = Tensor({1, 2, 2}, {1, 0, 0, 1}, true);
  p.conv_bias = Tensor::zeros({2}, true);
  return p;
}

TEST(Encoder, SingleWordGivesOneRow) {
  Corpus c;
  c.add_sentence({"a"}, {"x"});
  std::mt19937_64 rng(2);
  ModelParams p = init_model({}, random_embeddings(c.vocab, 50, rng), rng);
  Tensor h = encode(c.sentences[0].tokens, p);
  EXPECT_EQ(h.shape(), (Shape{1, 50}));
}

TEST(Encoder, ZeroKernelGivesBiasRows) {
  Corpus c;
  c.add_sentence({"a", "b", "c"}, {"x"});
  std::mt19937_64 rng(3);
  ModelParams p = init_model({}, random_embeddings(c.vocab, 50, rng), rng);
  p.conv_kernel = Tensor::zeros(p.conv_kernel.shape(), true);
  Tensor h = encode(c.sentences[0].tokens, p);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 50; ++j) EXPECT_EQ(h.at(i, j), p.conv_bias.at(j));
}

TEST(Encoder, IdentityKernelReturnsEmbeddingRows) {
  Corpus c;
  c.add_sentence({"a", "b"}, {"x"});
  ModelParams p = identity_encoder_params(c, {0, 0, 1.5, -2, 0.25, 4});
  Tensor h = encode(c.sentences[0].tokens, p);
  EXPECT_EQ(h.at(0, 0), 1.5);
  EXPECT_EQ(h.at(0, 1), -2.0);
  EXPECT_EQ(h.at(1, 0), 0.25);
  EXPECT_EQ(h.at(1, 1), 4.0);
}

TEST(Encoder, OutOfRangeTokenIsALookupError) {
  Corpus c;
  c.add_sentence({"a"}, {"x"});
  ModelParams p = identity_encoder_params(c, {0, 0, 1, 1});
  std::vector<std::size_t> bad{7};
  EXPECT_THROW(encode(bad, p), LookupError);
}

TEST(CommonAspectVector, SingleRowIsItself) {
  Tensor h = Tensor::matrix(1, 3, {1, 2, 3});
  Tensor v = common_aspect_vector({h});
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(v.at(j), h.at(0, j));
}

TEST(CommonAspectVector, TwoSingleWordSequencesAverage) {
  Tensor v = common_aspect_vector({Tensor::matrix(1, 2, {1, 4}), Tensor::matrix(1, 2, {3, -2})});
  EXPECT_DOUBLE_EQ(v.at(0), 2.0);
  EXPECT_DOUBLE_EQ(v.at(1), 1.0);
}

TEST(CommonAspectVector, UnequalLengthsUseGrandWordMean) {
  std::mt19937_64 rng(4);
  oracle::Mat a = oracle::random_mat(2, 3, rng), b = oracle::random_mat(3, 3, rng);
  Tensor v = common_aspect_vector({oracle::from_mat(a), oracle::from_mat(b)});
  oracle::Vec ref = oracle::common_aspect_vector({a, b});
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(v.at(j), ref[j], 1e-12);
}

TEST(AttentionMatrix, ZeroWeightGivesBiasRows) {
  Tensor v = Tensor::vector({0.3, -0.2, 0.9});
  Tensor b = Tensor::vector({1, 2, 3});
  Tensor w = class_attention_matrix(v, Tensor::zeros({3, 4}), b);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(w.at(r, c), b.at(c));
}

TEST(AttentionMatrix, SingleRepeatOnesColumnGivesVPlusB) {
  Tensor v = Tensor::vector({0.3, -0.2});
  Tensor b = Tensor::vector({1, 2});
  Tensor w = class_attention_matrix(v, Tensor::full({2, 1}, 1.0), b);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(w.at(r, c), v.at(c) + b.at(c));
}

TEST(AttentionMatrix, MatchesLoopConstruction) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    const std::size_t d = 1 + t % 6, e = 1 + t % 4;
    oracle::Vec v = oracle::random_vec(d, rng), b = oracle::random_vec(d, rng);
    oracle::Mat w = oracle::random_mat(d, e, rng);
    Tensor got = class_attention_matrix(Tensor::vector(v), oracle::from_mat(w), Tensor::vector(b));
    EXPECT_LT(check::max_abs_diff(got, oracle::class_attention_matrix(v, w, b)), 1e-12);
  }
}

TEST(Denoise, SingleWordIsPassThrough) {
  Tensor h = Tensor::matrix(1, 2, {0.4, -1.1});
  Tensor r = denoise_instance(h, Tensor::vector({1, 2}), Tensor::matrix(2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(r.at(0), 0.4);
  EXPECT_EQ(r.at(1), -1.1);
}

TEST(Denoise, IdenticalRowsSplitAttentionEvenly) {
  Tensor h = Tensor::matrix(2, 2, {0.4, -1.1, 0.4, -1.1});
  Tensor v = Tensor::vector({1, 2});
  Tensor w = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Tensor beta = support_attention(h, v, w);
  EXPECT_EQ(beta.at(0), 0.5);
  EXPECT_EQ(beta.at(1), 0.5);
  Tensor r = denoise_instance(h, v, w);
  EXPECT_DOUBLE_EQ(r.at(0), 0.4);
  EXPECT_DOUBLE_EQ(r.at(1), -1.1);
}

TEST(Denoise, MatchesScalarLoopOnThreeByTwo) {
  std::mt19937_64 rng(6);
  oracle::Mat h = oracle::random_mat(3, 2, rng), w = oracle::random_mat(2, 2, rng);
  oracle::Vec v = oracle::random_vec(2, rng);
  Tensor r = denoise_instance(oracle::from_mat(h), Tensor::vector(v), oracle::from_mat(w));
  EXPECT_LT(check::max_abs_diff(r.data(), oracle::denoise_instance(h, v, w)), 1e-12);
}

TEST(Prototype, MeanOfInstances) {
  Tensor u = Tensor::vector({1, 2}), w = Tensor::vector({3, 6});
  Tensor single = compute_prototype({u});
  EXPECT_EQ(single.at(0), 1.0);
  Tensor p = compute_prototype({u, w});
  EXPECT_DOUBLE_EQ(p.at(0), 2.0);
  EXPECT_DOUBLE_EQ(p.at(1), 4.0);
  Tensor q = compute_prototype({w, u});
  EXPECT_EQ(p.at(0), q.at(0));
  EXPECT_EQ(p.at(1), q.at(1));
}

TEST(QueryAttention, SingleWordIgnoresPrototype) {
  Tensor hq = Tensor::matrix(1, 2, {0.7, 0.1});
  Tensor r = query_representation(hq, Tensor::vector({-5, 9}));
  EXPECT_EQ(r.at(0), 0.7);
  EXPECT_EQ(r.at(1), 0.1);
}

TEST(QueryAttention, IdenticalRowsGiveThatRow) {
  Tensor hq = Tensor::matrix(3, 2, {0.7, 0.1, 0.7, 0.1, 0.7, 0.1});
  Tensor r = query_representation(hq, Tensor::vector({-5, 9}));
  EXPECT_DOUBLE_EQ(r.at(0), 0.7);
  EXPECT_DOUBLE_EQ(r.at(1), 0.1);
}

TEST(QueryAttention, MatchesScalarLoop) {
  std::mt19937_64 rng(7);
  oracle::Mat hq = oracle::random_mat(5, 4, rng);
  oracle::Vec r = oracle::random_vec(4, rng, -2, 2);
  Tensor got = query_representation(oracle::from_mat(hq), Tensor::vector(r));
  EXPECT_LT(check::max_abs_diff(got.data(), oracle::query_representation(hq, r)), 1e-12);
}

TEST(QueryAttention, HasNoLearnedParameters) {
  std::mt19937_64 rng(8);
  check::ToyEpisode toy = check::make_toy_episode(rng, {3, 2, 5, 4, 2});
  std::vector<Tensor> prototypes = prototypes_for(toy.task, toy.corpus, toy.params, {});
  std::vector<Tensor> frozen;
  for (const auto& p : prototypes) frozen.push_back(p.detach());
  Tensor hq = encode(toy.corpus.sentences[toy.task.queries[0].sentence].tokens, toy.params);
  std::vector<Tensor> reps;
  for (const auto& r : frozen) reps.push_back(query_representation(hq, r));
  backward(sum(rank(frozen, reps)));
  EXPECT_FALSE(toy.params.sa_weight.has_grad());
  EXPECT_FALSE(toy.params.sa_bias.has_grad());
}

TEST(Rank, EqualDistancesGiveUniform) {
  std::vector<Tensor> protos{Tensor::vector({1, 0}), Tensor::vector({0, 1}), Tensor::vector({-1, 0})};
  std::vector<Tensor> reps{Tensor::vector({0, 0}), Tensor::vector({0, 0}), Tensor::vector({0, 0})};
  Tensor y = rank(protos, reps);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Rank, TwoClassAnalyticCase) {
  std::vector<Tensor> protos{Tensor::vector({1, 0}), Tensor::vector({0, 1})};
  std::vector<Tensor> reps{Tensor::vector({1, 0}), Tensor::vector({1, 0})};
  Tensor y = rank(protos, reps);
  const oracle::Vec ref = oracle::softmax({0.0, -std::sqrt(2.0)});
  EXPECT_NEAR(y.at(0), 0.80443, 1e-5);
  EXPECT_NEAR(y.at(1), 0.19557, 1e-5);
  EXPECT_NEAR(y.at(0), ref[0], 1e-15);
}

TEST(Rank, LargeTemperatureApproachesUniform) {
  std::vector<Tensor> protos{Tensor::vector({3, 0}), Tensor::vector({0, 1}), Tensor::vector({-4, 2})};
  std::vector<Tensor> reps{Tensor::vector({0, 0}), Tensor::vector({1, 1}), Tensor::vector({5, 5})};
  Tensor y = rank(protos, reps, 1e6);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-3);
}

TEST(Rank, ZeroDistanceRanksFirst) {
  std::vector<Tensor> protos{Tensor::vector({0.3, 0.2}), Tensor::vector({0.1, 0.9})};
  std::vector<Tensor> reps{Tensor::vector({0.5, 0.5}), Tensor::vector({0.1, 0.9})};
  Tensor y = rank(protos, reps);
  EXPECT_GT(y.at(1), y.at(0));
}

TEST(Equations, MatchScalarLoopOracles) {
  check::EquationErrors err = check::equation_errors(100, 99);
  for (std::size_t i = 0; i < err.size(); ++i) {
    SCOPED_TRACE(check::equation_label(i));
    EXPECT_LT(err[i], 1e-12);
  }
}

TEST(Invariants, AttentionWeightsSumToOne) {
  check::AttentionSums s = check::attention_sums(200, 17);
  EXPECT_LE(s.max_deviation, 1e-12);
  EXPECT_GE(s.min_weight, 0.0);
}

TEST(Invariants, PrototypeIgnoresSupportOrder) { EXPECT_LE(check::prototype_permutation_error(200, 18), 1e-12); }

TEST(Invariants, ClassPermutationIsEquivariant) { EXPECT_EQ(check::class_permutation_mismatches(200, 19), 0u); }

TEST(ForwardEpisode, ScoresSumToOneUnderEveryAblation) {
  std::mt19937_64 rng(20);
  check::ToyEpisode toy = check::make_toy_episode(rng, {4, 3, 6, 5, 4});
  for (int mask = 0; mask < 8; ++mask) {
    AblationFlags f;
    f.no_support_attention = mask & 1;
    f.no_attention_matrix = mask & 2;
    f.no_query_attention = mask & 4;
    EpisodeOutput out = forward_episode(toy.task, toy.corpus, toy.params, f);
    ASSERT_EQ(out.queries.size(), toy.task.queries.size());
    for (const auto& q : out.queries) {
      ASSERT_EQ(q.scores.numel(), toy.task.n_way());
      double s = 0.0;
      for (double v : q.scores.data()) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(ForwardEpisode, AblationsSubstituteTheirComponents) {
  std::mt19937_64 rng(21);
  check::ToyEpisode toy = check::make_toy_episode(rng, {3, 3, 6, 5, 2});
  NoGradGuard no_grad;
  AblationFlags no_sa;
  no_sa.no_support_attention = true;
  auto protos = prototypes_for(toy.task, toy.corpus, toy.params, no_sa);
  for (std::size_t i = 0; i < toy.task.n_way(); ++i) {
    std::vector<oracle::Vec> means;
    for (std::size_t idx : toy.task.support[i]) {
      oracle::Mat h = check::oracle_encode(toy.corpus.sentences[idx], toy.params);
      means.push_back(oracle::mean_of(h));
    }
    EXPECT_LT(check::max_abs_diff(protos[i].data(), oracle::mean_of(means)), 1e-12);
  }

  AblationFlags no_wi;
  no_wi.no_attention_matrix = true;
  protos = prototypes_for(toy.task, toy.corpus, toy.params, no_wi);
  for (std::size_t i = 0; i < toy.task.n_way(); ++i) {
    std::vector<oracle::Mat> encoded;
    for (std::size_t idx : toy.task.support[i]) encoded.push_back(check::oracle_encode(toy.corpus.sentences[idx], toy.params));
    oracle::Vec v = oracle::common_aspect_vector(encoded);
    const std::size_t d = v.size();
    oracle::Mat identity(d, oracle::Vec(d, 0.0));
    for (std::size_t j = 0; j < d; ++j) identity[j][j] = 1.0;
    std::vector<oracle::Vec> inst;
    for (const auto& h : encoded) inst.push_back(oracle::denoise_instance(h, v, identity));
    EXPECT_LT(check::max_abs_diff(protos[i].data(), oracle::mean_of(inst)), 1e-12);
  }

  AblationFlags no_qa;
  no_qa.no_query_attention = true;
  EpisodeOutput out = forward_episode(toy.task, toy.corpus, toy.params, no_qa);
  for (std::size_t q = 0; q < toy.task.queries.size(); ++q) {
    oracle::Mat hq = check::oracle_encode(toy.corpus.sentences[toy.task.queries[q].sentence], toy.params);
    oracle::Vec m = oracle::mean_of(hq);
    for (const auto& r : out.queries[q].reps) EXPECT_LT(check::max_abs_diff(r.data(), m), 1e-12);
  }
}

TEST(ForwardEpisode, EpisodeLossGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto r = check::episode_gradient_check(seed);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
  AblationFlags all;
  all.no_support_attention = all.no_query_attention = true;
  EXPECT_LT(check::episode_gradient_check(4, all).max_rel_error, 1e-4);
  AblationFlags no_wi;
  no_wi.no_attention_matrix = true;
  EXPECT_LT(check::episode_gradient_check(5, no_wi).max_rel_error, 1e-4);
}

TEST(ForwardEpisode, TrainedToyModelRecognisesCopiedQuery) {
  // Two classes with disjoint vocabularies; the query repeats a class-1
  // support sentence verbatim.
  Corpus c;
  for (int i = 0; i < 6; ++i) {
    c.add_sentence({"a" + std::to_string(i % 3), "a" + std::to_string((i + 1) % 3), "x"}, {"A"});
    c.add_sentence({"b" + std::to_string(i % 3), "b" + std::to_string((i + 2) % 3), "y"}, {"B"});
  }
  ClassSplit split{{"A", "B"}, {"A", "B"}, {}};
  TrainConfig cfg;
  cfg.shape = {2, 1, 1};
  cfg.episodes_per_epoch = 60;
  cfg.val_episodes = 5;
  cfg.max_epochs = 2;
  cfg.model.embedding_dim = cfg.model.hidden_dim = 8;
  std::mt19937_64 rng(22);
  ModelParams init = init_model(cfg.model, random_embeddings(c.vocab, 8, rng), rng);
  TrainResult result = train_main(c, split, cfg, init);

  MetaTask task;
  task.classes = {"A", "B"};
  task.support = {{0}, {1}};
  task.queries = {{2, {1, 0}}};
  c.sentences[2] = c.sentences[0];
  NoGradGuard no_grad;
  EpisodeOutput out = forward_episode(task, c, result.model);
  EXPECT_GT(out.queries[0].scores.at(0), out.queries[0].scores.at(1));
}

TEST(ModelParams, CloneIsDeep) {
  std::mt19937_64 rng(23);
  Corpus c;
  c.add_sentence({"a"}, {"x"});
  ModelParams p = init_model({}, random_embeddings(c.vocab, 50, rng), rng);
  ModelParams q = p.clone();
  q.conv_bias.mutable_data()[0] += 1.0;
  EXPECT_NE(p.conv_bias.at(0), q.conv_bias.at(0));
}

TEST(ModelParams, RejectsEvenWindow) {
  ModelConfig cfg;
  cfg.window = 4;
  Corpus c;
  c.add_sentence({"a"}, {"x"});
  std::mt19937_64 rng(24);
  EXPECT_THROW(init_model(cfg, random_embeddings(c.vocab, 50, rng), rng), ConfigError);
}

TEST(Ablation, ParsesFlagList) {
  AblationFlags f = parse_ablation("no-sa,no-qa");
  EXPECT_TRUE(f.no_support_attention);
  EXPECT_TRUE(f.no_query_attention);
  EXPECT_FALSE(f.no_attention_matrix);
  EXPECT_FALSE(f.no_dynamic_threshold);
  EXPECT_THROW(parse_ablation("no-xyz"), ConfigError);
}

}  // namespace
}  // namespace acd
