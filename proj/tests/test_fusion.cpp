#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sapfuse/fusion.hpp"
#include "sapfuse/gradcheck.hpp"
#include "support.hpp"

using namespace sapfuse;
using namespace sapfuse::fusion;
using namespace testing_support;

namespace {

template <typename T>
BasicModalityPair<T> make_pair(const BasicTensor<T>& o, const BasicTensor<T>& s, std::size_t rows, std::size_t cols) {
  return {make_token_grid(o, rows, cols, Modality::optical), make_token_grid(s, rows, cols, Modality::sar)};
}

double pair_score(const TensorD& a, const TensorD& b, double tau) {
  const std::size_t p = a.rows(), d = a.cols();
  double c = 0;
  for (std::size_t i = 0; i < p; ++i) c += cosine64(&a.values()[i * d], &b.values()[i * d], d);
  return std::exp(c / static_cast<double>(p) / tau);
}

double contrastive_oracle(const std::vector<TensorD>& o, const std::vector<TensorD>& s, double tau) {
  const std::size_t b = o.size();
  double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    double den_o = 0, den_s = 0;
    for (std::size_t k = 0; k < b; ++k) {
      den_o += pair_score(o[i], s[k], tau);
      den_s += pair_score(s[i], o[k], tau);
    }
    total += std::log(pair_score(o[i], s[i], tau) / den_o) + std::log(pair_score(s[i], o[i], tau) / den_s);
  }
  return -total / static_cast<double>(b);
}

std::vector<double> mutual_oracle(const TensorD& ref, const TensorD& other, const TensorD& queries) {
  const std::size_t p = ref.rows(), d = ref.cols(), k = queries.rows();
  std::vector<double> pooled(d, 0.0);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < d; ++j) pooled[j] += ref(i, j) / static_cast<double>(p);
  std::vector<double> score(p, 0.0);
  for (std::size_t q = 0; q < k; ++q)
    for (std::size_t i = 0; i < p; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += pooled[j] * queries(q, j) * other(i, j);
      score[i] += dot / std::sqrt(static_cast<double>(d)) / static_cast<double>(k);
    }
  return softmax64(score);
}

}  // namespace

TEST(Contrastive, SinglePairIsZero) {
  Rng rng(1);
  const std::vector<Tensor> o{random_tensor({4, 3}, rng)}, s{random_tensor({4, 3}, rng)};
  EXPECT_EQ(contrastive_loss<float>(o, s, 0.07), 0.0);
}

TEST(Contrastive, HandEvaluatedTwoBatch) {
  // o_i = s_i, and tokens of pair 1 are orthogonal to tokens of pair 2.
  const TensorD a({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  const TensorD b({2, 4}, {0, 0, 1, 0, 0, 0, 0, 1});
  const std::vector<TensorD> o{a, b}, s{a, b};
  const double expected = -2.0 * std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(contrastive_loss<double>(o, s, 1.0), expected, 1e-5);
}

TEST(Contrastive, MatchesBruteForce) {
  Rng rng(2);
  for (std::size_t b : {2u, 3u, 5u}) {
    std::vector<TensorD> o, s;
    for (std::size_t i = 0; i < b; ++i) {
      o.push_back(random_tensor<double>({4, 6}, rng));
      s.push_back(random_tensor<double>({4, 6}, rng));
    }
    for (double tau : {0.07, 0.5, 1.0})
      EXPECT_NEAR(contrastive_loss<double>(o, s, tau), contrastive_oracle(o, s, tau), 1e-6);
  }
}

TEST(Contrastive, NonNegativeAndPermutationInvariant) {
  Rng rng(3);
  std::vector<Tensor> o, s;
  for (int i = 0; i < 5; ++i) {
    o.push_back(random_tensor({3, 4}, rng));
    s.push_back(random_tensor({3, 4}, rng));
  }
  const double base = contrastive_loss<float>(o, s, 0.1);
  EXPECT_GE(base, -1e-6);
  std::vector<std::size_t> perm{4, 2, 0, 3, 1};
  for (int t = 0; t < 5; ++t) {
    std::vector<Tensor> po, ps;
    for (auto i : perm) {
      po.push_back(o[i]);
      ps.push_back(s[i]);
    }
    EXPECT_EQ(contrastive_loss<float>(po, ps, 0.1), base);
    std::next_permutation(perm.begin(), perm.end());
  }
}

TEST(Contrastive, MoreDissimilarNegativeLowersLoss) {
  const TensorD o1({1, 2}, {1, 0}), o2({1, 2}, {0, 1});
  const TensorD s1 = o1;
  const double before = contrastive_loss<double>(std::vector<TensorD>{o1, o2}, std::vector<TensorD>{s1, TensorD({1, 2}, {0.6, 0.8})}, 1.0);
  const double after = contrastive_loss<double>(std::vector<TensorD>{o1, o2}, std::vector<TensorD>{s1, TensorD({1, 2}, {0.0, 1.0})}, 1.0);
  EXPECT_LT(after, before);
}

TEST(Contrastive, Errors) {
  const std::vector<Tensor> none;
  EXPECT_THROW(contrastive_loss<float>(none, none, 0.1), DomainError);
  const std::vector<Tensor> z{Tensor({2, 2})}, w{Tensor({2, 2}, 1.0f)};
  const std::vector<Tensor> z2{Tensor({2, 2}), Tensor({2, 2}, 1.0f)}, w2{Tensor({2, 2}, 1.0f), Tensor({2, 2}, 1.0f)};
  EXPECT_THROW(contrastive_loss<float>(z2, w2, 0.1), DomainError);
  EXPECT_THROW(contrastive_loss<float>(z, w2, 0.1), DimensionError);
}

TEST(Contrastive, Gradient) {
  Rng rng(4);
  std::vector<TensorD> o, s;
  for (int i = 0; i < 3; ++i) {
    o.push_back(random_tensor<double>({3, 4}, rng));
    s.push_back(random_tensor<double>({3, 4}, rng));
  }
  ContrastiveGrads<double> g;
  contrastive_loss<double>(o, s, 0.3, &g);
  for (std::size_t i = 0; i < 3; ++i) {
    const ScalarFunction<double> fo = [&](const TensorD& x) {
      auto oo = o;
      oo[i] = x;
      return contrastive_loss<double>(oo, s, 0.3);
    };
    const ScalarFunction<double> fs = [&](const TensorD& x) {
      auto ss = s;
      ss[i] = x;
      return contrastive_loss<double>(o, ss, 0.3);
    };
    EXPECT_LT(check_gradient(fo, g.optical[i], o[i], 1e-6), 1e-3);
    EXPECT_LT(check_gradient(fs, g.sar[i], s[i], 1e-6), 1e-3);
  }
}

TEST(MutualAttention, EqualScoresGiveUniform) {
  Rng rng(5);
  Tensor sar({4, 3});
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t j = 0; j < 3; ++j) sar(p, j) = static_cast<float>(j + 1);
  const auto pair = make_pair(random_tensor({4, 3}, rng), sar, 2, 2);
  const auto w = mutual_attention(pair, FusionParams{Tensor({1, 3}, 1.0f), 0.07});
  for (float v : w.w_s.values()) EXPECT_NEAR(v, 0.25, 1e-6);
}

TEST(MutualAttention, MatchedFilterLimit) {
  Tensor opt({4, 4});
  for (std::size_t p = 0; p < 4; ++p) opt(p, 0) = 10.0f;  // pooled optical ∝ e0
  Tensor sar({4, 4});
  sar(0, 1) = sar(1, 2) = sar(3, 3) = 10.0f;
  sar(2, 0) = 10.0f;  // only token 2 aligns with the pooled optical vector
  const auto w = mutual_attention(make_pair(opt, sar, 2, 2), FusionParams{Tensor({1, 4}, 1.0f), 0.07});
  EXPECT_GT(w.w_s[2], 0.9);
}

TEST(MutualAttention, MatchesOracle) {
  Rng rng(6);
  const auto o = random_tensor<double>({4, 8}, rng), s = random_tensor<double>({4, 8}, rng);
  const auto q = random_tensor<double>({2, 8}, rng);
  const auto w = mutual_attention(make_pair(o, s, 2, 2), BasicFusionParams<double>{q, 0.07});
  const auto ws = mutual_oracle(o, s, q), wo = mutual_oracle(s, o, q);
  for (std::size_t p = 0; p < 4; ++p) {
    EXPECT_NEAR(w.w_s[p], ws[p], 1e-6);
    EXPECT_NEAR(w.w_o[p], wo[p], 1e-6);
  }
}

TEST(MutualAttention, Contracts) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto o = random_tensor({6, 4}, rng, -2, 2), s = random_tensor({6, 4}, rng, -2, 2);
    const auto q = random_tensor({3, 4}, rng);
    const FusionParams fp{q, 0.07};
    const auto w = mutual_attention(make_pair(o, s, 2, 3), fp);
    for (const Tensor* t : {&w.w_s, &w.w_o}) {
      double total = 0;
      for (float v : t->values()) {
        EXPECT_GT(v, 0.0f);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
    // Joint permutation of both modalities permutes the weights.
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Tensor po({6, 4}), ps({6, 4});
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        po(i, j) = o(perm[i], j);
        ps(i, j) = s(perm[i], j);
      }
    const auto wp = mutual_attention(make_pair(po, ps, 2, 3), fp);
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_NEAR(wp.w_s[i], w.w_s[perm[i]], 1e-6);
      EXPECT_NEAR(wp.w_o[i], w.w_o[perm[i]], 1e-6);
    }
    // Positive scaling of the SAR tokens keeps argmax w_s.
    Tensor scaled = s;
    const double c = rng.uniform(0.2, 5.0);
    for (auto& v : scaled.data()) v = static_cast<float>(v * c);
    const auto wc = mutual_attention(make_pair(o, scaled, 2, 3), fp);
    const auto argmax = [](const Tensor& t) {
      return std::max_element(t.values().begin(), t.values().end()) - t.values().begin();
    };
    EXPECT_EQ(argmax(wc.w_s), argmax(w.w_s));
  }
}

TEST(MutualAttention, PairMismatch) {
  Rng rng(8);
  const ModalityPair bad{make_token_grid(random_tensor({4, 3}, rng), 2, 2, Modality::optical),
                         make_token_grid(random_tensor({6, 3}, rng), 2, 3, Modality::sar)};
  EXPECT_THROW(mutual_attention(bad, FusionParams{Tensor({1, 3}, 1.0f), 0.07}), DimensionError);
}

TEST(Fuse, UniformIsConcatenation) {
  Rng rng(9);
  const auto o = random_tensor({4, 3}, rng), s = random_tensor({4, 3}, rng);
  const auto fused = fuse(make_pair(o, s, 2, 2), uniform_weights<float>(4));
  ASSERT_EQ(fused.tokens.shape(), (Shape{8, 3}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(fused.tokens(i, j), o(i, j), 1e-6);
      EXPECT_NEAR(fused.tokens(4 + i, j), s(i, j), 1e-6);
    }
  EXPECT_EQ(fused.cells, (std::vector<std::size_t>{0, 1, 2, 3, 0, 1, 2, 3}));
  EXPECT_EQ(fused.modality, Modality::fused);
}

TEST(Fuse, OneHotAndOracle) {
  Rng rng(10);
  const auto o = random_tensor({4, 3}, rng), s = random_tensor({4, 3}, rng);
  ImportanceWeights w{Tensor({4}, {0, 0, 1, 0}), uniform_weights<float>(4).w_o};
  const auto fused = fuse(make_pair(o, s, 2, 2), w);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(fused.tokens(4 + p, j), p == 2 ? 4.0f * s(p, j) : 0.0f);

  const auto wr = mutual_attention(make_pair(o, s, 2, 2), FusionParams{random_tensor({2, 3}, rng), 0.07});
  const auto fr = fuse(make_pair(o, s, 2, 2), wr);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(fr.tokens(p, j), 4.0 * wr.w_o[p] * o(p, j), 1e-6);
      EXPECT_NEAR(fr.tokens(4 + p, j), 4.0 * wr.w_s[p] * s(p, j), 1e-6);
    }
}

TEST(Fuse, GradientThroughMutualAttention) {
  Rng rng(11);
  for (int trial = 0; trial < 3; ++trial) {
    const auto o = random_tensor<double>({4, 6}, rng), s = random_tensor<double>({4, 6}, rng);
    const auto q = random_tensor<double>({2, 6}, rng);
    const auto cot = random_tensor<double>({8, 6}, rng);
    const auto value = [&](const TensorD& oo, const TensorD& ss, const TensorD& qq) {
      const auto pair = make_pair(oo, ss, 2, 2);
      return ops::dot<double>(fuse(pair, mutual_attention(pair, BasicFusionParams<double>{qq, 0.07})).tokens.data(), cot.data());
    };
    const auto pair = make_pair(o, s, 2, 2);
    const BasicFusionParams<double> fp{q, 0.07};
    const auto w = mutual_attention(pair, fp);
    const auto fg = fuse_backward(pair, w, cot);
    const auto mg = mutual_attention_backward(pair, fp, w, fg.weights);
    auto go = fg.optical, gs = fg.sar;
    ops::add_inplace(go, mg.optical);
    ops::add_inplace(gs, mg.sar);
    EXPECT_LT(check_gradient<double>([&](const TensorD& x) { return value(o, s, x); }, mg.queries, q, 1e-6), 1e-3);
    EXPECT_LT(check_gradient<double>([&](const TensorD& x) { return value(x, s, q); }, go, o, 1e-6), 1e-3);
    EXPECT_LT(check_gradient<double>([&](const TensorD& x) { return value(o, x, q); }, gs, s, 1e-6), 1e-3);
  }
}

TEST(NaiveAttention, CosineSoftmaxAndGradient) {
  Rng rng(12);
  const auto o = random_tensor<double>({4, 3}, rng), s = random_tensor<double>({4, 3}, rng);
  const auto pair = make_pair(o, s, 2, 2);
  const auto w = naive_attention(pair);
  std::vector<double> cos;
  for (std::size_t p = 0; p < 4; ++p) cos.push_back(cosine64(&o.values()[p * 3], &s.values()[p * 3], 3));
  const auto ref = softmax64(cos);
  for (std::size_t p = 0; p < 4; ++p) {
    EXPECT_NEAR(w.w_s[p], ref[p], 1e-9);
    EXPECT_NEAR(w.w_o[p], ref[p], 1e-9);
  }
  const auto cs = random_tensor<double>({4}, rng), co = random_tensor<double>({4}, rng);
  const auto g = naive_attention_backward(pair, w, BasicImportanceWeights<double>{cs, co});
  const auto value = [&](const TensorD& oo, const TensorD& ss) {
    const auto ww = naive_attention(make_pair(oo, ss, 2, 2));
    return ops::dot<double>(ww.w_s.data(), cs.data()) + ops::dot<double>(ww.w_o.data(), co.data());
  };
  EXPECT_LT(check_gradient<double>([&](const TensorD& x) { return value(x, s); }, g.optical, o, 1e-6), 1e-3);
  EXPECT_LT(check_gradient<double>([&](const TensorD& x) { return value(o, x); }, g.sar, s, 1e-6), 1e-3);
}

TEST(TokenDrop, Examples) {
  Rng rng(13);
  const auto grid = make_token_grid(random_tensor({4, 2}, rng), 2, 2, Modality::optical);
  const Tensor w({4}, {0.1f, 0.4f, 0.2f, 0.3f});
  for (auto strategy : {DropStrategy::random, DropStrategy::importance}) {
    const auto same = token_drop(grid, w, 1.0, strategy, 5);
    EXPECT_EQ(same.tokens, grid.tokens);
    EXPECT_EQ(same.cells, grid.cells);
  }
  EXPECT_EQ(kept_indices(w, 0.5, DropStrategy::importance, 0), (std::vector<std::size_t>{1, 3}));
  const auto kept = token_drop(grid, w, 0.5, DropStrategy::importance, 0);
  EXPECT_EQ(kept.cells, (std::vector<std::size_t>{1, 3}));
  for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(kept.tokens(1, j), grid.tokens(3, j));
}

TEST(TokenDrop, TiesAndRandomContract) {
  const Tensor tied({5}, 0.2f);
  EXPECT_EQ(kept_indices(tied, 0.4, DropStrategy::importance, 0), (std::vector<std::size_t>{0, 1}));
  const Tensor w({10}, 0.1f);
  for (double r : {0.1, 0.3, 0.55, 0.7, 0.99}) {
    const auto a = kept_indices(w, r, DropStrategy::random, 42);
    EXPECT_EQ(a, kept_indices(w, r, DropStrategy::random, 42));
    EXPECT_EQ(a.size(), static_cast<std::size_t>(std::ceil(r * 10 - 1e-12)));
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  }
  EXPECT_EQ(kept_count(10, 0.3), 3u);  // 0.3·10 is 3.0000000000000004 in binary
  EXPECT_ANY_THROW(kept_count(10, 0.0));
  EXPECT_ANY_THROW(kept_count(10, 1.5));
}
