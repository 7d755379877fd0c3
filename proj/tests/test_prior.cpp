#include <gtest/gtest.h>

#include "support.hpp"

using namespace iterseg;
using testsupport::random_tensor;

namespace {

FeatureMap<double> fmap(Tensor<double> t) { return {std::move(t), FeatureLevel::high, 8}; }

// Scalar triple-loop reference for the whole prior pipeline.
std::vector<double> oracle_prior(const Tensor<double>& q, const Tensor<double>& s) {
  const int c = q.channels(), n = static_cast<int>(q.plane());
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double best = -2;
    for (int j = 0; j < n; ++j) {
      double dot = 0, nq = 0, ns = 0;
      for (int k = 0; k < c; ++k) {
        dot += q.channel(k)[i] * s.channel(k)[j];
        nq += q.channel(k)[i] * q.channel(k)[i];
        ns += s.channel(k)[j] * s.channel(k)[j];
      }
      const double cos = (nq == 0 || ns == 0) ? 0.0 : dot / (std::sqrt(nq) * std::sqrt(ns));
      best = std::max(best, cos);
    }
    v[static_cast<std::size_t>(i)] = best;
  }
  const double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
  for (auto& x : v) x = (x - lo) / (hi - lo + 1e-7);
  return v;
}

}  // namespace

TEST(Cosine, SelfAndOrthogonal) {
  Tensor<double> q({2, 1, 2}, std::vector<double>{1, 0, 0, 1});  // cells (1,0) and (0,1)
  const auto sim = pairwise_cosine(fmap(q), fmap(q));
  EXPECT_DOUBLE_EQ(sim[0], 1.0);
  EXPECT_DOUBLE_EQ(sim[1], 0.0);
  EXPECT_DOUBLE_EQ(sim[3], 1.0);
}

TEST(Cosine, MatchesDoubleLoopOracle) {
  std::mt19937_64 rng(1);
  const auto q = random_tensor<double>({3, 2, 2}, rng), s = random_tensor<double>({3, 2, 2}, rng);
  const auto sim = pairwise_cosine(fmap(q), fmap(s));
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      double dot = 0, a = 0, b = 0;
      for (int k = 0; k < 3; ++k) {
        dot += q.channel(k)[i] * s.channel(k)[j];
        a += q.channel(k)[i] * q.channel(k)[i];
        b += s.channel(k)[j] * s.channel(k)[j];
      }
      EXPECT_NEAR(sim[static_cast<std::size_t>(i * 4 + j)], dot / std::sqrt(a * b), 1e-6);
    }
  }
}

TEST(Cosine, ZeroNormIsZeroAndChannelMismatchThrows) {
  Tensor<double> q({2, 1, 2}, std::vector<double>{0, 1, 0, 1});
  const auto sim = pairwise_cosine(fmap(q), fmap(q));
  EXPECT_EQ(sim[0], 0.0);
  EXPECT_EQ(sim[1], 0.0);
  EXPECT_THROW(pairwise_cosine(fmap(Tensor<double>::chw(2, 2, 2)), fmap(Tensor<double>::chw(3, 2, 2))), ShapeError);
}

TEST(Cosine, EntriesWithinUnitRange) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const auto q = random_tensor<float>({16, 4, 4}, rng), s = random_tensor<float>({16, 4, 4}, rng);
    const auto sim = pairwise_cosine<float>({q, FeatureLevel::high, 8}, {s, FeatureLevel::high, 8});
    for (float v : sim.values()) ASSERT_TRUE(v >= -1.0f && v <= 1.0f);
  }
}

TEST(MaxOverSupport, Examples) {
  Tensor<double> eye({4, 4});
  for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 5)] = 1.0;
  EXPECT_TRUE(testsupport::all_equal(max_over_support(eye, 2, 2), 1.0));
  std::mt19937_64 rng(3);
  const auto m = random_tensor<double>({4, 4}, rng);
  const auto v = max_over_support(m, 2, 2);
  for (int i = 0; i < 4; ++i) {
    double best = m[static_cast<std::size_t>(i * 4)];
    for (int j = 1; j < 4; ++j) best = std::max(best, m[static_cast<std::size_t>(i * 4 + j)]);
    EXPECT_EQ(v[static_cast<std::size_t>(i)], best);
  }
  EXPECT_THROW(max_over_support(m, 3, 2), ShapeError);
}

TEST(MinMax, ConstantMapIsZero) {
  EXPECT_TRUE(testsupport::all_equal(minmax_normalize(Tensor<double>({1, 3, 3}, 0.42)).data, 0.0));
}

TEST(MinMax, HandArithmetic) {
  Tensor<double> v({1, 1, 3}, std::vector<double>{0.2, 0.45, 0.7});
  const auto p = minmax_normalize(v);
  EXPECT_EQ(p.data[0], 0.0);
  EXPECT_NEAR(p.data[2], 0.5 / (0.5 + 1e-7), 1e-15);
  EXPECT_NEAR(p.data[2], 0.9999998, 1e-7);
}

TEST(Prior, EqualFeaturesReachOneMinusEpsAndZero) {
  Tensor<double> f({2, 1, 3}, std::vector<double>{1, 0, 1, 0, 1, 1});
  // query = support, but one query cell is only weakly similar to the rest;
  // the pixel vectors are distinct so the max over support is 1 everywhere
  // except where we break it below.
  Tensor<double> q = f;
  q(0, 0, 2) = -1;  // (-1, 1): cos with (0,1) is 0.707, not 1
  const auto p = generate_prior(fmap(q), fmap(f));
  const auto oracle = oracle_prior(q, f);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p.data[static_cast<std::size_t>(i)], oracle[static_cast<std::size_t>(i)], 1e-12);
  EXPECT_NEAR(max_value(p.data), 1.0 - 1e-7 / (1 - std::sqrt(0.5) + 1e-7), 1e-12);
  EXPECT_EQ(min_value(p.data), 0.0);
  EXPECT_EQ(p.kind, ProbKind::prior);
}

TEST(Prior, MaskedOutSupportGivesZeros) {
  std::mt19937_64 rng(4);
  const auto q = random_tensor<double>({4, 3, 3}, rng);
  EXPECT_TRUE(testsupport::all_equal(generate_prior(fmap(q), fmap(Tensor<double>::chw(4, 3, 3))).data, 0.0));
}

TEST(Prior, SinglePixelIsZero) {
  const auto p = generate_prior(fmap(Tensor<double>({2, 1, 1}, std::vector<double>{1, 2})),
                                fmap(Tensor<double>({2, 1, 1}, std::vector<double>{3, 1})));
  ASSERT_EQ(p.data.size(), 1u);
  EXPECT_EQ(p.data[0], 0.0);
}

TEST(Prior, MatchesTripleLoopOracleOnRandomInstances) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> dim(1, 8), ch(1, 16);
  for (int t = 0; t < 200; ++t) {
    const int h = dim(rng), w = dim(rng), c = ch(rng);
    const auto q = random_tensor<double>({c, h, w}, rng);
    auto s = random_tensor<double>({c, h, w}, rng);
    const auto p = generate_prior(fmap(q), fmap(s));
    const auto o = oracle_prior(q, s);
    for (std::size_t i = 0; i < o.size(); ++i) ASSERT_NEAR(p.data[i], o[i], 1e-5);
  }
}

TEST(Prior, PositiveScaleInvariance) {
  std::mt19937_64 rng(6);
  const auto q = random_tensor<double>({5, 4, 4}, rng), s = random_tensor<double>({5, 4, 4}, rng);
  const auto base = generate_prior(fmap(q), fmap(s));
  const auto scaled = [](Tensor<double> t, double a) {
    for (auto& v : t.values()) v *= a;
    return t;
  };
  // powers of two scale exactly in floating point
  EXPECT_EQ(generate_prior(fmap(scaled(q, 4.0)), fmap(scaled(s, 0.125))).data, base.data);
  const auto any = generate_prior(fmap(scaled(q, 3.7)), fmap(scaled(s, 0.31)));
  for (std::size_t i = 0; i < base.data.size(); ++i) EXPECT_NEAR(any.data[i], base.data[i], 1e-12);
}

TEST(Prior, SupportPermutationInvariance) {
  std::mt19937_64 rng(7);
  const auto q = random_tensor<double>({3, 3, 3}, rng), s = random_tensor<double>({3, 3, 3}, rng);
  std::vector<int> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> sp = s;
  for (int c = 0; c < 3; ++c) {
    for (int j = 0; j < 9; ++j) sp.channel(c)[j] = s.channel(c)[perm[static_cast<std::size_t>(j)]];
  }
  const auto a = max_over_support(pairwise_cosine(fmap(q), fmap(s)), 3, 3);
  const auto b = max_over_support(pairwise_cosine(fmap(q), fmap(sp)), 3, 3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(Prior, DifferentSupportResolutionIsResized) {
  std::mt19937_64 rng(8);
  const auto q = random_tensor<double>({3, 4, 4}, rng), s = random_tensor<double>({3, 2, 2}, rng);
  const auto p = generate_prior(fmap(q), fmap(s));
  const auto o = oracle_prior(q, resize_bilinear(s, 4, 4));
  for (std::size_t i = 0; i < o.size(); ++i) EXPECT_NEAR(p.data[i], o[i], 1e-12);
}
