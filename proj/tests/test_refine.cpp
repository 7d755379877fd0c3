#include <gtest/gtest.h>

#include "support.hpp"

using namespace iterseg;
using testsupport::random_tensor;

namespace {

// Ignores its inputs and predicts p = 0.5 everywhere.
struct ConstantNet {
  Var<double> forward(const Var<double>&, const Var<double>&, const Var<double>& query) const {
    return Var<double>::constant(Tensor<double>::chw(2, query.value().height(), query.value().width()));
  }
};

// Records its id on every call; logits depend on the prior input.
struct LoggingNet {
  int id = 0;
  std::vector<int>* log = nullptr;
  Var<double> forward(const Var<double>& prior, const Var<double>&, const Var<double>&) const {
    log->push_back(id);
    const auto& p = prior.value();
    Tensor<double> z = Tensor<double>::chw(2, p.height(), p.width());
    for (std::size_t i = 0; i < p.size(); ++i) z.channel(1)[i] = 3.0 * p[i] - 1.0 + 0.1 * id;
    return Var<double>::constant(z);
  }
};

ProbMap<double> rand_prob(int h, int w, std::mt19937_64& rng) {
  return {random_tensor<double>({1, h, w}, rng, 0, 1), ProbKind::prior};
}

FeatureMap<double> rand_feat(int c, int h, int w, std::mt19937_64& rng) {
  return {random_tensor<double>({c, h, w}, rng), FeatureLevel::mid, 4};
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Softmax, SymmetricLogitsGiveHalf) {
  EXPECT_TRUE(testsupport::all_equal(softmax_binary(Tensor<double>::chw(2, 3, 3, 1.7)).data, 0.5));
}

TEST(Softmax, LargeGapNoOverflow) {
  Tensor<double> z = Tensor<double>::chw(2, 1, 2);
  z.channel(0)[0] = 1000;
  z.channel(1)[0] = 1020;
  z.channel(1)[1] = 20;
  const auto p = softmax_binary(z);
  EXPECT_NEAR(p.data[0], sigmoid(20), 1e-8);
  EXPECT_NEAR(p.data[1], sigmoid(20), 1e-8);
  EXPECT_TRUE(all_finite(p.data));
}

TEST(Softmax, ComplementIsExact) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto z = random_tensor<double>({2, 3, 3}, rng, -30, 30);
    Tensor<double> swapped = Tensor<double>::chw(2, 3, 3);
    std::copy(z.channel(0), z.channel(0) + 9, swapped.channel(1));
    std::copy(z.channel(1), z.channel(1) + 9, swapped.channel(0));
    const auto a = softmax_binary(z), b = softmax_binary(swapped);
    for (std::size_t i = 0; i < 9; ++i) ASSERT_EQ(a.data[i] + b.data[i], 1.0);
  }
}

TEST(AugmentPrior, Examples) {
  std::mt19937_64 rng(2);
  const auto p = rand_prob(4, 4, rng);
  const ProbMap<double> ones{Tensor<double>::chw(1, 4, 4, 1.0), ProbKind::prior};
  EXPECT_EQ(augment_prior(p, ones).data, minmax_normalize(p.data).data);
  const ProbMap<double> zeros{Tensor<double>::chw(1, 4, 4), ProbKind::estimate};
  EXPECT_TRUE(testsupport::all_equal(augment_prior(zeros, p).data, 0.0));
  EXPECT_EQ(augment_prior(p, ones).kind, ProbKind::augmented);
  EXPECT_THROW(augment_prior(p, rand_prob(2, 2, rng)), ShapeError);
}

TEST(AugmentPrior, MatchesScalarOracle) {
  std::mt19937_64 rng(3);
  const auto p = rand_prob(4, 4, rng), s = rand_prob(4, 4, rng);
  std::vector<double> prod(16);
  for (std::size_t i = 0; i < 16; ++i) prod[i] = p.data[i] * s.data[i];
  const double lo = *std::min_element(prod.begin(), prod.end()), hi = *std::max_element(prod.begin(), prod.end());
  const auto a = augment_prior(p, s);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(a.data[i], (prod[i] - lo) / (hi - lo + 1e-7), 1e-7);
}

TEST(Binarize, StrictThreshold) {
  ProbMap<double> p{Tensor<double>({1, 1, 3}, std::vector<double>{0.5, 0.5 + 1e-9, 0.49}), ProbKind::estimate};
  const Mask m = binarize(p);
  EXPECT_EQ(m[0], 0);
  EXPECT_EQ(m[1], 1);
  EXPECT_EQ(m[2], 0);
}

TEST(Binarize, MatchesLoopOracleAndUpsamples) {
  std::mt19937_64 rng(4);
  const auto p = rand_prob(5, 5, rng);
  const Mask m = binarize(p, 0.3);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(m[i], p.data[i] > 0.3 ? 1 : 0);
  const Mask up = binarize(p, 0.5, 17, 17);
  const auto probs = resize_bilinear(p.data, 17, 17);
  ASSERT_EQ(up.height(), 17);
  for (std::size_t i = 0; i < up.size(); ++i) EXPECT_EQ(up[i], probs[i] > 0.5 ? 1 : 0);
}

TEST(Cascade, SingleStepIsOneForwardPass) {
  std::mt19937_64 rng(5);
  FusionNet<double> net(FusionConfig{4, 5, 4, {}}, 6);
  const auto prior = rand_prob(6, 6, rng);
  const auto s = rand_feat(4, 6, 6, rng), q = rand_feat(4, 6, 6, rng);
  const std::vector<FusionNet<double>> nets{net};
  for (PriorMode mode : {PriorMode::plain, PriorMode::augmented}) {
    CascadeConfig cfg{1, WeightMode::identical, mode, 0.5};
    const auto trace = run_cascade<double, FusionNet<double>>(nets, prior, s, q, cfg, 24, 24);
    ASSERT_EQ(trace.estimates.size(), 1u);
    const auto direct = softmax_binary(net.forward(FusionInput<double>{prior, s, q}).value());
    EXPECT_EQ(trace.estimates[0].data, direct.data);
    EXPECT_EQ(trace.final_mask_full.height(), 24);
  }
}

TEST(Cascade, ConstantNetworkFixedPoint) {
  std::mt19937_64 rng(7);
  const std::vector<ConstantNet> nets(1);
  CascadeConfig cfg{2, WeightMode::identical, PriorMode::plain, 0.5};
  const auto trace =
      run_cascade<double, ConstantNet>(nets, rand_prob(4, 4, rng), rand_feat(2, 4, 4, rng), rand_feat(2, 4, 4, rng), cfg, 4, 4);
  ASSERT_EQ(trace.estimates.size(), 2u);
  EXPECT_TRUE(testsupport::all_equal(trace.estimates[0].data, 0.5));
  EXPECT_TRUE(testsupport::all_equal(trace.estimates[1].data, 0.5));
  EXPECT_EQ(foreground_count(trace.final_mask), 0u);
}

TEST(Cascade, DifferentWeightsInvokedInOrder) {
  std::mt19937_64 rng(8);
  std::vector<int> log;
  const std::vector<LoggingNet> nets{{0, &log}, {1, &log}, {2, &log}};
  CascadeConfig cfg{3, WeightMode::different, PriorMode::augmented, 0.5};
  const auto trace =
      run_cascade<double, LoggingNet>(nets, rand_prob(4, 4, rng), rand_feat(2, 4, 4, rng), rand_feat(2, 4, 4, rng), cfg, 8, 8);
  EXPECT_EQ(log, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(trace.estimates.size(), 3u);
  EXPECT_EQ(trace.augmented.size(), 3u);
}

TEST(Cascade, NetworkCountMismatchThrows) {
  std::mt19937_64 rng(9);
  std::vector<int> log;
  const std::vector<LoggingNet> two{{0, &log}, {1, &log}};
  const auto prior = rand_prob(4, 4, rng);
  const auto f = rand_feat(2, 4, 4, rng);
  EXPECT_THROW((run_cascade<double, LoggingNet>(two, prior, f, f, CascadeConfig{3, WeightMode::different, PriorMode::plain, 0.5}, 4, 4)),
               std::invalid_argument);
  EXPECT_THROW((run_cascade<double, LoggingNet>(two, prior, f, f, CascadeConfig{2, WeightMode::identical, PriorMode::plain, 0.5}, 4, 4)),
               std::invalid_argument);
}

TEST(Cascade, IdenticalWeightsEqualManualUnroll) {
  std::mt19937_64 rng(10);
  FusionNet<double> net(FusionConfig{3, 4, 3, {}}, 11);
  const auto prior = rand_prob(6, 6, rng);
  const auto s = rand_feat(3, 6, 6, rng), q = rand_feat(3, 6, 6, rng);
  const std::vector<FusionNet<double>> nets{net};
  for (PriorMode mode : {PriorMode::plain, PriorMode::augmented}) {
    const auto trace = run_cascade<double, FusionNet<double>>(nets, prior, s, q, CascadeConfig{3, WeightMode::identical, mode, 0.5}, 6, 6);
    ProbMap<double> input = prior;
    for (int t = 0; t < 3; ++t) {
      const auto p = softmax_binary(net.forward(FusionInput<double>{input, s, q}).value());
      const auto aug = augment_prior(p, prior);
      EXPECT_EQ(trace.estimates[static_cast<std::size_t>(t)].data, p.data);
      EXPECT_EQ(trace.augmented[static_cast<std::size_t>(t)].data, aug.data);
      input = mode == PriorMode::augmented ? aug : p;
    }
  }
}

TEST(Cascade, TraceRangesHold) {
  std::mt19937_64 rng(12);
  std::vector<FusionNet<float>> nets;
  for (int i = 0; i < 2; ++i) nets.emplace_back(FusionConfig{3, 4, 2, {}}, 20 + i);
  for (int t = 0; t < 200; ++t) {
    ProbMap<float> prior{random_tensor<float>({1, 5, 5}, rng, 0, 1), ProbKind::prior};
    FeatureMap<float> s{random_tensor<float>({3, 5, 5}, rng, -5, 5), FeatureLevel::mid, 4};
    FeatureMap<float> q{random_tensor<float>({3, 5, 5}, rng, -5, 5), FeatureLevel::mid, 4};
    const auto trace = run_cascade<float, FusionNet<float>>(nets, prior, s, q, CascadeConfig{}, 20, 20);
    for (const auto& p : trace.estimates) ASSERT_TRUE(in_unit_interval(p.data));
    for (const auto& p : trace.augmented) {
      ASSERT_TRUE(in_unit_interval(p.data));
      ASSERT_EQ(min_value(p.data), 0.0f);
    }
  }
}

TEST(KShot, SingletonIsIdentity) {
  std::mt19937_64 rng(13);
  const auto f = rand_feat(3, 4, 4, rng);
  const auto p = rand_prob(4, 4, rng);
  const auto [mf, mp] = kshot_aggregate<double>({f}, {p});
  EXPECT_EQ(mf.data, f.data);
  EXPECT_EQ(mp.data, p.data);
}

TEST(KShot, IdenticalInputsAreIdempotent) {
  std::mt19937_64 rng(14);
  const auto f = rand_feat(3, 4, 4, rng);
  const auto p = rand_prob(4, 4, rng);
  const auto [mf, mp] = kshot_aggregate<double>({f, f}, {p, p});
  EXPECT_EQ(mf.data, f.data);
  EXPECT_EQ(mp.data, p.data);
  const auto [mf5, mp5] = kshot_aggregate<double>({f, f, f, f, f}, {p, p, p, p, p});
  // five-fold sums round, so K=5 is only equal to within an ulp or so
  for (std::size_t i = 0; i < f.data.size(); ++i) EXPECT_NEAR(mf5.data[i], f.data[i], 1e-14);
  for (std::size_t i = 0; i < p.data.size(); ++i) EXPECT_NEAR(mp5.data[i], p.data[i], 1e-15);
}

TEST(KShot, FiveRandomMatchLoopMean) {
  std::mt19937_64 rng(15);
  std::vector<FeatureMap<double>> fs;
  std::vector<ProbMap<double>> ps;
  for (int k = 0; k < 5; ++k) {
    fs.push_back(rand_feat(3, 4, 4, rng));
    ps.push_back(rand_prob(4, 4, rng));
  }
  const auto [mf, mp] = kshot_aggregate(fs, ps);
  for (std::size_t i = 0; i < mf.data.size(); ++i) {
    double acc = 0;
    for (const auto& f : fs) acc += f.data[i];
    EXPECT_NEAR(mf.data[i], acc / 5, 1e-7);
  }
  for (std::size_t i = 0; i < mp.data.size(); ++i) {
    double acc = 0;
    for (const auto& p : ps) acc += p.data[i];
    EXPECT_NEAR(mp.data[i], acc / 5, 1e-7);
  }
  EXPECT_TRUE(in_unit_interval(mp.data));
}

TEST(KShot, EmptyOrMismatchedThrows) {
  EXPECT_THROW(kshot_aggregate<double>({}, {}), std::invalid_argument);
  std::mt19937_64 rng(16);
  const auto f = rand_feat(2, 3, 3, rng);
  EXPECT_THROW(kshot_aggregate<double>({f, f}, {rand_prob(2, 2, rng)}), std::invalid_argument);
  EXPECT_THROW(kshot_aggregate<double>({f, rand_feat(2, 4, 4, rng)}, {rand_prob(2, 2, rng), rand_prob(2, 2, rng)}),
               ShapeError);
}

TEST(Pipeline, KShotPathDegeneratesToOneShot) {
  const Dataset d = generate_synthetic_dataset(testsupport::tiny_synth());
  Backbone<float> b(testsupport::tiny_backbone(), 17);
  const auto extract = backbone_extractor(b);
  Rng rng(18);
  const Episode one = sample_episode(d, 1, 1, rng);
  Episode five = one;
  five.support.assign(5, one.support[0]);
  const auto p1 = prepare_episode(extract, one), p5 = prepare_episode(extract, five);
  EXPECT_EQ(p1.prior.data, p5.prior.data);
  EXPECT_EQ(p1.support_mid.data, p5.support_mid.data);
  EXPECT_EQ(p1.query_mid.data, p5.query_mid.data);
  EXPECT_EQ(p1.target.height(), p1.query_mid.height());
}
