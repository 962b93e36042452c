// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "support.hpp"

using namespace sgr;

TEST(MakeEtf, TwoClassesAreAntipodal) {
  const EtfClassifier e = make_etf(2, 5, 1);
  double ip = 0;
  for (std::size_t i = 0; i < 5; ++i) ip += e.M.at(0, i) * e.M.at(1, i);
  EXPECT_NEAR(ip, -1.0, 1e-12);
}

TEST(MakeEtf, TenClassOffDiagonal) {
  const Tensor G = matmul(make_etf(10, 16, 3).M, make_etf(10, 16, 3).M, false, true);
  EXPECT_NEAR(G.at(2, 7), -0.111111, 1e-6);
  EXPECT_NEAR(G.at(2, 7), -1.0 / 9.0, 1e-12);
}

TEST(MakeEtf, GramStructureAcrossSizes) {
  for (std::size_t K : {2, 3, 10, 100})
    for (std::size_t d : {K, K + 1, 4 * K})
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const EtfClassifier e = make_etf(K, d, seed);
        ASSERT_EQ(e.classes(), K);
        ASSERT_EQ(e.dim(), d);
        const Tensor G = matmul(e.M, e.M, false, true);
        const double c = static_cast<double>(K) / static_cast<double>(K - 1);
        double dev = 0;
        for (std::size_t i = 0; i < K; ++i)
          for (std::size_t j = 0; j < K; ++j)
            dev = std::max(dev, std::abs(G.at(i, j) - c * ((i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(K))));
        EXPECT_LE(dev, 1e-9) << "K=" << K << " d=" << d << " seed=" << seed;
        EXPECT_TRUE(gram_check(e.M, 1e-9).ok);
      }
}

TEST(MakeEtf, DeterministicAndSeedDependent) {
  EXPECT_EQ(make_etf(4, 6, 9).M, make_etf(4, 6, 9).M);
  EXPECT_FALSE(make_etf(4, 6, 9).M == make_etf(4, 6, 10).M);
}

TEST(MakeEtf, RejectsNarrowFeatures) {
  EXPECT_THROW(make_etf(5, 4, 0), UnsupportedDimensionError);
  EXPECT_THROW(make_etf(1, 4, 0), std::invalid_argument);
}

TEST(GramCheck, IdentityIsNotAnEtf) {
  const GramReport r = gram_check(Tensor::identity(3), 1e-9);
  EXPECT_FALSE(r.ok);
  EXPECT_NEAR(r.max_deviation, 0.5, 1e-15);
}

TEST(GramCheck, PerturbationDetectedAtTightTolerance) {
  Tensor M = make_etf(6, 8, 2).M;
  auto rng = make_rng(5);
  axpy(1e-6, randn(M.shape(), rng), M);
  EXPECT_FALSE(gram_check(M, 1e-9).ok);
  EXPECT_TRUE(gram_check(M, 1e-4).ok);
}

TEST(CeDelta, OneHotGivesZero) {
  const EtfClassifier e = make_etf(4, 5, 0);
  Tensor p(Shape{4});
  p[2] = 1.0;
  EXPECT_EQ(max_abs(ce_delta(p, 2, e)), 0.0);
}

TEST(CeDelta, TwoClassHalfProbabilities) {
  const EtfClassifier e = make_etf(2, 3, 4);
  const Tensor d = ce_delta(Tensor::vector({0.5, 0.5}), 1, e);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(d[i], 0.5 * (e.M.at(0, i) - e.M.at(1, i)), 1e-15);
}

TEST(CeDelta, EqualsAutodiffGradient) {
  auto rng = make_rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const EtfClassifier e = make_etf(5, 7, trial);
    const Tensor x = randn(Shape{1, 7}, rng, 2.0);
    const std::size_t y = rng() % 5;
    Tape t;
    Var xv = t.variable(x);
    const Tensor g = t.grad(softmax_cross_entropy(etf_logits(xv, e), std::vector<std::size_t>{y}), {xv})[0];
    const Tensor p = softmax_rows(matmul(x, e.M, false, true));
    const Tensor d = ce_delta(Tensor(Shape{5}, p.values()), y, e);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(d[i], g[i], 1e-10);
  }
}

TEST(CeDelta, RejectsInvalidProbabilities) {
  const EtfClassifier e = make_etf(3, 3, 0);
  EXPECT_THROW(ce_delta(Tensor::vector({0.5, 0.6, 0.0}), 0, e), std::invalid_argument);
  EXPECT_THROW(ce_delta(Tensor::vector({1.2, -0.2, 0.0}), 0, e), std::invalid_argument);
  EXPECT_THROW(ce_delta(Tensor::vector({0.5, 0.5}), 0, e), DimensionError);
  EXPECT_THROW(ce_delta(Tensor::vector({0.5, 0.5, 0.0}), 3, e), std::out_of_range);
}

TEST(EtfLemma, StepAlongNegativeDeltaStrictlyLowersLoss) {
  const EtfLemmaReport r = check_etf_lemma(1000, 11);
  EXPECT_EQ(r.draws, 1000u);
  EXPECT_EQ(r.strict, 1000u);
  EXPECT_GT(r.min_decrease, 0.0);
}
