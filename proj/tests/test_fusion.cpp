#include <gtest/gtest.h>

#include "mabsrec/error.hpp"
#include "mabsrec/fusion.hpp"
#include "mabsrec/numeric/gradcheck.hpp"
#include "test_support.hpp"

namespace mabsrec {
namespace {

using testing::max_abs_diff;
using testing::random_matrix;

ParamSet fusion_params(std::size_t d, std::uint64_t seed) {
  ParamSet p;
  Rng rng(seed);
  init_fusion_params(p, d, rng);
  for (const char* b : {"fusion.b1", "fusion.b2"})
    for (double& v : p.value(b).values()) v = rng.uniform(-0.5, 0.5);
  return p;
}

Tensor fused_value(const Tensor& xp, const Tensor& xa, const Tensor& xd, bool triple = false) {
  Tape tape(false);
  return fuse_features(tape.constant(xp), tape.constant(xa), tape.constant(xd), triple).value();
}

Tensor scores_value(ParamSet& p, const Tensor& fused) {
  Tape tape(false);
  return bias_scores(tape, p, tape.constant(fused)).value();
}

Tensor predict_value(const Tensor& s, const Tensor& xp, const Tensor& xa, const Tensor& xd) {
  Tape tape(false);
  return predict_vector(tape.constant(s), tape.constant(xp), tape.constant(xa), tape.constant(xd)).value();
}

TEST(FuseFeatures, ZeroInputsGiveZeroFeature) {
  const Tensor z = Tensor::matrix(1, 5);
  const Tensor o = fused_value(z, z, z);
  EXPECT_EQ(o.cols(), 30u);
  for (double v : o.values()) EXPECT_EQ(v, 0.0);
}

TEST(FuseFeatures, UnitVectorsLayout) {
  const Tensor o = fused_value(Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(1, 2, {0, 1}), Tensor::matrix(1, 2, {0, 0}));
  const std::vector<double> expected{1, 0, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1};
  EXPECT_EQ(std::vector<double>(o.values().begin(), o.values().end()), expected);
}

TEST(FuseFeatures, TripleSumReplacesLastBlock) {
  const Tensor o = fused_value(Tensor::matrix(1, 1, {1}), Tensor::matrix(1, 1, {2}), Tensor::matrix(1, 1, {4}), true);
  const std::vector<double> expected{1, 2, 4, 3, 5, 7};
  EXPECT_EQ(std::vector<double>(o.values().begin(), o.values().end()), expected);
}

TEST(FuseFeatures, SwappingPopularAndSubjectivePermutesBlocks) {
  Rng rng(2);
  const std::size_t d = 3;
  const Tensor a = random_matrix(2, d, rng), b = random_matrix(2, d, rng), c = random_matrix(2, d, rng);
  const Tensor o = fused_value(a, b, c), s = fused_value(b, a, c);
  // Blocks: 0 P, 1 A, 2 D, 3 P+A, 4 P+D, 5 A+D. Swapping P and A maps 0<->1, 4<->5, fixes 2 and 3.
  const std::size_t perm[] = {1, 0, 2, 3, 5, 4};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t blk = 0; blk < 6; ++blk)
      for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(s(r, perm[blk] * d + k), o(r, blk * d + k));
}

TEST(FuseFeatures, ShapeMismatchThrows) {
  EXPECT_THROW(fused_value(Tensor::matrix(1, 2), Tensor::matrix(1, 3), Tensor::matrix(1, 2)), ShapeError);
}

TEST(BiasScores, ZeroParametersGiveHalves) {
  ParamSet p = fusion_params(4, 1);
  for (auto& e : p) e.value.fill(0.0);
  Rng rng(3);
  const Tensor s = scores_value(p, random_matrix(2, 24, rng));
  for (double v : s.values()) EXPECT_EQ(v, 0.5);
}

TEST(BiasScores, SaturatedBias) {
  ParamSet p = fusion_params(4, 1);
  for (auto& e : p) e.value.fill(0.0);
  p.value("fusion.b2") = Tensor::vector({10.0, -10.0, 0.0});
  Rng rng(4);
  const Tensor s = scores_value(p, random_matrix(1, 24, rng));
  EXPECT_NEAR(s[0], 1.0, 1e-4);
  EXPECT_NEAR(s[1], 0.0, 1e-4);
  EXPECT_NEAR(s[2], 0.5, 1e-4);
}

TEST(BiasScores, MatchesScalarLoopOracle) {
  const std::size_t d = 5;
  ParamSet p = fusion_params(d, 5);
  Rng rng(5);
  const Tensor o = random_matrix(3, 6 * d, rng, 2.0);
  const Tensor s = scores_value(p, o);
  const Tensor &w1 = p.value("fusion.w1"), &b1 = p.value("fusion.b1"), &w2 = p.value("fusion.w2"), &b2 = p.value("fusion.b2");
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> h(d);
    for (std::size_t j = 0; j < d; ++j) {
      double z = b1[j];
      for (std::size_t k = 0; k < 6 * d; ++k) z += o(r, k) * w1(k, j);
      h[j] = z > 0.0 ? z : 0.0;
    }
    for (std::size_t m = 0; m < 3; ++m) {
      double z = b2[m];
      for (std::size_t j = 0; j < d; ++j) z += h[j] * w2(j, m);
      EXPECT_NEAR(s(r, m), 1.0 / (1.0 + std::exp(-z)), 1e-10);
      EXPECT_GT(s(r, m), 0.0);
      EXPECT_LT(s(r, m), 1.0);
    }
  }
}

TEST(BiasScores, WrongFeatureWidthThrows) {
  ParamSet p = fusion_params(4, 1);
  EXPECT_THROW(scores_value(p, Tensor::matrix(1, 20)), ShapeError);
}

TEST(BiasScores, ScoresNeedNotSumToOne) {
  ParamSet p = fusion_params(4, 1);
  for (auto& e : p) e.value.fill(0.0);
  const Tensor s = scores_value(p, Tensor::matrix(1, 24));
  EXPECT_DOUBLE_EQ(s[0] + s[1] + s[2], 1.5);
  const Tensor e = predict_value(s, Tensor::matrix(1, 2, {1, 2}), Tensor::matrix(1, 2, {3, 4}), Tensor::matrix(1, 2, {5, 6}));
  EXPECT_DOUBLE_EQ(e(0, 0), 4.5);
  EXPECT_DOUBLE_EQ(e(0, 1), 6.0);
}

TEST(PredictVector, SelectorScores) {
  Rng rng(6);
  const Tensor xp = random_matrix(1, 4, rng), xa = random_matrix(1, 4, rng), xd = random_matrix(1, 4, rng);
  EXPECT_EQ(predict_value(Tensor::matrix(1, 3, {1, 0, 0}), xp, xa, xd), xp);
}

TEST(PredictVector, EqualScoresOnEqualViews) {
  const Tensor v = Tensor::matrix(1, 3, {0.2, -1.0, 4.0});
  const Tensor e = predict_value(Tensor::matrix(1, 3, {0.5, 0.5, 0.5}), v, v, v);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(e(0, c), 1.5 * v(0, c));
}

TEST(PredictVector, MatchesWeightedSumLoop) {
  Rng rng(7);
  const Tensor s = random_matrix(4, 3, rng), xp = random_matrix(4, 6, rng), xa = random_matrix(4, 6, rng), xd = random_matrix(4, 6, rng);
  const Tensor e = predict_value(s, xp, xa, xd);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(e(r, c), s(r, 0) * xp(r, c) + s(r, 1) * xa(r, c) + s(r, 2) * xd(r, c), 1e-12);
}

TEST(PredictVector, LinearInEachView) {
  Rng rng(8);
  const Tensor s = random_matrix(1, 3, rng), xp = random_matrix(1, 5, rng), xa = random_matrix(1, 5, rng), xd = random_matrix(1, 5, rng);
  const double alpha = -2.75;
  Tensor scaled = xp;
  for (double& v : scaled.values()) v *= alpha;
  const Tensor with = predict_value(s, scaled, xa, xd);
  const Tensor without = predict_value(s, Tensor::matrix(1, 5), xa, xd);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(with(0, c) - without(0, c), alpha * s(0, 0) * xp(0, c), 1e-12);
}

TEST(PredictVector, ShapeErrors) {
  EXPECT_THROW(predict_value(Tensor::matrix(1, 2), Tensor::matrix(1, 2), Tensor::matrix(1, 2), Tensor::matrix(1, 2)), ShapeError);
  EXPECT_THROW(predict_value(Tensor::matrix(2, 3), Tensor::matrix(1, 2), Tensor::matrix(1, 2), Tensor::matrix(1, 2)), ShapeError);
}

TEST(FusionParams, CountAndShapes) {
  ParamSet p = fusion_params(7, 1);
  EXPECT_EQ(p.value("fusion.w1").rows(), 42u);
  EXPECT_EQ(p.value("fusion.w1").cols(), 7u);
  EXPECT_EQ(p.value("fusion.w2").cols(), 3u);
  EXPECT_EQ(p.scalar_count(), fusion_param_count(7));
  EXPECT_EQ(fusion_param_count(7), 6u * 49 + 7 + 21 + 3);
}

TEST(FusionHead, GradientsMatchFiniteDifferences) {
  const std::size_t d = 4;
  ParamSet p = fusion_params(d, 9);
  Rng rng(9);
  p.add("xp", random_matrix(3, d, rng));
  p.add("xa", random_matrix(3, d, rng));
  p.add("xd", random_matrix(3, d, rng));
  const Tensor probe = random_matrix(3, d, rng);
  for (bool triple : {false, true}) {
    const auto report = numeric::finite_diff_check(
        [&](Tape& t) {
          Var xp = t.parameter(p, "xp"), xa = t.parameter(p, "xa"), xd = t.parameter(p, "xd");
          Var s = bias_scores(t, p, fuse_features(xp, xa, xd, triple));
          return numeric::sum(numeric::mul(predict_vector(s, xp, xa, xd), t.constant(probe)));
        },
        p);
    for (const auto& t : report.tensors) EXPECT_LT(t.max_relative_error, 1e-4) << t.name;
  }
}

}  // namespace
}  // namespace mabsrec
