#include <cmath>

#include <gtest/gtest.h>

#include "sgpa/gradcheck.hpp"
#include "sgpa/svgp.hpp"
#include "support/decoupled_instance.hpp"

namespace sgpa {
namespace {

using testing::max_abs_diff;

Matrix m11(double x) { return Matrix::Constant(1, 1, x); }

TEST(SvgpPredict, PriorPosteriorGivesPrior) {
  std::mt19937_64 rng(1);
  const Matrix kzz = testing::random_spd(rng, 3);
  const CholeskyFactor f = cholesky(kzz);
  const Matrix kxz = testing::random_matrix(rng, 4, 3);
  const Vector kxx = Vector::Constant(4, 2.0);
  const SvgpPrediction p = svgp_predict(kxz, f, kxx, {Vector::Zero(3), f.lower});
  EXPECT_LT(p.mean.cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((p.var - kxx).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SvgpPredict, ScalarCase) {
  const SvgpPrediction p =
      svgp_predict(m11(0.5), cholesky(m11(1.0)), Vector::Ones(1), {Vector::Constant(1, 2.0), m11(1.0)});
  EXPECT_NEAR(p.mean(0), 1.0, 1e-15);
  EXPECT_NEAR(p.var(0), 1.0, 1e-15);
}

TEST(SvgpPredict, InterpolatesAtInducingSites) {
  std::mt19937_64 rng(2);
  KernelSpec s;
  s.lengthscales = Vector::Ones(2);
  const Matrix z = testing::random_matrix(rng, 4, 2, 2.0);
  const Matrix kzz = gram(s, z, z);
  const Vector y = testing::random_matrix(rng, 4, 1).col(0);
  const Matrix tiny = 1e-9 * Matrix::Identity(4, 4);
  const SvgpPrediction p = svgp_predict(kzz, cholesky(kzz, 0.0), gram_diag(s, z), {y, tiny});
  EXPECT_LT((p.mean - y).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(p.var.cwiseAbs().maxCoeff(), 1e-8);
}

TEST(SvgpPredict, ShapeMismatchThrows) {
  EXPECT_THROW(svgp_predict(Matrix::Zero(2, 3), cholesky(Matrix::Identity(2, 2)),
                            Vector::Ones(2), {Vector::Zero(2), Matrix::Identity(2, 2)}),
               ShapeError);
}

TEST(DecoupledPredict, ZeroWeightsGiveZeroMean) {
  std::mt19937_64 rng(3);
  auto in = testing::make_decoupled_instance(rng, 4, 2, 2, true);
  in.dv.v_a.setZero();
  in.dv.v_g.setZero();
  const auto m = decoupled_predict(in.k_q_ka, in.k_q_kg, in.k_kg_ka, in.grams.k_gg_chol,
                                   in.k_qq_diag, in.dv);
  EXPECT_EQ(m.mean, Matrix::Zero(4, 2));
}

TEST(DecoupledPredict, PriorCovarianceGivesPriorVariance) {
  std::mt19937_64 rng(4);
  auto in = testing::make_decoupled_instance(rng, 5, 3, 2, true);
  in.dv.s_g_chol = {in.grams.k_gg_chol.lower};
  const auto m = decoupled_predict(in.k_q_ka, in.k_q_kg, in.k_kg_ka, in.grams.k_gg_chol,
                                   in.k_qq_diag, in.dv);
  for (Eigen::Index d = 0; d < 2; ++d) {
    EXPECT_LT((m.var.col(d) - in.k_qq_diag).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(DecoupledPredict, NoGlobalPointsIsKernelAttention) {
  std::mt19937_64 rng(5);
  auto in = testing::make_decoupled_instance(rng, 4, 0, 3, true);
  const auto m = decoupled_predict(in.k_q_ka, in.k_q_kg, in.k_kg_ka, in.grams.k_gg_chol,
                                   in.k_qq_diag, in.dv);
  EXPECT_EQ(m.mean, Matrix(gram(in.spec, in.k_a, in.k_a) * in.dv.v_a));
  for (Eigen::Index d = 0; d < 3; ++d) {
    EXPECT_EQ(Vector(m.var.col(d)), in.k_qq_diag);
  }
}

TEST(DecoupledPredict, ValidatesFactorCount) {
  std::mt19937_64 rng(6);
  auto in = testing::make_decoupled_instance(rng, 3, 2, 2, false);
  in.dv.s_g_chol.pop_back();
  EXPECT_THROW(decoupled_predict(in.k_q_ka, in.k_q_kg, in.k_kg_ka, in.grams.k_gg_chol,
                                 in.k_qq_diag, in.dv),
               ShapeError);
}

TEST(DecoupledPredictCheng, OrthogonalCaseMatchesDecoupled) {
  // With v_g = 0 and v_a in the null space of K_kgka the correction vanishes.
  std::mt19937_64 rng(7);
  auto in = testing::make_decoupled_instance(rng, 5, 2, 2, true);
  in.dv.v_g.setZero();
  Eigen::FullPivLU<Matrix> lu(in.k_kg_ka);
  const Matrix null = lu.kernel();
  in.dv.v_a = null * testing::random_matrix(rng, null.cols(), 2);
  const auto a = decoupled_predict(in.k_q_ka, in.k_q_kg, in.k_kg_ka, in.grams.k_gg_chol,
                                   in.k_qq_diag, in.dv);
  const auto b = decoupled_predict_cheng(in.k_q_ka, in.k_q_kg, in.k_kg_ka,
                                         in.grams.k_gg_chol, in.k_qq_diag, in.dv);
  EXPECT_LT(max_abs_diff(a.mean, b.mean), 1e-12);
  EXPECT_EQ(a.var, b.var);
}

TEST(DecoupledPredictCheng, SharesVariance) {
  std::mt19937_64 rng(8);
  auto in = testing::make_decoupled_instance(rng, 4, 3, 3, false);
  const auto a = decoupled_predict(in.k_q_ka, in.k_q_kg, in.k_kg_ka, in.grams.k_gg_chol,
                                   in.k_qq_diag, in.dv);
  const auto b = decoupled_predict_cheng(in.k_q_ka, in.k_q_kg, in.k_kg_ka,
                                         in.grams.k_gg_chol, in.k_qq_diag, in.dv);
  EXPECT_EQ(a.var, b.var);
  EXPECT_EQ(b.mean, Matrix(in.k_q_ka * in.dv.v_a));
}

TEST(DecoupledPredictCheng, ZeroAmortizedWeights) {
  std::mt19937_64 rng(9);
  auto in = testing::make_decoupled_instance(rng, 4, 2, 2, true);
  in.dv.v_a.setZero();
  const auto b = decoupled_predict_cheng(in.k_q_ka, in.k_q_kg, in.k_kg_ka,
                                         in.grams.k_gg_chol, in.k_qq_diag, in.dv);
  EXPECT_EQ(b.mean, Matrix::Zero(4, 2));
}

TEST(StructuredEmbed, PriorParametersGivePrior) {
  std::mt19937_64 rng(10);
  auto in = testing::make_decoupled_instance(rng, 3, 2, 1, true);
  in.dv.v_a.setZero();
  in.dv.v_g.setZero();
  in.dv.s_g_chol = {in.grams.k_gg_chol.lower};
  const auto q = structured_variational_embed(in.dv, in.grams, 0.0);
  const Matrix z = concat_rows({in.k_a, in.k_g});
  const Matrix kzz = gram(in.spec, z, z);
  EXPECT_LT(q[0].mean.cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT(max_abs_diff(q[0].cov_chol * q[0].cov_chol.transpose(), kzz), 1e-10);
}

TEST(StructuredEmbed, MatchesDecoupledOnRandomInstances) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> tdist(1, 6), gdist(1, 4), ddist(1, 3);
  for (int rep = 0; rep < 50; ++rep) {
    const bool shared = rep % 2 == 0;
    auto in = testing::make_decoupled_instance(rng, tdist(rng), gdist(rng), ddist(rng), shared);
    const auto direct = decoupled_predict(in.k_q_ka, in.k_q_kg, in.k_kg_ka,
                                          in.grams.k_gg_chol, in.k_qq_diag, in.dv);
    const auto embedded = testing::embedded_route(in);
    EXPECT_LT(max_abs_diff(direct.mean, embedded.mean), 1e-8) << rep;
    EXPECT_LT(max_abs_diff(direct.var, embedded.var), 1e-8) << rep;
    EXPECT_NEAR(kl_decoupled_head(in.dv, in.grams), embedded.kl, 1e-8) << rep;
  }
}

TEST(StructuredEmbed, NoAmortizedPointsIsStandardSvgp) {
  std::mt19937_64 rng(12);
  auto in = testing::make_decoupled_instance(rng, 0, 1, 1, true);
  const auto q = structured_variational_embed(in.dv, in.grams, 0.0);
  ASSERT_EQ(q[0].mean.size(), 1);
  EXPECT_NEAR(q[0].mean(0), in.grams.k_gg(0, 0) * in.dv.v_g(0, 0), 1e-15);
  EXPECT_NEAR(q[0].cov_chol(0, 0), in.dv.s_g_chol[0](0, 0), 1e-15);
}

TEST(KlStandard, PriorIsZero) {
  std::mt19937_64 rng(13);
  const CholeskyFactor f = cholesky(testing::random_spd(rng, 4));
  EXPECT_NEAR(kl_standard({Vector::Zero(4), f.lower}, f), 0.0, 1e-10);
}

TEST(KlStandard, ScalarCase) {
  EXPECT_NEAR(kl_standard({Vector::Ones(1), m11(1.0)}, cholesky(m11(1.0))), 0.5, 1e-15);
}

TEST(KlStandard, DoublingMeanQuadruplesQuadratic) {
  std::mt19937_64 rng(14);
  const CholeskyFactor f = cholesky(testing::random_spd(rng, 3));
  const Vector m = testing::random_matrix(rng, 3, 1).col(0);
  const double base = kl_standard({Vector::Zero(3), f.lower}, f);
  const double q1 = kl_standard({m, f.lower}, f) - base;
  const double q2 = kl_standard({2.0 * m, f.lower}, f) - base;
  EXPECT_NEAR(q2, 4.0 * q1, 1e-12);
  const double r1 = kl_standard({m, f.lower}, f, true) - base;
  const double r2 = kl_standard({2.0 * m, f.lower}, f, true) - base;
  EXPECT_NEAR(r2, 4.0 * r1, 1e-12);
}

TEST(KlStandard, ReparameterizedMatchesExplicitMean) {
  std::mt19937_64 rng(15);
  const Matrix k = testing::random_spd(rng, 3);
  const CholeskyFactor f = cholesky(k);
  const Matrix l = testing::random_lower(rng, 3);
  const Vector v = testing::random_matrix(rng, 3, 1).col(0);
  EXPECT_NEAR(kl_standard({v, l}, f, true), kl_standard({k * v, l}, f, false), 1e-10);
}

TEST(KlStandard, NonNegative) {
  std::mt19937_64 rng(16);
  for (int rep = 0; rep < 30; ++rep) {
    const CholeskyFactor f = cholesky(testing::random_spd(rng, 4));
    const Vector m = testing::random_matrix(rng, 4, 1).col(0);
    EXPECT_GE(kl_standard({m, testing::random_lower(rng, 4)}, f), -1e-10);
  }
}

TEST(KlDecoupled, PriorIsZero) {
  std::mt19937_64 rng(17);
  auto in = testing::make_decoupled_instance(rng, 4, 3, 2, true);
  in.dv.v_a.setZero();
  in.dv.v_g.setZero();
  in.dv.s_g_chol = {in.grams.k_gg_chol.lower};
  EXPECT_NEAR(kl_decoupled_head(in.dv, in.grams), 0.0, 1e-10);
}

TEST(KlDecoupled, PositiveAwayFromPrior) {
  std::mt19937_64 rng(18);
  for (int rep = 0; rep < 20; ++rep) {
    auto in = testing::make_decoupled_instance(rng, 4, 3, 2, rep % 2 == 0);
    EXPECT_GT(kl_decoupled_head(in.dv, in.grams), 1e-10);
  }
}

TEST(KlDecoupled, DoublingSharedDimsDoublesKl) {
  std::mt19937_64 rng(19);
  auto in = testing::make_decoupled_instance(rng, 4, 3, 1, true);
  const double one = kl_decoupled_head(in.dv, in.grams);
  in.dv.v_a = concat_cols({in.dv.v_a, in.dv.v_a});
  in.dv.v_g = concat_cols({in.dv.v_g, in.dv.v_g});
  EXPECT_NEAR(kl_decoupled_head(in.dv, in.grams), 2.0 * one, 1e-12);
}

TEST(Variance, NegativeRoundOffIsClampedAndCounted) {
  // k_qq smaller than the explained variance drives the raw value below zero.
  const Matrix kqz = Matrix::Constant(1, 1, 1.0);
  const BasicCholesky<Matrix> f{Matrix::Constant(1, 1, 1.0), 0.0};
  const auto m = svgp_diag_variance<Matrix>(kqz, f, m11(0.5), {Matrix::Constant(1, 1, 1e-3)},
                                            true, 2);
  EXPECT_EQ(m.clamped, 2u);
  EXPECT_EQ(m.var, Matrix::Zero(1, 2));
}

TEST(GenericFormulas, VarPathMatchesMatrixPathBitwise) {
  std::mt19937_64 rng(20);
  auto in = testing::make_decoupled_instance(rng, 4, 2, 2, false);
  const auto plain = decoupled_moments<Matrix>(
      in.k_q_ka, in.k_q_kg, in.k_kg_ka, in.grams.k_gg_chol, Matrix(in.k_qq_diag), in.dv.v_a,
      in.dv.v_g, in.dv.s_g_chol, false, DecoupledForm::Orthogonal);
  Tape t;
  auto c = [&t](const Matrix &m) { return t.parameter(m); };
  const BasicCholesky<Var> chol{c(in.grams.k_gg_chol.lower), 0.0};
  const auto taped = decoupled_moments<Var>(
      c(in.k_q_ka), c(in.k_q_kg), c(in.k_kg_ka), chol, c(Matrix(in.k_qq_diag)), c(in.dv.v_a),
      c(in.dv.v_g), {c(in.dv.s_g_chol[0]), c(in.dv.s_g_chol[1])}, false,
      DecoupledForm::Orthogonal);
  EXPECT_EQ(taped.mean.value(), plain.mean);
  EXPECT_EQ(taped.var.value(), plain.var);
}

TEST(GenericFormulas, DecoupledKlGradient) {
  std::mt19937_64 rng(21);
  auto in = testing::make_decoupled_instance(rng, 3, 2, 2, true);
  ParameterSet params;
  params.add("k_a", in.k_a);
  params.add("k_g", in.k_g);
  params.add("v_a", in.dv.v_a);
  params.add("v_g", in.dv.v_g);
  params.add("s_raw", testing::random_matrix(rng, 2, 2, 0.5));
  const KernelParams<Matrix> kp = kernel_params(in.spec);
  LossBuilder build = [&](Tape &t, const std::vector<Var> &v) {
    const KernelParams<Var> kv{kp.family, t.constant(kp.raw)};
    const Var k_aa = ad::gram(kv, v[0], v[0]);
    const Var k_ga = ad::gram(kv, v[1], v[0]);
    const auto chol = cholesky(ad::gram(kv, v[1], v[1]), 0.0);
    return kl_decoupled<Var>(k_aa, k_ga, chol, v[2], v[3], {chol_from_raw(v[4])}, true,
                             DecoupledForm::Orthogonal);
  };
  EXPECT_LT(finite_difference_check(build, params, 1e-6).overall, 1e-5);
}

} // namespace
} // namespace sgpa
