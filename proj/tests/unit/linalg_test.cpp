#include <cmath>

#include <gtest/gtest.h>

#include "sgpa/linalg.hpp"
#include "support/test_util.hpp"

namespace sgpa {
namespace {

using testing::max_abs_diff;

TEST(Matmul, IdentityIsNeutral) {
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  EXPECT_EQ(matmul(Matrix::Identity(2, 2), a), a);
}

TEST(Matmul, HandProduct) {
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  Matrix b(2, 1);
  b << 0, 1;
  Matrix want(2, 1);
  want << 2, 4;
  EXPECT_EQ(matmul(a, b), want);
}

TEST(Matmul, ZeroAnnihilates) {
  Matrix a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(matmul(a, Matrix::Zero(3, 2)), Matrix::Zero(2, 2));
}

TEST(Matmul, DimensionMismatchThrows) {
  EXPECT_THROW(matmul(Matrix::Zero(2, 3), Matrix::Zero(2, 3)), ShapeError);
}

TEST(Matmul, AssociativeOnRandomTriples) {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix a = testing::random_matrix(rng, 3, 4);
    const Matrix b = testing::random_matrix(rng, 4, 5);
    const Matrix c = testing::random_matrix(rng, 5, 2);
    const Matrix l = matmul(matmul(a, b), c);
    const Matrix r = matmul(a, matmul(b, c));
    EXPECT_LT(max_abs_diff(l, r) / std::max(1.0, l.cwiseAbs().maxCoeff()), 1e-10);
  }
}

TEST(Cholesky, Identity) {
  const CholeskyFactor f = cholesky(Matrix::Identity(3, 3));
  EXPECT_EQ(f.lower, Matrix::Identity(3, 3));
  EXPECT_EQ(f.jitter_used, 0.0);
}

TEST(Cholesky, TwoByTwo) {
  Matrix a(2, 2);
  a << 4, 2, 2, 3;
  const CholeskyFactor f = cholesky(a);
  Matrix want(2, 2);
  want << 2, 0, 1, std::sqrt(2.0);
  EXPECT_LT(max_abs_diff(f.lower, want), 1e-15);
  EXPECT_LT(max_abs_diff(f.lower * f.lower.transpose(), a), 1e-14);
}

TEST(Cholesky, ZeroMatrixNeedsJitter) {
  const CholeskyFactor f = cholesky(Matrix::Zero(2, 2), 1e-6);
  EXPECT_GT(f.jitter_used, 0.0);
  EXPECT_EQ(f.jitter_used, 1e-6);
  EXPECT_TRUE((f.lower.diagonal().array() > 0.0).all());
}

TEST(Cholesky, EscalatesThroughJitterLadder) {
  // Smallest eigenvalue -5e-5 needs jitter 1e-4 = 100 * base.
  Matrix a(2, 2);
  a << 1.0, 0.0, 0.0, -5e-5;
  const CholeskyFactor f = cholesky(a, 1e-6);
  EXPECT_DOUBLE_EQ(f.jitter_used, 1e-4);
}

TEST(Cholesky, IndefiniteThrowsWithLastJitter) {
  Matrix a(2, 2);
  a << 1.0, 0.0, 0.0, -1.0;
  try {
    cholesky(a, 1e-6);
    FAIL() << "expected NotPositiveDefiniteError";
  } catch (const NotPositiveDefiniteError &e) {
    EXPECT_DOUBLE_EQ(e.last_jitter(), 1e-3);
  }
}

TEST(Cholesky, RejectsAsymmetric) {
  Matrix a(2, 2);
  a << 2, 1, 0, 2;
  EXPECT_THROW(cholesky(a), ContractError);
}

TEST(Cholesky, RejectsNonSquare) {
  EXPECT_THROW(cholesky(Matrix::Zero(2, 3)), ShapeError);
}

TEST(Cholesky, ReconstructsRandomSpd) {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix a = testing::random_spd(rng, 5);
    const CholeskyFactor f = cholesky(a);
    EXPECT_EQ(f.jitter_used, 0.0);
    EXPECT_LT(max_abs_diff(f.lower * f.lower.transpose(), a), 1e-8);
    EXPECT_EQ(Matrix(f.lower.triangularView<Eigen::StrictlyUpper>()),
              Matrix::Zero(5, 5));
  }
}

TEST(SolveCholesky, IdentitySystem) {
  Matrix b(2, 1);
  b << 3, -1;
  EXPECT_EQ(solve_cholesky(cholesky(Matrix::Identity(2, 2)), b), b);
}

TEST(SolveCholesky, TwoByTwo) {
  Matrix a(2, 2);
  a << 4, 2, 2, 3;
  const Matrix x = solve_cholesky(cholesky(a), Matrix::Ones(2, 1));
  EXPECT_NEAR(x(0, 0), 1.0 / 8.0, 1e-15);
  EXPECT_NEAR(x(1, 0), 1.0 / 4.0, 1e-15);
  EXPECT_LT(max_abs_diff(a * x, Matrix::Ones(2, 1)), 1e-14);
}

TEST(SolveCholesky, HomogeneousSystem) {
  Matrix a(2, 2);
  a << 4, 2, 2, 3;
  EXPECT_EQ(solve_cholesky(cholesky(a), Matrix::Zero(2, 3)), Matrix::Zero(2, 3));
}

TEST(SolveCholesky, ShapeMismatchThrows) {
  EXPECT_THROW(solve_cholesky(cholesky(Matrix::Identity(2, 2)), Matrix::Zero(3, 1)),
               ShapeError);
}

TEST(SolveCholesky, RecoversRandomSolution) {
  std::mt19937_64 rng(13);
  for (int rep = 0; rep < 20; ++rep) {
    const Matrix a = testing::random_spd(rng, 6, 0.5);
    const Matrix x0 = testing::random_matrix(rng, 6, 2);
    EXPECT_LT(max_abs_diff(solve_cholesky(cholesky(a), a * x0), x0), 1e-8);
  }
}

TEST(LogDet, Identity) { EXPECT_EQ(log_det(cholesky(Matrix::Identity(3, 3))), 0.0); }

TEST(LogDet, Diagonal) {
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = 4;
  a(1, 1) = 9;
  EXPECT_NEAR(log_det(cholesky(a)), std::log(36.0), 1e-14);
}

TEST(LogDet, SingleE) {
  Matrix a(1, 1);
  a << std::exp(1.0);
  EXPECT_NEAR(log_det(cholesky(a)), 1.0, 1e-15);
}

TEST(Primitives, SoftmaxRowsSumToOne) {
  Matrix a(2, 3);
  a << 1, 2, 3, 1000, 1000, 1000;
  const Matrix s = softmax_rows(a);
  EXPECT_NEAR(s.row(0).sum(), 1.0, 1e-15);
  EXPECT_NEAR(s(1, 0), 1.0 / 3.0, 1e-15);
  EXPECT_LT(max_abs_diff(log_softmax_rows(a), s.array().log().matrix()), 1e-12);
}

TEST(Primitives, TrilAndDiag) {
  Matrix a(2, 2);
  a << 1, 2, 3, 4;
  Matrix strict(2, 2);
  strict << 0, 0, 3, 0;
  EXPECT_EQ(tril(a, true), strict);
  EXPECT_EQ(diag_embed(diag_of(a)), Matrix(Vector(Eigen::Vector2d(1, 4)).asDiagonal()));
}

TEST(Primitives, ConcatRaggedThrows) {
  EXPECT_THROW(concat_cols({Matrix::Zero(2, 1), Matrix::Zero(3, 1)}), ShapeError);
  EXPECT_THROW(concat_rows({Matrix::Zero(1, 2), Matrix::Zero(1, 3)}), ShapeError);
}

TEST(Primitives, LayerNormStandardizesRows) {
  Matrix x(2, 4);
  x << 1, 2, 3, 4, -1, 0, 5, 2;
  const Matrix y = layer_norm(x, Matrix::Ones(1, 4), Matrix::Zero(1, 4), 0.0);
  for (Eigen::Index r = 0; r < 2; ++r) {
    EXPECT_NEAR(y.row(r).mean(), 0.0, 1e-14);
    EXPECT_NEAR(y.row(r).squaredNorm() / 4.0, 1.0, 1e-14);
  }
}

} // namespace
} // namespace sgpa
