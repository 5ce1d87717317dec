#include <cmath>
#include <functional>
#include <string>

#include <gtest/gtest.h>

#include "sgpa/autodiff.hpp"
#include "sgpa/gradcheck.hpp"
#include "sgpa/optim.hpp"
#include "support/test_util.hpp"

namespace sgpa {
namespace {

TEST(Backward, AddSelfGivesTwo) {
  Tape t;
  Var x = t.parameter(Matrix::Random(2, 2));
  t.backward(sum(add(x, x)));
  EXPECT_EQ(t.grad(x), Matrix::Constant(2, 2, 2.0));
}

TEST(Backward, MatmulAgainstMatrixCalculus) {
  std::mt19937_64 rng(1);
  const Matrix a = testing::random_matrix(rng, 3, 4);
  const Matrix b = testing::random_matrix(rng, 4, 2);
  Tape t;
  Var va = t.parameter(a);
  Var vb = t.parameter(b);
  t.backward(sum(matmul(va, vb)));
  EXPECT_LT(testing::max_abs_diff(t.grad(va), Matrix::Ones(3, 2) * b.transpose()), 1e-14);
  EXPECT_LT(testing::max_abs_diff(t.grad(vb), a.transpose() * Matrix::Ones(3, 2)), 1e-14);
}

TEST(Backward, ExpOfZero) {
  Tape t;
  EXPECT_EQ(exp(t.parameter(Matrix::Zero(2, 3))).value(), Matrix::Ones(2, 3));
}

TEST(Backward, SumGivesOnes) {
  Tape t;
  Var x = t.parameter(Matrix::Random(2, 2));
  t.backward(sum(x));
  EXPECT_EQ(t.grad(x), Matrix::Ones(2, 2));
}

TEST(Backward, QuadraticForm) {
  Matrix x(3, 1);
  x << 1.5, -2.0, 0.25;
  Tape t;
  Var v = t.parameter(x);
  t.backward(matmul(transpose(v), v));
  EXPECT_LT(testing::max_abs_diff(t.grad(v), 2.0 * x), 1e-15);
}

TEST(Backward, DisconnectedParameterGetsZero) {
  Tape t;
  Var x = t.parameter(Matrix::Ones(2, 2));
  Var y = t.parameter(Matrix::Ones(3, 1));
  t.backward(sum(x));
  EXPECT_EQ(t.grad(y), Matrix::Zero(3, 1));
}

TEST(Backward, NonScalarLossThrows) {
  Tape t;
  Var x = t.parameter(Matrix::Ones(2, 2));
  EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Backward, ShapeMismatchThrows) {
  Tape t;
  Var a = t.parameter(Matrix::Ones(2, 2));
  Var b = t.parameter(Matrix::Ones(3, 2));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Backward, RepeatedPassesAreBitIdentical) {
  std::mt19937_64 rng(3);
  Tape t(5);
  Var a = t.parameter(testing::random_spd(rng, 4));
  Var b = t.parameter(testing::random_matrix(rng, 4, 2));
  Var loss = sum(square(solve_cholesky(cholesky(a), b)));
  t.backward(loss);
  const Matrix g1 = t.grad(a);
  t.backward(loss);
  EXPECT_EQ(t.grad(a), g1);
}

// ---- finite-difference audit of every primitive -------------------------

// Finite differences perturb one entry at a time; the factorization needs a
// symmetric argument.
Var sym(const Var &a) { return scale(add(a, transpose(a)), 0.5); }

struct PrimitiveCase {
  std::string name;
  std::vector<Matrix> inputs;
  std::function<Var(const std::vector<Var> &)> op;
};

std::vector<PrimitiveCase> primitive_cases() {
  std::mt19937_64 rng(42);
  auto r = [&](Eigen::Index a, Eigen::Index b) { return testing::random_matrix(rng, a, b); };
  auto pos = [&](Eigen::Index a, Eigen::Index b) {
    return Matrix(r(a, b).array().abs() + 0.5);
  };
  const Matrix spd = testing::random_spd(rng, 4, 0.5);
  const Matrix low = testing::random_lower(rng, 4);
  std::vector<PrimitiveCase> cases;
  cases.push_back({"add", {r(2, 3), r(2, 3)}, [](auto &v) { return add(v[0], v[1]); }});
  cases.push_back({"sub", {r(2, 3), r(2, 3)}, [](auto &v) { return sub(v[0], v[1]); }});
  cases.push_back({"hadamard", {r(2, 3), r(2, 3)}, [](auto &v) { return hadamard(v[0], v[1]); }});
  cases.push_back({"matmul", {r(2, 3), r(3, 4)}, [](auto &v) { return matmul(v[0], v[1]); }});
  cases.push_back({"transpose", {r(2, 3)}, [](auto &v) { return transpose(v[0]); }});
  cases.push_back({"scale", {r(2, 3)}, [](auto &v) { return scale(v[0], -1.7); }});
  cases.push_back({"add_scalar", {r(2, 3)}, [](auto &v) { return add_scalar(v[0], 0.3); }});
  cases.push_back({"negate", {r(2, 3)}, [](auto &v) { return negate(v[0]); }});
  cases.push_back({"exp", {r(2, 3)}, [](auto &v) { return exp(v[0]); }});
  cases.push_back({"log", {pos(2, 3)}, [](auto &v) { return log(v[0]); }});
  cases.push_back({"sqrt", {pos(2, 3)}, [](auto &v) { return sqrt(v[0]); }});
  cases.push_back({"square", {r(2, 3)}, [](auto &v) { return square(v[0]); }});
  cases.push_back({"relu", {pos(2, 3) - Matrix::Constant(2, 3, 0.2)},
                   [](auto &v) { return relu(v[0]); }});
  cases.push_back({"softmax_rows", {r(3, 4)}, [](auto &v) { return softmax_rows(v[0]); }});
  cases.push_back({"log_softmax_rows", {r(3, 4)},
                   [](auto &v) { return log_softmax_rows(v[0]); }});
  cases.push_back({"mean", {r(3, 4)}, [](auto &v) { return mean(v[0]); }});
  cases.push_back({"col_sums", {r(3, 4)}, [](auto &v) { return col_sums(v[0]); }});
  cases.push_back({"row_sums", {r(3, 4)}, [](auto &v) { return row_sums(v[0]); }});
  cases.push_back({"mean_rows", {r(3, 4)}, [](auto &v) { return mean_rows(v[0]); }});
  cases.push_back({"slice", {r(4, 5)}, [](auto &v) { return slice(v[0], 1, 2, 2, 3); }});
  cases.push_back({"concat_cols", {r(2, 2), r(2, 3)},
                   [](auto &v) { return concat_cols(std::vector<Var>{v[0], v[1]}); }});
  cases.push_back({"concat_rows", {r(2, 3), r(1, 3)},
                   [](auto &v) { return concat_rows(std::vector<Var>{v[0], v[1]}); }});
  cases.push_back({"add_row_broadcast", {r(3, 4), r(1, 4)},
                   [](auto &v) { return add_row_broadcast(v[0], v[1]); }});
  cases.push_back({"repeat_cols", {r(3, 1)}, [](auto &v) { return repeat_cols(v[0], 3); }});
  cases.push_back({"diag_of", {r(3, 3)}, [](auto &v) { return diag_of(v[0]); }});
  cases.push_back({"diag_embed", {r(3, 1)}, [](auto &v) { return diag_embed(v[0]); }});
  cases.push_back({"tril", {r(3, 3)}, [](auto &v) { return tril(v[0], true); }});
  cases.push_back({"layer_norm", {r(3, 4), r(1, 4), r(1, 4)},
                   [](auto &v) { return layer_norm(v[0], v[1], v[2], 1e-5); }});
  cases.push_back({"cholesky", {spd}, [](auto &v) { return cholesky(sym(v[0]), 0.0).lower; }});
  cases.push_back({"solve_lower", {low, r(4, 2)},
                   [](auto &v) { return solve_lower(tril(v[0], false), v[1]); }});
  cases.push_back({"solve_lower_transpose", {low, r(4, 2)},
                   [](auto &v) { return solve_lower_transpose(tril(v[0], false), v[1]); }});
  cases.push_back({"log_det", {spd}, [](auto &v) { return log_det(cholesky(sym(v[0]), 0.0)); }});
  return cases;
}

class PrimitiveGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  const PrimitiveCase c = primitive_cases()[GetParam()];
  ParameterSet params;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    params.add("in" + std::to_string(i), c.inputs[i]);
  }
  // Random linear functional of the output so every adjoint entry differs.
  LossBuilder build = [&c](Tape &t, const std::vector<Var> &leaves) {
    Var out = c.op(leaves);
    std::mt19937_64 wrng(99);
    Matrix w = testing::random_matrix(wrng, out.rows(), out.cols());
    return sum(hadamard(out, t.constant(w)));
  };
  const GradCheckResult res = finite_difference_check(build, params, 1e-6);
  EXPECT_LT(res.overall, 1e-6) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient,
                         ::testing::Range<std::size_t>(0, primitive_cases().size()),
                         [](const auto &info) { return primitive_cases()[info.param].name; });

TEST(GradCheck, QuadraticIsExact) {
  ParameterSet params;
  Matrix x(3, 1);
  x << 0.3, -1.2, 2.0;
  params.add("x", x);
  Matrix a(3, 3);
  a << 2, 0.5, 0, 0.5, 1, 0.1, 0, 0.1, 3;
  LossBuilder build = [&a](Tape &t, const std::vector<Var> &v) {
    return matmul(transpose(v[0]), matmul(t.constant(a), v[0]));
  };
  EXPECT_LT(finite_difference_check(build, params, 1e-4).overall, 1e-9);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  ParameterSet params;
  params.add("x", Matrix::Ones(1, 1));
  LossBuilder build = [](Tape &, const std::vector<Var> &v) { return sum(v[0]); };
  EXPECT_THROW(finite_difference_check(build, params, 0.0), ContractError);
}

TEST(GradCheck, DetectsNonDeterministicLoss) {
  ParameterSet params;
  params.add("x", Matrix::Ones(1, 1));
  int calls = 0;
  LossBuilder build = [&calls](Tape &, const std::vector<Var> &v) {
    return add_scalar(sum(v[0]), static_cast<double>(calls++));
  };
  EXPECT_THROW(finite_difference_check(build, params, 1e-3), DeterminismError);
}

TEST(GradCheck, SeededNoiseIsReproducible) {
  ParameterSet params;
  params.add("x", Matrix::Ones(2, 2));
  LossBuilder build = [](Tape &t, const std::vector<Var> &v) {
    std::normal_distribution<double> n;
    Matrix eps(2, 2);
    for (Eigen::Index i = 0; i < 4; ++i) {
      eps(i) = n(t.rng());
    }
    return sum(square(add(v[0], t.constant(eps))));
  };
  EXPECT_LT(finite_difference_check(build, params, 1e-5, 17).overall, 1e-8);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParameterSet p;
  p.add("w", Matrix::Constant(2, 2, 0.7));
  AdamState s;
  adam_step(p, {Matrix::Zero(2, 2)}, s, 0.1);
  EXPECT_EQ(p[0], Matrix::Constant(2, 2, 0.7));
}

TEST(Adam, FirstStepFromZeroState) {
  ParameterSet p;
  p.add("w", Matrix::Zero(1, 3));
  Matrix g(1, 3);
  g << 0.5, -2.0, 1e-3;
  AdamState s;
  adam_step(p, {g}, s, 0.01);
  for (Eigen::Index k = 0; k < 3; ++k) {
    // After bias correction m_hat = g and v_hat = g^2.
    EXPECT_NEAR(p[0](k), -0.01 * g(k) / (std::abs(g(k)) + kAdamEps), 1e-15);
  }
}

TEST(Adam, ConstantGradientStepTendsToLrSign) {
  ParameterSet p;
  p.add("w", Matrix::Zero(1, 2));
  Matrix g(1, 2);
  g << 3.0, -0.25;
  AdamState s;
  Matrix before;
  for (int i = 0; i < 2000; ++i) {
    before = p[0];
    adam_step(p, {g}, s, 1e-3);
  }
  const Matrix step = p[0] - before;
  EXPECT_NEAR(step(0), -1e-3, 1e-9);
  EXPECT_NEAR(step(1), 1e-3, 1e-9);
}

TEST(Adam, ClipGlobalNorm) {
  GradientMap g = {Matrix::Constant(1, 1, 30.0), Matrix::Constant(1, 1, 40.0)};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 10.0), 50.0);
  EXPECT_NEAR(global_norm(g), 10.0, 1e-12);
}

} // namespace
} // namespace sgpa
