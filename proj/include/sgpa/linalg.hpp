#pragma once

#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sgpa/errors.hpp"

namespace sgpa {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

constexpr double kDefaultJitter = 1e-6;

inline std::string shape_string(const Matrix &m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

inline void require_same_shape(const Matrix &a, const Matrix &b,
                               const char *op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

inline bool all_finite(const Matrix &m) { return m.allFinite(); }

/// Lower-triangular factor `lower` with lower * lower^T = a + jitter_used * I.
/// Templated so the autodiff layer can carry a differentiable factor.
template <typename M> struct BasicCholesky {
  M lower;
  double jitter_used = 0.0;
};

using CholeskyFactor = BasicCholesky<Matrix>;

inline Matrix matmul(const Matrix &a, const Matrix &b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_string(a) + " x " + shape_string(b));
  }
  return a * b;
}

inline Matrix symmetrize(const Matrix &a) {
  return 0.5 * (a + a.transpose());
}

/// Factorizes a symmetric positive definite matrix, escalating diagonal
/// jitter through {0, b, 10b, 100b, 1000b} until the factorization succeeds.
inline CholeskyFactor cholesky(const Matrix &a,
                               double base_jitter = kDefaultJitter) {
  if (a.rows() != a.cols()) {
    throw ShapeError("cholesky: matrix is " + shape_string(a));
  }
  if (!all_finite(a)) {
    throw NumericalError("cholesky: non-finite input");
  }
  if (a.size() == 0) {
    return {Matrix(0, 0), 0.0};
  }
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw ContractError("cholesky: input is not symmetric");
  }
  const Matrix sym = symmetrize(a);
  const std::array<double, 5> levels = {0.0, base_jitter, 10 * base_jitter,
                                        100 * base_jitter, 1000 * base_jitter};
  for (double jitter : levels) {
    Matrix shifted = sym;
    shifted.diagonal().array() += jitter;
    Eigen::LLT<Matrix> llt(shifted);
    if (llt.info() != Eigen::Success) {
      continue;
    }
    Matrix lower = llt.matrixL();
    if (lower.size() > 0 && !(lower.diagonal().array() > 0.0).all()) {
      continue;
    }
    return {std::move(lower), jitter};
  }
  std::ostringstream os;
  os << "cholesky: matrix of size " << a.rows()
     << " is not positive definite even with jitter " << levels.back();
  throw NotPositiveDefiniteError(os.str(), levels.back());
}

/// Solves lower * x = b.
inline Matrix solve_lower(const Matrix &lower, const Matrix &b) {
  if (lower.rows() != b.rows()) {
    throw ShapeError("solve_lower: " + shape_string(lower) + " vs " +
                     shape_string(b));
  }
  return lower.triangularView<Eigen::Lower>().solve(b);
}

/// Solves lower^T * x = b.
inline Matrix solve_lower_transpose(const Matrix &lower, const Matrix &b) {
  if (lower.rows() != b.rows()) {
    throw ShapeError("solve_lower_transpose: " + shape_string(lower) + " vs " +
                     shape_string(b));
  }
  return lower.transpose().triangularView<Eigen::Upper>().solve(b);
}

inline Matrix solve_cholesky(const CholeskyFactor &f, const Matrix &b) {
  return solve_lower_transpose(f.lower, solve_lower(f.lower, b));
}

inline double log_det(const CholeskyFactor &f) {
  return 2.0 * f.lower.diagonal().array().log().sum();
}

// Plain-matrix counterparts of the differentiable primitives, so formulas
// templated on the matrix type compile against either representation.

inline Matrix transpose(const Matrix &a) { return a.transpose(); }
inline Matrix add(const Matrix &a, const Matrix &b) {
  require_same_shape(a, b, "add");
  return a + b;
}
inline Matrix sub(const Matrix &a, const Matrix &b) {
  require_same_shape(a, b, "sub");
  return a - b;
}
inline Matrix hadamard(const Matrix &a, const Matrix &b) {
  require_same_shape(a, b, "hadamard");
  return a.cwiseProduct(b);
}
inline Matrix scale(const Matrix &a, double s) { return a * s; }
inline Matrix add_scalar(const Matrix &a, double s) {
  return (a.array() + s).matrix();
}
inline Matrix negate(const Matrix &a) { return -a; }
inline Matrix exp(const Matrix &a) { return a.array().exp().matrix(); }
inline Matrix log(const Matrix &a) { return a.array().log().matrix(); }
inline Matrix sqrt(const Matrix &a) { return a.array().sqrt().matrix(); }
inline Matrix square(const Matrix &a) { return a.array().square().matrix(); }
inline Matrix relu(const Matrix &a) { return a.cwiseMax(0.0); }
inline Matrix clamp_min(const Matrix &a, double lo) { return a.cwiseMax(lo); }

inline double sum(const Matrix &a) { return a.sum(); }
inline double mean(const Matrix &a) {
  if (a.size() == 0) {
    throw ContractError("mean of an empty matrix");
  }
  return a.mean();
}
/// 1 x cols row of column sums.
inline Matrix col_sums(const Matrix &a) { return a.colwise().sum(); }
/// rows x 1 column of row sums.
inline Matrix row_sums(const Matrix &a) { return a.rowwise().sum(); }
inline Matrix mean_rows(const Matrix &a) {
  if (a.rows() == 0) {
    throw ContractError("mean_rows of a matrix with no rows");
  }
  return a.colwise().mean();
}

inline Matrix slice(const Matrix &a, Eigen::Index r0, Eigen::Index c0,
                    Eigen::Index nr, Eigen::Index nc) {
  if (r0 < 0 || c0 < 0 || nr < 0 || nc < 0 || r0 + nr > a.rows() ||
      c0 + nc > a.cols()) {
    throw ShapeError("slice out of range for " + shape_string(a));
  }
  return a.block(r0, c0, nr, nc);
}

/// Adds a 1 x cols row to every row of `a`.
inline Matrix add_row_broadcast(const Matrix &a, const Matrix &row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row_broadcast: " + shape_string(a) + " + " +
                     shape_string(row));
  }
  return a.rowwise() + row.row(0);
}

inline Matrix repeat_cols(const Matrix &col, Eigen::Index n) {
  if (col.cols() != 1) {
    throw ShapeError("repeat_cols expects a column, got " + shape_string(col));
  }
  return col.replicate(1, n);
}

inline Matrix diag_of(const Matrix &a) {
  if (a.rows() != a.cols()) {
    throw ShapeError("diag_of: " + shape_string(a));
  }
  return a.diagonal();
}

inline Matrix diag_embed(const Matrix &v) {
  if (v.cols() != 1) {
    throw ShapeError("diag_embed expects a column, got " + shape_string(v));
  }
  return v.col(0).asDiagonal();
}

inline Matrix tril(const Matrix &a, bool strict) {
  Matrix out = Matrix::Zero(a.rows(), a.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    for (Eigen::Index i = strict ? j + 1 : j; i < a.rows(); ++i) {
      out(i, j) = a(i, j);
    }
  }
  return out;
}

inline Matrix softmax_rows(const Matrix &a) {
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double mx = a.row(i).maxCoeff();
    out.row(i) = (a.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

inline Matrix log_softmax_rows(const Matrix &a) {
  Matrix out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double mx = a.row(i).maxCoeff();
    const double lse = mx + std::log((a.row(i).array() - mx).exp().sum());
    out.row(i) = (a.row(i).array() - lse).matrix();
  }
  return out;
}

inline Matrix concat_cols(const std::vector<Matrix> &parts) {
  if (parts.empty()) {
    return Matrix(0, 0);
  }
  Eigen::Index cols = 0;
  for (const auto &p : parts) {
    if (p.rows() != parts.front().rows()) {
      throw ShapeError("concat_cols: ragged row counts");
    }
    cols += p.cols();
  }
  Matrix out(parts.front().rows(), cols);
  Eigen::Index c = 0;
  for (const auto &p : parts) {
    out.middleCols(c, p.cols()) = p;
    c += p.cols();
  }
  return out;
}

inline Matrix concat_rows(const std::vector<Matrix> &parts) {
  if (parts.empty()) {
    return Matrix(0, 0);
  }
  Eigen::Index rows = 0;
  for (const auto &p : parts) {
    if (p.cols() != parts.front().cols()) {
      throw ShapeError("concat_rows: ragged column counts");
    }
    rows += p.rows();
  }
  Matrix out(rows, parts.front().cols());
  Eigen::Index r = 0;
  for (const auto &p : parts) {
    out.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return out;
}

/// Post-norm layer normalization over the feature (column) axis.
inline Matrix layer_norm(const Matrix &x, const Matrix &gamma,
                         const Matrix &beta, double eps) {
  if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 ||
      beta.cols() != x.cols()) {
    throw ShapeError("layer_norm: gain/bias must be 1x" +
                     std::to_string(x.cols()));
  }
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    out.row(i) = (((x.row(i).array() - mu) * inv) * gamma.row(0).array() +
                  beta.row(0).array())
                     .matrix();
  }
  return out;
}

} // namespace sgpa
