#pragma once

// Sparse variational GP predictive moments and KL terms.
//
// The decoupled formulas are templated on the matrix representation so that
// the attention heads reuse them under autodiff. The plain generic SVGP
// predictive (svgp_predict) and the structured embedding of a decoupled
// posterior into a joint inducing set are written independently with dense
// algebra; they serve as the reference route for the decoupled formulas.

#include <cmath>
#include <vector>

#include "sgpa/autodiff.hpp"

namespace sgpa {

/// q(u) = N(mean, cov_chol cov_chol^T).
struct VariationalGaussian {
  Vector mean;
  Matrix cov_chol;
};

/// Variational parameters of one decoupled head. v_a is input dependent.
struct DecoupledVariational {
  Matrix v_a;
  Matrix v_g;
  /// One lower factor when share_cov_across_dims, else one per output dim.
  std::vector<Matrix> s_g_chol;
  bool share_cov_across_dims = true;

  Eigen::Index output_dims() const { return v_g.cols(); }
};

enum class DecoupledForm {
  /// Orthogonally decoupled mean with correction through the global keys.
  Orthogonal,
  /// Mean from the amortized keys only.
  Cheng,
};

template <typename M> struct Moments {
  M mean;
  M var;
  /// Variance entries below zero that were clamped.
  std::size_t clamped = 0;
};

struct SvgpPrediction {
  Vector mean;
  Vector var;
};

/// Lower factor with positive diagonal from an unconstrained square matrix:
/// strict lower triangle as is, diagonal exponentiated.
template <typename M> M chol_from_raw(const M &raw) {
  return add(tril(raw, true), diag_embed(exp(diag_of(raw))));
}

inline void check_factor_count(std::size_t count, bool shared,
                               Eigen::Index dims) {
  const std::size_t want = shared ? 1 : static_cast<std::size_t>(dims);
  if (count != want) {
    throw ShapeError("expected " + std::to_string(want) +
                     " covariance factors, got " + std::to_string(count));
  }
}

/// Diagonal of K_qq + K_qz K_zz^-1 (S - K_zz) K_zz^-1 K_zq for every factor
/// of S, laid out as T x dims. Negative entries are clamped to zero.
template <typename M>
Moments<M> svgp_diag_variance(const M &k_qz, const BasicCholesky<M> &k_zz_chol,
                              const M &k_qq_diag, const std::vector<M> &s_chols,
                              bool shared, Eigen::Index dims) {
  check_factor_count(s_chols.size(), shared, dims);
  const Eigen::Index t = k_qq_diag.rows();
  Moments<M> out;
  const Eigen::Index mz = k_zz_chol.lower.rows();
  if (mz == 0) {
    out.var = clamp_min(repeat_cols(k_qq_diag, dims), 0.0);
    out.clamped = static_cast<std::size_t>(
        (value_of(k_qq_diag).array() < 0.0).count() * dims);
    return out;
  }
  const M a = solve_lower(k_zz_chol.lower, transpose(k_qz));
  const M base = sub(k_qq_diag, transpose(col_sums(square(a))));
  const M b = solve_lower_transpose(k_zz_chol.lower, a);
  std::vector<M> cols;
  cols.reserve(s_chols.size());
  for (const M &s : s_chols) {
    const M proj = matmul(transpose(s), b);
    cols.push_back(add(base, transpose(col_sums(square(proj)))));
  }
  const M raw_var = shared ? repeat_cols(cols.front(), dims) : concat_cols(cols);
  out.clamped = static_cast<std::size_t>((value_of(raw_var).array() < 0.0).count());
  out.var = clamp_min(raw_var, 0.0);
  (void)t;
  return out;
}

/// Posterior moments of a decoupled SVGP per output dimension.
///   Orthogonal: m = K_qa v_a - K_qg K_gg^-1 K_ga v_a + K_qg v_g
///   Cheng:      m = K_qa v_a
/// with the variance determined by the global keys only.
template <typename M>
Moments<M> decoupled_moments(const M &k_q_ka, const M &k_q_kg, const M &k_kg_ka,
                             const BasicCholesky<M> &k_kg_kg_chol,
                             const M &k_qq_diag, const M &v_a, const M &v_g,
                             const std::vector<M> &s_chols, bool shared,
                             DecoupledForm form) {
  const Eigen::Index dims = v_a.cols();
  const Eigen::Index mg = k_kg_kg_chol.lower.rows();
  M mean = matmul(k_q_ka, v_a);
  if (mg > 0 && form == DecoupledForm::Orthogonal) {
    const M corr = solve_cholesky(k_kg_kg_chol, matmul(k_kg_ka, v_a));
    mean = add(sub(mean, matmul(k_q_kg, corr)), matmul(k_q_kg, v_g));
  }
  Moments<M> out = svgp_diag_variance(k_q_kg, k_kg_kg_chol, k_qq_diag, s_chols,
                                      shared, dims);
  out.mean = std::move(mean);
  return out;
}

/// Closed-form KL of one decoupled head, summed over output dimensions:
///   1/2 sum_d { v_a^T (K_aa - K_ag K_gg^-1 K_ga) v_a + v_g^T K_gg v_g
///               + Tr(S_d K_gg^-1) - log|S_d| + log|K_gg| - M_g }
/// The Cheng form drops the global correction of the amortized quadratic and
/// the v_g term.
template <typename M>
scalar_t<M> kl_decoupled(const M &k_aa, const M &k_ga,
                         const BasicCholesky<M> &k_gg_chol, const M &v_a,
                         const M &v_g, const std::vector<M> &s_chols,
                         bool shared, DecoupledForm form) {
  const Eigen::Index dims = v_a.cols();
  const Eigen::Index mg = k_gg_chol.lower.rows();
  scalar_t<M> kl = sum(hadamard(v_a, matmul(k_aa, v_a)));
  if (mg == 0) {
    return 0.5 * kl;
  }
  check_factor_count(s_chols.size(), shared, dims);
  const M &lg = k_gg_chol.lower;
  if (form == DecoupledForm::Orthogonal) {
    kl = kl - sum(square(solve_lower(lg, matmul(k_ga, v_a))));
    kl = kl + sum(square(matmul(transpose(lg), v_g)));
  }
  const scalar_t<M> log_det_k = log_det(k_gg_chol);
  const double copies = shared ? static_cast<double>(dims) : 1.0;
  for (const M &s : s_chols) {
    const scalar_t<M> trace = sum(square(solve_lower(lg, s)));
    const scalar_t<M> log_det_s = 2.0 * sum(log(diag_of(s)));
    kl = kl + copies * (trace - log_det_s + log_det_k - static_cast<double>(mg));
  }
  return 0.5 * kl;
}

/// Closed-form KL(N(m_u, S) || N(0, K)) summed over output dims, where the
/// columns of `v` hold either m_u (reparameterized = false) or
/// v = K^-1 m_u (reparameterized = true, quadratic term v^T K v).
template <typename M>
scalar_t<M> kl_standard_terms(const M &v, const BasicCholesky<M> &k_chol,
                              const std::vector<M> &s_chols, bool shared,
                              bool reparameterized) {
  const Eigen::Index dims = v.cols();
  check_factor_count(s_chols.size(), shared, dims);
  const M &l = k_chol.lower;
  const double m = static_cast<double>(l.rows());
  scalar_t<M> kl = reparameterized ? sum(square(matmul(transpose(l), v)))
                                   : sum(square(solve_lower(l, v)));
  const scalar_t<M> log_det_k = log_det(k_chol);
  const double copies = shared ? static_cast<double>(dims) : 1.0;
  for (const M &s : s_chols) {
    const scalar_t<M> trace = sum(square(solve_lower(l, s)));
    const scalar_t<M> log_det_s = 2.0 * sum(log(diag_of(s)));
    kl = kl + copies * (trace - log_det_s + log_det_k - m);
  }
  return 0.5 * kl;
}

// ---- plain-matrix API ------------------------------------------------------

/// Generic SVGP predictive with diagonal variance:
///   mean = K_xz K_zz^-1 m_u
///   var_i = [K_xx]_ii + [K_xz K_zz^-1 (S_u - K_zz) K_zz^-1 K_zx]_ii
/// K_zz is taken to be the matrix represented by the factor.
inline SvgpPrediction svgp_predict(const Matrix &k_xz,
                                   const CholeskyFactor &k_zz_chol,
                                   const Vector &k_xx_diag,
                                   const VariationalGaussian &q) {
  const Eigen::Index mz = k_zz_chol.lower.rows();
  if (k_xz.cols() != mz || q.mean.size() != mz || q.cov_chol.rows() != mz ||
      q.cov_chol.cols() != mz || k_xx_diag.size() != k_xz.rows()) {
    throw ShapeError("svgp_predict: inconsistent shapes");
  }
  const Matrix k_zz = k_zz_chol.lower * k_zz_chol.lower.transpose();
  const Matrix s_u = q.cov_chol * q.cov_chol.transpose();
  const Matrix proj = solve_cholesky(k_zz_chol, k_xz.transpose());
  SvgpPrediction out;
  out.mean = k_xz * solve_cholesky(k_zz_chol, Matrix(q.mean)).col(0);
  const Matrix middle = proj.transpose() * (s_u - k_zz) * proj;
  out.var = (k_xx_diag + middle.diagonal()).cwiseMax(0.0);
  return out;
}

inline void validate(const DecoupledVariational &dv) {
  if (dv.v_a.cols() != dv.v_g.cols()) {
    throw ShapeError("decoupled: v_a and v_g output dims differ");
  }
  check_factor_count(dv.s_g_chol.size(), dv.share_cov_across_dims,
                     dv.v_g.cols());
  for (const Matrix &s : dv.s_g_chol) {
    if (s.rows() != dv.v_g.rows() || s.cols() != dv.v_g.rows()) {
      throw ShapeError("decoupled: covariance factor must be M_g x M_g");
    }
    if (s.size() > 0 && !(s.diagonal().array() > 0.0).all()) {
      throw ContractError("decoupled: covariance factor diagonal must be > 0");
    }
  }
}

inline Moments<Matrix> decoupled_predict(const Matrix &k_q_ka,
                                         const Matrix &k_q_kg,
                                         const Matrix &k_kg_ka,
                                         const CholeskyFactor &k_kg_kg_chol,
                                         const Vector &k_qq_diag,
                                         const DecoupledVariational &dv) {
  validate(dv);
  return decoupled_moments<Matrix>(k_q_ka, k_q_kg, k_kg_ka, k_kg_kg_chol,
                                   Matrix(k_qq_diag), dv.v_a, dv.v_g,
                                   dv.s_g_chol, dv.share_cov_across_dims,
                                   DecoupledForm::Orthogonal);
}

inline Moments<Matrix> decoupled_predict_cheng(
    const Matrix &k_q_ka, const Matrix &k_q_kg, const Matrix &k_kg_ka,
    const CholeskyFactor &k_kg_kg_chol, const Vector &k_qq_diag,
    const DecoupledVariational &dv) {
  validate(dv);
  return decoupled_moments<Matrix>(k_q_ka, k_q_kg, k_kg_ka, k_kg_kg_chol,
                                   Matrix(k_qq_diag), dv.v_a, dv.v_g,
                                   dv.s_g_chol, dv.share_cov_across_dims,
                                   DecoupledForm::Cheng);
}

/// Kernel matrices over amortized keys (a) and global keys (g).
struct DecoupledGrams {
  Matrix k_aa;
  Matrix k_ga;
  Matrix k_gg;
  CholeskyFactor k_gg_chol;
};

inline DecoupledGrams make_decoupled_grams(const Matrix &k_aa,
                                           const Matrix &k_ga,
                                           const Matrix &k_gg,
                                           double base_jitter = kDefaultJitter) {
  return {k_aa, k_ga, k_gg, cholesky(k_gg, base_jitter)};
}

inline double kl_decoupled_head(const DecoupledVariational &dv,
                                const DecoupledGrams &g) {
  validate(dv);
  return kl_decoupled<Matrix>(g.k_aa, g.k_ga, g.k_gg_chol, dv.v_a, dv.v_g,
                              dv.s_g_chol, dv.share_cov_across_dims,
                              DecoupledForm::Orthogonal);
}

/// KL(q(u) || N(0, K_zz)) for one output dimension. With `reparameterized`
/// the mean field of q holds v = K_zz^-1 m_u.
inline double kl_standard(const VariationalGaussian &q,
                          const CholeskyFactor &k_zz_chol,
                          bool reparameterized = false) {
  if (q.mean.size() != k_zz_chol.lower.rows()) {
    throw ShapeError("kl_standard: mean length does not match K_zz");
  }
  return kl_standard_terms<Matrix>(Matrix(q.mean), k_zz_chol, {q.cov_chol},
                                   true, reparameterized);
}

/// Expresses a decoupled posterior as an ordinary SVGP over the joint
/// inducing set [amortized; global], one q(u) per output dimension:
///   m_a = (K_aa - K_ag K_gg^-1 K_ga) v_a,  m_g = K_gg v_g
///   m_u = [K_ag K_gg^-1 m_g + m_a; m_g]
///   S_u = [[K_aa + K_ag K_gg^-1 (S_g - K_gg) K_gg^-1 K_ga, K_ag K_gg^-1 S_g],
///          [S_g K_gg^-1 K_ga,                              S_g]]
inline std::vector<VariationalGaussian>
structured_variational_embed(const DecoupledVariational &dv,
                             const DecoupledGrams &g,
                             double base_jitter = kDefaultJitter) {
  validate(dv);
  const Eigen::Index ma = g.k_aa.rows();
  const Eigen::Index mg = g.k_gg.rows();
  const Matrix k_ag = g.k_ga.transpose();
  // P = K_ag K_gg^-1
  const Matrix p = solve_cholesky(g.k_gg_chol, g.k_ga).transpose();
  const Matrix schur = g.k_aa - p * g.k_ga;
  std::vector<VariationalGaussian> out;
  for (Eigen::Index d = 0; d < dv.output_dims(); ++d) {
    const Matrix &lg = dv.s_g_chol[dv.share_cov_across_dims ? 0 : d];
    const Matrix s_g = lg * lg.transpose();
    const Vector m_a = schur * dv.v_a.col(d);
    const Vector m_g = g.k_gg * dv.v_g.col(d);
    Vector m_u(ma + mg);
    m_u.head(ma) = p * m_g + m_a;
    m_u.tail(mg) = m_g;
    Matrix s_u(ma + mg, ma + mg);
    s_u.topLeftCorner(ma, ma) = g.k_aa + p * (s_g - g.k_gg) * p.transpose();
    s_u.topRightCorner(ma, mg) = p * s_g;
    s_u.bottomLeftCorner(mg, ma) = s_g * p.transpose();
    s_u.bottomRightCorner(mg, mg) = s_g;
    s_u = symmetrize(s_u);
    out.push_back({m_u, cholesky(s_u, base_jitter).lower});
  }
  (void)k_ag;
  return out;
}

} // namespace sgpa
