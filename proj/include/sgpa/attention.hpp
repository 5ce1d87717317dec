#pragma once

// Attention heads: scaled dot-product, kernel attention and the two SGPA
// heads. The head bodies are templated on the matrix representation; the
// plain-matrix entry points at the bottom are thin wrappers over them.

#include <cmath>
#include <optional>
#include <vector>

#include "sgpa/kernels.hpp"
#include "sgpa/svgp.hpp"

namespace sgpa {

/// softmax(q k^T / sqrt(d_k)) v with the softmax taken row-wise.
template <typename M> M sdp_attention(const M &q, const M &k, const M &v) {
  if (q.cols() != k.cols()) {
    throw ShapeError("sdp_attention: query/key dims differ");
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(k.cols()));
  return matmul(softmax_rows(scale(matmul(q, transpose(k)), s)), v);
}

/// K(q, k) v, no row normalization.
template <typename M>
M kernel_attention(const KernelParams<M> &kp, const M &q, const M &k,
                   const M &v) {
  return matmul(gram(kp, q, k), v);
}

inline Matrix kernel_attention(const KernelSpec &spec, const Matrix &q,
                               const Matrix &k, const Matrix &v) {
  return matmul(gram(spec, q, k), v);
}

template <typename M> struct HeadOutput {
  M mean;
  M var;
  M sample;
  scalar_t<M> kl;
  std::size_t clamped = 0;
};

/// Global keys of one decoupled head. Shared by every sequence in a batch,
/// so the factorization of K_gg happens once per forward pass.
template <typename M> struct GlobalKeys {
  M keys;
  M k_gg;
  BasicCholesky<M> chol;
};

/// k_g = G(Z_g) W_qk and the factor of K(k_g, k_g).
template <typename M>
GlobalKeys<M> global_keys(const KernelParams<M> &kp, const M &g_features,
                          const M &w_qk, double base_jitter) {
  GlobalKeys<M> g;
  g.keys = matmul(g_features, w_qk);
  g.k_gg = gram(kp, g.keys, g.keys);
  g.chol = cholesky(g.k_gg, base_jitter);
  return g;
}

/// mean + sqrt(var) * noise. Zero noise returns the mean unchanged.
template <typename M>
M reparameterize(const M &mean, const M &var, const Matrix &noise) {
  require_same_shape(value_of(mean), noise, "reparameterize");
  return add(mean, hadamard(sqrt(var), lift(mean, noise)));
}

/// Decoupled SGPA head on one sequence of layer inputs s (already passed
/// through the layer nonlinearity). Queries and amortized keys coincide.
/// `globals` is empty exactly when M_g = 0; the head then reduces to kernel
/// attention with prior variance.
template <typename M>
HeadOutput<M> decoupled_head_forward(const KernelParams<M> &kp, const M &s,
                                     const M &w_qk, const M &w_v,
                                     const std::optional<GlobalKeys<M>> &globals,
                                     const M &v_g, const std::vector<M> &s_chols,
                                     bool shared, const Matrix &noise,
                                     DecoupledForm form) {
  const M q = matmul(s, w_qk);
  const M v_a = matmul(s, w_v);
  const M k_qa = gram(kp, q, q);
  const M k_qq_diag = gram_diag(kp, q);
  HeadOutput<M> out;
  if (!globals) {
    out.mean = matmul(k_qa, v_a);
    out.var = clamp_min(repeat_cols(k_qq_diag, v_a.cols()), 0.0);
    out.kl = 0.5 * sum(hadamard(v_a, matmul(k_qa, v_a)));
  } else {
    const M k_qg = gram(kp, q, globals->keys);
    const M k_ga = transpose(k_qg);
    Moments<M> m = decoupled_moments<M>(k_qa, k_qg, k_ga, globals->chol,
                                        k_qq_diag, v_a, v_g, s_chols, shared,
                                        form);
    out.mean = std::move(m.mean);
    out.var = std::move(m.var);
    out.clamped = m.clamped;
    out.kl = kl_decoupled<M>(k_qa, k_ga, globals->chol, v_a, v_g, s_chols,
                             shared, form);
  }
  out.sample = reparameterize(out.mean, out.var, noise);
  return out;
}

/// Lower factors of the per-sequence covariance of a standard SGPA head.
/// R = s W_s has T_max * n_factors columns; factor c is read from the leading
/// T x T block of column chunk c.
template <typename M>
std::vector<M> standard_cov_factors(const M &s, const M &w_s, Eigen::Index t_max,
                                    Eigen::Index n_factors) {
  const Eigen::Index t = s.rows();
  if (t > t_max) {
    throw ContractError("standard SGPA head: sequence length " +
                        std::to_string(t) + " exceeds capacity " +
                        std::to_string(t_max));
  }
  if (w_s.cols() != t_max * n_factors) {
    throw ShapeError("standard SGPA head: W_s must have T_max * factors columns");
  }
  const M r = matmul(s, w_s);
  std::vector<M> out;
  out.reserve(static_cast<std::size_t>(n_factors));
  for (Eigen::Index c = 0; c < n_factors; ++c) {
    out.push_back(chol_from_raw(slice(r, 0, c * t_max, t, t)));
  }
  return out;
}

/// Standard SGPA head: the keys themselves are the inducing inputs, with an
/// input-dependent covariance S. Costs O(T^3) per sequence.
///   m_d = K_qk v_d,  Sigma_d = K_qq + K_qk (K^-1 S_d K^-1 - K^-1) K_kq
template <typename M>
HeadOutput<M> standard_head_forward(const KernelParams<M> &kp, const M &s,
                                    const M &w_qk, const M &w_v, const M &w_s,
                                    Eigen::Index t_max, bool shared,
                                    const Matrix &noise, double base_jitter) {
  const M q = matmul(s, w_qk);
  const M v = matmul(s, w_v);
  const Eigen::Index n_factors = shared ? 1 : v.cols();
  const std::vector<M> factors = standard_cov_factors(s, w_s, t_max, n_factors);
  const M k_qk = gram(kp, q, q);
  const BasicCholesky<M> chol = cholesky(k_qk, base_jitter);
  Moments<M> m = svgp_diag_variance<M>(k_qk, chol, gram_diag(kp, q), factors,
                                       shared, v.cols());
  HeadOutput<M> out;
  out.mean = matmul(k_qk, v);
  out.var = std::move(m.var);
  out.clamped = m.clamped;
  out.kl = kl_standard_terms<M>(v, chol, factors, shared, true);
  out.sample = reparameterize(out.mean, out.var, noise);
  return out;
}

/// concat(heads) W_F.
template <typename M> M combine_heads(const std::vector<M> &heads, const M &w_f) {
  if (heads.empty()) {
    throw ShapeError("combine_heads: no heads");
  }
  for (const M &h : heads) {
    if (h.rows() != heads.front().rows() || h.cols() != heads.front().cols()) {
      throw ShapeError("combine_heads: heads differ in shape");
    }
  }
  return matmul(concat_cols(heads), w_f);
}

// ---- plain-matrix API ------------------------------------------------------

/// Parameters of one decoupled head. `dv.v_a` is unused: amortized weights
/// are computed from the input.
struct HeadState {
  Matrix w_qk;
  Matrix w_v;
  /// Global inducing locations in the layer-input space, M_g x d_prev.
  Matrix z_g;
  DecoupledVariational dv;
  KernelSpec kernel;
  DecoupledForm form = DecoupledForm::Orthogonal;
  double base_jitter = kDefaultJitter;

  Eigen::Index m_global() const { return z_g.rows(); }
};

struct StandardHeadState {
  Matrix w_qk;
  Matrix w_v;
  /// d_s x (T_max * n_factors).
  Matrix w_s;
  Eigen::Index t_max = 0;
  bool share_cov_across_dims = true;
  KernelSpec kernel;
  double base_jitter = kDefaultJitter;
};

/// `g_features` is the layer nonlinearity applied to Z_g.
inline HeadOutput<Matrix> decoupled_sgpa_head(const HeadState &h, const Matrix &s,
                                              const Matrix &g_features,
                                              const Matrix &noise) {
  const KernelParams<Matrix> kp = kernel_params(h.kernel);
  std::optional<GlobalKeys<Matrix>> globals;
  if (h.m_global() > 0) {
    if (g_features.rows() != h.m_global()) {
      throw ShapeError("decoupled_sgpa_head: g_features must have M_g rows");
    }
    globals = global_keys<Matrix>(kp, g_features, h.w_qk, h.base_jitter);
    DecoupledVariational dv = h.dv;
    dv.v_a = Matrix::Zero(s.rows(), h.dv.v_g.cols());
    validate(dv);
  }
  return decoupled_head_forward<Matrix>(kp, s, h.w_qk, h.w_v, globals, h.dv.v_g,
                                        h.dv.s_g_chol, h.dv.share_cov_across_dims,
                                        noise, h.form);
}

inline HeadOutput<Matrix> standard_sgpa_head(const StandardHeadState &h,
                                             const Matrix &s, const Matrix &noise) {
  return standard_head_forward<Matrix>(kernel_params(h.kernel), s, h.w_qk, h.w_v,
                                       h.w_s, h.t_max, h.share_cov_across_dims,
                                       noise, h.base_jitter);
}

/// Variational-covariance parameters a head adds on top of kernel attention.
/// Decoupled: Z_g, v_g and the S_g factors, none of which depend on T.
/// Standard: the lower-triangular entries of one T x T factor per covariance.
inline std::size_t decoupled_extra_parameters(Eigen::Index m_global,
                                              Eigen::Index d_prev,
                                              Eigen::Index d_v, bool shared) {
  const auto mg = static_cast<std::size_t>(m_global);
  const std::size_t factors = shared ? 1 : static_cast<std::size_t>(d_v);
  return mg * static_cast<std::size_t>(d_prev) + mg * static_cast<std::size_t>(d_v) +
         factors * mg * (mg + 1) / 2;
}

inline std::size_t standard_extra_parameters(Eigen::Index t, Eigen::Index d_v,
                                             bool shared) {
  const auto tt = static_cast<std::size_t>(t);
  const std::size_t factors = shared ? 1 : static_cast<std::size_t>(d_v);
  return factors * tt * (tt + 1) / 2;
}

} // namespace sgpa
