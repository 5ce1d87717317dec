#pragma once

// SGPA transformer: embedding, a stack of attention layers and a pooled
// readout, with the multi-layer ELBO as training objective.
//
// One layer maps F (T x d) to
//   s  = LN1(F + MLP(F))                  layer nonlinearity G
//   A  = concat_h(head_h(s)) W_F
//   F' = LN2(s + A)
// For SGPA heads the head output is a reparameterized sample, so uncertainty
// propagates to the next layer. Global keys use G applied to Z_g with the
// same weights. The readout mean-pools over tokens and applies a linear map.
//
// Every formula is templated on Matrix / Var: the plain path serves
// prediction and benchmarks, the taped path serves training and gradient
// audits, and both produce identical forward values.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sgpa/attention.hpp"
#include "sgpa/parameters.hpp"
#include "sgpa/random.hpp"

namespace sgpa {

enum class AttentionMode { Sdp, Kernel, SgpaStandard, SgpaDecoupled, SgpaDecoupledCheng };

inline std::string to_string(AttentionMode m) {
  switch (m) {
  case AttentionMode::Sdp:
    return "sdp";
  case AttentionMode::Kernel:
    return "kernel";
  case AttentionMode::SgpaStandard:
    return "sgpa-standard";
  case AttentionMode::SgpaDecoupled:
    return "sgpa-decoupled";
  case AttentionMode::SgpaDecoupledCheng:
    return "sgpa-decoupled-cheng";
  }
  return "?";
}

inline AttentionMode attention_mode_from_string(const std::string &s) {
  for (AttentionMode m : {AttentionMode::Sdp, AttentionMode::Kernel,
                          AttentionMode::SgpaStandard, AttentionMode::SgpaDecoupled,
                          AttentionMode::SgpaDecoupledCheng}) {
    if (to_string(m) == s) {
      return m;
    }
  }
  throw ConfigError("unknown attention mode '" + s + "'");
}

inline bool is_sgpa(AttentionMode m) {
  return m == AttentionMode::SgpaStandard || m == AttentionMode::SgpaDecoupled ||
         m == AttentionMode::SgpaDecoupledCheng;
}

enum class Likelihood { Categorical, Gaussian };

inline std::string to_string(Likelihood l) {
  return l == Likelihood::Categorical ? "categorical" : "gaussian";
}

inline Likelihood likelihood_from_string(const std::string &s) {
  if (s == "categorical") {
    return Likelihood::Categorical;
  }
  if (s == "gaussian") {
    return Likelihood::Gaussian;
  }
  throw ConfigError("unknown likelihood '" + s + "'");
}

struct ModelConfig {
  /// Feature width of continuous tokens. Ignored when vocab_size > 0, in
  /// which case every sequence is a T x 1 column of token ids.
  Eigen::Index d_in = 4;
  Eigen::Index vocab_size = 0;
  /// Positional table size; also the capacity of standard SGPA heads.
  Eigen::Index max_len = 16;
  Eigen::Index layers = 1;
  Eigen::Index heads = 2;
  Eigen::Index d_k = 4;
  Eigen::Index d_v = 4;
  Eigen::Index mlp_hidden = 16;
  Eigen::Index m_global = 4;
  /// Classes for Categorical; must be 1 for Gaussian.
  Eigen::Index n_outputs = 3;
  KernelFamily kernel = KernelFamily::ArdRbf;
  AttentionMode attention = AttentionMode::SgpaDecoupled;
  Likelihood likelihood = Likelihood::Categorical;
  bool share_cov_across_dims = true;
  double base_jitter = kDefaultJitter;
  double layer_norm_eps = 1e-5;

  Eigen::Index d_model() const { return heads * d_v; }
  Eigen::Index input_width() const { return vocab_size > 0 ? vocab_size : d_in; }

  void validate() const {
    auto need = [](bool ok, const std::string &field, const std::string &why) {
      if (!ok) {
        throw ConfigError("model." + field + ": " + why);
      }
    };
    need(vocab_size >= 0, "vocab_size", "must be >= 0");
    need(vocab_size > 0 || d_in >= 1, "d_in", "must be >= 1");
    need(max_len >= 1, "max_len", "must be >= 1");
    need(layers >= 0, "layers", "must be >= 0");
    need(heads >= 1, "heads", "must be >= 1");
    need(d_k >= 1, "d_k", "must be >= 1");
    need(d_v >= 1, "d_v", "must be >= 1");
    need(mlp_hidden >= 1, "mlp_hidden", "must be >= 1");
    need(m_global >= 0, "m_global", "must be >= 0");
    need(base_jitter > 0.0, "base_jitter", "must be > 0");
    need(layer_norm_eps > 0.0, "layer_norm_eps", "must be > 0");
    if (likelihood == Likelihood::Categorical) {
      need(n_outputs >= 2, "n_outputs", "categorical needs >= 2 classes");
    } else {
      need(n_outputs == 1, "n_outputs", "gaussian needs exactly 1 output");
    }
  }
};

constexpr ParamId kNoParam = static_cast<ParamId>(-1);

struct HeadParams {
  ParamId w_qk = kNoParam; // query projection for sdp
  ParamId w_k = kNoParam;  // sdp only
  ParamId w_v = kNoParam;
  ParamId kernel = kNoParam;
  ParamId z_g = kNoParam;
  ParamId v_g = kNoParam;
  ParamId w_s = kNoParam;
  std::vector<ParamId> s_g;
};

struct LayerParams {
  ParamId w1, b1, w2, b2, ln1_g, ln1_b, ln2_g, ln2_b, w_f;
  std::vector<HeadParams> heads;
};

struct Model {
  ModelConfig config;
  ParameterSet params;
  ParamId embed_w = kNoParam;
  ParamId embed_b = kNoParam;
  ParamId pos = kNoParam;
  std::vector<LayerParams> layers;
  ParamId out_w = kNoParam;
  ParamId out_b = kNoParam;
  ParamId log_noise = kNoParam;

  Eigen::Index n_factors() const {
    return config.share_cov_across_dims ? 1 : config.d_v;
  }
};

/// Builds the parameter layout and draws initial values. Global inducing
/// locations, global variational means and covariance factors (lower triangle
/// and log-diagonal) are standard Gaussian; weight matrices are uniform with
/// bound 1/sqrt(fan_in); biases zero; layer-norm gains one.
inline Model init_model(const ModelConfig &cfg, std::uint64_t init_seed) {
  cfg.validate();
  std::mt19937_64 rng(init_seed);
  Model m;
  m.config = cfg;
  const Eigen::Index d = cfg.d_model();
  auto weight = [&](const std::string &name, Eigen::Index fan_in, Eigen::Index cols) {
    return m.params.add(name, uniform_matrix(rng, fan_in, cols,
                                             1.0 / std::sqrt(static_cast<double>(fan_in))));
  };
  auto zeros = [&](const std::string &name, Eigen::Index r, Eigen::Index c) {
    return m.params.add(name, Matrix::Zero(r, c));
  };
  auto ones = [&](const std::string &name, Eigen::Index c) {
    return m.params.add(name, Matrix::Ones(1, c));
  };

  m.embed_w = weight("embed.w", cfg.input_width(), d);
  m.embed_b = zeros("embed.b", 1, d);
  m.pos = m.params.add("embed.pos", uniform_matrix(rng, cfg.max_len, d,
                                                   1.0 / std::sqrt(static_cast<double>(d))));
  for (Eigen::Index l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams lp;
    lp.w1 = weight(p + "mlp.w1", d, cfg.mlp_hidden);
    lp.b1 = zeros(p + "mlp.b1", 1, cfg.mlp_hidden);
    lp.w2 = weight(p + "mlp.w2", cfg.mlp_hidden, d);
    lp.b2 = zeros(p + "mlp.b2", 1, d);
    lp.ln1_g = ones(p + "ln1.g", d);
    lp.ln1_b = zeros(p + "ln1.b", 1, d);
    for (Eigen::Index h = 0; h < cfg.heads; ++h) {
      const std::string hp = p + "head" + std::to_string(h) + ".";
      HeadParams head;
      head.w_qk = weight(hp + (cfg.attention == AttentionMode::Sdp ? "w_q" : "w_qk"), d, cfg.d_k);
      if (cfg.attention == AttentionMode::Sdp) {
        head.w_k = weight(hp + "w_k", d, cfg.d_k);
      }
      head.w_v = weight(hp + "w_v", d, cfg.d_v);
      if (cfg.attention != AttentionMode::Sdp) {
        head.kernel = zeros(hp + "kernel", 1, cfg.d_k + 1);
      }
      if (cfg.attention == AttentionMode::SgpaDecoupled ||
          cfg.attention == AttentionMode::SgpaDecoupledCheng) {
        if (cfg.m_global > 0) {
          head.z_g = m.params.add(hp + "z_g", standard_normal(rng, cfg.m_global, d));
          head.v_g = m.params.add(hp + "v_g", standard_normal(rng, cfg.m_global, cfg.d_v));
          for (Eigen::Index c = 0; c < m.n_factors(); ++c) {
            Matrix raw = standard_normal(rng, cfg.m_global, cfg.m_global);
            raw.triangularView<Eigen::StrictlyUpper>().setZero();
            head.s_g.push_back(m.params.add(hp + "s_g" + std::to_string(c), raw));
          }
        }
      } else if (cfg.attention == AttentionMode::SgpaStandard) {
        head.w_s = weight(hp + "w_s", d, cfg.max_len * m.n_factors());
      }
      lp.heads.push_back(std::move(head));
    }
    lp.w_f = weight(p + "w_f", d, d);
    lp.ln2_g = ones(p + "ln2.g", d);
    lp.ln2_b = zeros(p + "ln2.b", 1, d);
    m.layers.push_back(std::move(lp));
  }
  m.out_w = weight("readout.w", d, cfg.n_outputs);
  m.out_b = zeros("readout.b", 1, cfg.n_outputs);
  if (cfg.likelihood == Likelihood::Gaussian) {
    m.log_noise = zeros("readout.log_noise", 1, 1);
  }
  return m;
}

/// Parameter values of a model in representation M.
template <typename M> using ParamValues = std::vector<M>;

inline ParamValues<Matrix> plain_values(const Model &m) {
  ParamValues<Matrix> v;
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    v.push_back(m.params[i]);
  }
  return v;
}

/// Source of reparameterization noise; `zero` replaces every draw with 0.
struct NoiseSource {
  std::mt19937_64 *rng = nullptr;
  bool zero = false;

  Matrix draw(Eigen::Index rows, Eigen::Index cols) {
    if (zero || rng == nullptr) {
      return Matrix::Zero(rows, cols);
    }
    return standard_normal(*rng, rows, cols);
  }
};

/// Per-layer quantities shared by every sequence of one forward pass.
template <typename M> struct LayerCache {
  std::vector<KernelParams<M>> kernels;
  std::vector<std::optional<GlobalKeys<M>>> globals;
  std::vector<std::vector<M>> s_chols;
};

template <typename M>
M layer_nonlinearity(const LayerParams &lp, const ParamValues<M> &p, const M &f,
                     double eps) {
  const M hidden = relu(add_row_broadcast(matmul(f, p[lp.w1]), p[lp.b1]));
  const M out = add_row_broadcast(matmul(hidden, p[lp.w2]), p[lp.b2]);
  return layer_norm(add(f, out), p[lp.ln1_g], p[lp.ln1_b], eps);
}

template <typename M>
std::vector<LayerCache<M>> prepare_layers(const Model &m, const ParamValues<M> &p) {
  std::vector<LayerCache<M>> caches;
  const ModelConfig &cfg = m.config;
  for (const LayerParams &lp : m.layers) {
    LayerCache<M> c;
    for (const HeadParams &hp : lp.heads) {
      c.kernels.push_back(KernelParams<M>{
          cfg.kernel, hp.kernel == kNoParam ? M{} : p[hp.kernel]});
      std::optional<GlobalKeys<M>> g;
      std::vector<M> chols;
      if (hp.z_g != kNoParam) {
        const M g_features = layer_nonlinearity(lp, p, p[hp.z_g], cfg.layer_norm_eps);
        g = global_keys<M>(c.kernels.back(), g_features, p[hp.w_qk], cfg.base_jitter);
        for (ParamId s : hp.s_g) {
          chols.push_back(chol_from_raw(p[s]));
        }
      }
      c.globals.push_back(std::move(g));
      c.s_chols.push_back(std::move(chols));
    }
    caches.push_back(std::move(c));
  }
  return caches;
}

template <typename M> struct SequenceOutput {
  /// 1 x n_outputs: logits or regression mean.
  M output;
  /// Row-major L x H; empty for non-SGPA attention.
  std::vector<scalar_t<M>> kl;
  std::size_t clamped = 0;
};

inline Matrix one_hot(const Matrix &ids, Eigen::Index vocab) {
  Matrix out = Matrix::Zero(ids.rows(), vocab);
  for (Eigen::Index t = 0; t < ids.rows(); ++t) {
    const double v = ids(t, 0);
    const auto k = static_cast<Eigen::Index>(v);
    if (static_cast<double>(k) != v || k < 0 || k >= vocab) {
      throw ContractError("token id " + std::to_string(v) + " outside vocabulary");
    }
    out(t, k) = 1.0;
  }
  return out;
}

/// Runs one sequence through the model. The noise for head h of layer l is
/// drawn in (layer, head) order as a T x d_v block.
template <typename M>
SequenceOutput<M> forward_sequence(const Model &m, const ParamValues<M> &p,
                                   const std::vector<LayerCache<M>> &caches,
                                   const Matrix &x, NoiseSource &noise) {
  const ModelConfig &cfg = m.config;
  const Eigen::Index t = x.rows();
  if (t == 0) {
    throw ContractError("forward: empty sequence");
  }
  if (t > cfg.max_len) {
    throw ContractError("forward: sequence length " + std::to_string(t) +
                        " exceeds max_len " + std::to_string(cfg.max_len));
  }
  const Matrix input = cfg.vocab_size > 0 ? one_hot(x, cfg.vocab_size) : x;
  if (input.cols() != cfg.input_width() || (cfg.vocab_size > 0 && x.cols() != 1)) {
    throw ShapeError("forward: input has " + std::to_string(x.cols()) +
                     " columns, model expects " +
                     std::to_string(cfg.vocab_size > 0 ? 1 : cfg.d_in));
  }
  const M &like = p[m.embed_w];
  M f = add(add_row_broadcast(matmul(lift(like, input), p[m.embed_w]), p[m.embed_b]),
            slice(p[m.pos], 0, 0, t, cfg.d_model()));

  SequenceOutput<M> out;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const LayerParams &lp = m.layers[l];
    const LayerCache<M> &cache = caches[l];
    const M s = layer_nonlinearity(lp, p, f, cfg.layer_norm_eps);
    std::vector<M> heads;
    for (std::size_t h = 0; h < lp.heads.size(); ++h) {
      const HeadParams &hp = lp.heads[h];
      switch (cfg.attention) {
      case AttentionMode::Sdp: {
        const M v = matmul(s, p[hp.w_v]);
        heads.push_back(sdp_attention(matmul(s, p[hp.w_qk]), matmul(s, p[hp.w_k]), v));
        break;
      }
      case AttentionMode::Kernel: {
        const M q = matmul(s, p[hp.w_qk]);
        heads.push_back(kernel_attention(cache.kernels[h], q, q, matmul(s, p[hp.w_v])));
        break;
      }
      case AttentionMode::SgpaDecoupled:
      case AttentionMode::SgpaDecoupledCheng: {
        const Matrix eps = noise.draw(t, cfg.d_v);
        const M &v_g = hp.v_g == kNoParam ? like : p[hp.v_g];
        HeadOutput<M> o = decoupled_head_forward<M>(
            cache.kernels[h], s, p[hp.w_qk], p[hp.w_v], cache.globals[h], v_g,
            cache.s_chols[h], cfg.share_cov_across_dims, eps,
            cfg.attention == AttentionMode::SgpaDecoupled ? DecoupledForm::Orthogonal
                                                          : DecoupledForm::Cheng);
        out.kl.push_back(o.kl);
        out.clamped += o.clamped;
        heads.push_back(std::move(o.sample));
        break;
      }
      case AttentionMode::SgpaStandard: {
        const Matrix eps = noise.draw(t, cfg.d_v);
        HeadOutput<M> o = standard_head_forward<M>(
            cache.kernels[h], s, p[hp.w_qk], p[hp.w_v], p[hp.w_s], cfg.max_len,
            cfg.share_cov_across_dims, eps, cfg.base_jitter);
        out.kl.push_back(o.kl);
        out.clamped += o.clamped;
        heads.push_back(std::move(o.sample));
        break;
      }
      }
    }
    const M a = combine_heads(heads, p[lp.w_f]);
    f = layer_norm(add(s, a), p[lp.ln2_g], p[lp.ln2_b], cfg.layer_norm_eps);
  }
  out.output = add_row_broadcast(matmul(mean_rows(f), p[m.out_w]), p[m.out_b]);
  return out;
}

/// log p(y | output) for one sequence.
template <typename M>
scalar_t<M> log_likelihood(const Model &m, const ParamValues<M> &p, const M &output,
                           double y) {
  if (m.config.likelihood == Likelihood::Categorical) {
    const auto c = static_cast<Eigen::Index>(y);
    if (static_cast<double>(c) != y || c < 0 || c >= m.config.n_outputs) {
      throw ContractError("categorical likelihood: label " + std::to_string(y) +
                          " is not a class index below " +
                          std::to_string(m.config.n_outputs));
    }
    return sum(slice(log_softmax_rows(output), 0, c, 1, 1));
  }
  if (!std::isfinite(y)) {
    throw ContractError("gaussian likelihood: non-finite target");
  }
  // -1/2 log 2pi - log sigma - (y - f)^2 / (2 sigma^2)
  const M &ls = p[m.log_noise];
  const M r2 = square(add_scalar(output, -y));
  const M nll = add(ls, scale(hadamard(r2, exp(scale(ls, -2.0))), 0.5));
  return -0.5 * std::log(2.0 * M_PI) - sum(nll);
}

struct ElboBreakdown {
  double expected_log_lik = 0.0;
  /// L x H; zeros for attention without variational parameters.
  Matrix kl_per_layer_head;
  double total = 0.0;

  double kl_total() const { return kl_per_layer_head.sum(); }
};

template <typename M> struct ElboTerms {
  /// expected_log_lik - sum of KL terms, in representation M.
  scalar_t<M> objective;
  ElboBreakdown breakdown;
  std::size_t clamped = 0;
};

/// Monte-Carlo ELBO of a minibatch:
///   (N / B) * mean_samples sum_b log p(y_b | F^L_b) - sum_{l,h} KL_{l,h}
/// where each KL_{l,h} is averaged over the batch and samples, evaluated at
/// the same sampled layer inputs as the likelihood. N defaults to B.
template <typename M>
ElboTerms<M> elbo_terms(const Model &m, const ParamValues<M> &p,
                        const std::vector<Matrix> &xs, const std::vector<double> &ys,
                        int n_samples, NoiseSource noise, double dataset_size = 0.0) {
  if (xs.empty() || xs.size() != ys.size()) {
    throw ContractError("elbo: batch must be nonempty with one label per sequence");
  }
  if (n_samples < 1) {
    throw ContractError("elbo: n_samples must be >= 1");
  }
  const ModelConfig &cfg = m.config;
  const double b = static_cast<double>(xs.size());
  const double n = dataset_size > 0.0 ? dataset_size : b;
  const double per_draw = 1.0 / (b * n_samples);
  const std::vector<LayerCache<M>> caches = prepare_layers(m, p);

  std::optional<scalar_t<M>> ell;
  std::vector<std::optional<scalar_t<M>>> kl(
      static_cast<std::size_t>(cfg.layers * cfg.heads));
  ElboTerms<M> out;
  out.breakdown.kl_per_layer_head = Matrix::Zero(cfg.layers, cfg.heads);
  for (int sample = 0; sample < n_samples; ++sample) {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      SequenceOutput<M> o = forward_sequence(m, p, caches, xs[i], noise);
      out.clamped += o.clamped;
      const scalar_t<M> ll = log_likelihood(m, p, o.output, ys[i]);
      ell = ell ? *ell + ll : ll;
      for (std::size_t k = 0; k < o.kl.size(); ++k) {
        kl[k] = kl[k] ? *kl[k] + o.kl[k] : o.kl[k];
      }
    }
  }
  scalar_t<M> objective = (n * per_draw) * *ell;
  out.breakdown.expected_log_lik = scalar_value(objective);
  double kl_sum = 0.0;
  for (std::size_t k = 0; k < kl.size(); ++k) {
    if (!kl[k]) {
      continue;
    }
    const scalar_t<M> term = per_draw * *kl[k];
    const double v = scalar_value(term);
    out.breakdown.kl_per_layer_head(static_cast<Eigen::Index>(k) / cfg.heads,
                                    static_cast<Eigen::Index>(k) % cfg.heads) = v;
    kl_sum += v;
    objective = objective - term;
  }
  out.breakdown.total = out.breakdown.expected_log_lik - kl_sum;
  out.objective = objective;
  return out;
}

/// ELBO breakdown evaluated without a tape.
inline ElboBreakdown elbo(const Model &m, const std::vector<Matrix> &xs,
                          const std::vector<double> &ys, int n_samples,
                          std::uint64_t seed, double dataset_size = 0.0,
                          bool zero_noise = false) {
  std::mt19937_64 rng(seed);
  return elbo_terms<Matrix>(m, plain_values(m), xs, ys, n_samples,
                            NoiseSource{&rng, zero_noise}, dataset_size)
      .breakdown;
}

/// Per-sample model outputs (logits or regression means), one N x n_outputs
/// matrix per Monte-Carlo sample. Attention without sampling yields a single
/// sample regardless of n_samples.
inline std::vector<Matrix> forward_samples(const Model &m, const std::vector<Matrix> &xs,
                                           int n_samples, std::uint64_t seed,
                                           bool zero_noise = false) {
  if (n_samples < 1) {
    throw ContractError("predict: n_samples must be >= 1");
  }
  const int draws = is_sgpa(m.config.attention) && !zero_noise ? n_samples : 1;
  const ParamValues<Matrix> p = plain_values(m);
  const auto caches = prepare_layers(m, p);
  std::mt19937_64 rng(seed);
  NoiseSource noise{&rng, zero_noise};
  std::vector<Matrix> out(static_cast<std::size_t>(draws),
                          Matrix(static_cast<Eigen::Index>(xs.size()), m.config.n_outputs));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (int s = 0; s < draws; ++s) {
      out[static_cast<std::size_t>(s)].row(static_cast<Eigen::Index>(i)) =
          forward_sequence(m, p, caches, xs[i], noise).output;
    }
  }
  return out;
}

struct Prediction {
  /// Categorical: N x C averaged class probabilities.
  Matrix probs;
  /// Gaussian: predictive mean and variance of the MC mixture.
  Vector mean;
  Vector var;
  int n_samples = 0;
};

/// Categorical: average of per-sample softmax probabilities.
/// Gaussian: mixture moments with observation noise included in var.
inline Prediction predict(const Model &m, const std::vector<Matrix> &xs,
                          int n_samples, std::uint64_t seed, bool zero_noise = false) {
  const std::vector<Matrix> samples = forward_samples(m, xs, n_samples, seed, zero_noise);
  Prediction out;
  out.n_samples = static_cast<int>(samples.size());
  const double inv = 1.0 / static_cast<double>(samples.size());
  const auto n = static_cast<Eigen::Index>(xs.size());
  if (m.config.likelihood == Likelihood::Categorical) {
    out.probs = Matrix::Zero(n, m.config.n_outputs);
    for (const Matrix &s : samples) {
      out.probs += softmax_rows(s);
    }
    out.probs *= inv;
    // Renormalize so rows sum to one to round-off.
    for (Eigen::Index i = 0; i < n; ++i) {
      out.probs.row(i) /= out.probs.row(i).sum();
    }
  } else {
    const double noise_var = std::exp(2.0 * m.params[m.log_noise](0, 0));
    out.mean = Vector::Zero(n);
    Vector second = Vector::Zero(n);
    for (const Matrix &s : samples) {
      out.mean += s.col(0);
      second += s.col(0).cwiseAbs2();
    }
    out.mean *= inv;
    out.var = (second * inv - out.mean.cwiseAbs2()).cwiseMax(0.0);
    out.var.array() += noise_var;
  }
  return out;
}

} // namespace sgpa
