#pragma once

// Base kernels used by kernel attention and every SGPA posterior.
//
//   ArdRbf:      k(x, x') = sf^2 exp(-1/2 sum_j (x_j - x'_j)^2 / l_j^2)
//   Exponential: k(x, x') = sf^2 exp(min(sum_j x_j x'_j / l_j^2, 30))
//
// Hyperparameters live in an unconstrained row `raw` = [log sf, log l_1, ...].
// Gram entries are computed by explicit loops with a fixed summation order so
// that gram(a, b) == gram(b, a)^T holds bitwise, which also makes gram(a, a)
// exactly symmetric without any averaging.

#include <cmath>
#include <string>

#include "sgpa/autodiff.hpp"

namespace sgpa {

enum class KernelFamily { Exponential, ArdRbf };

constexpr double kExponentialClamp = 30.0;

inline std::string to_string(KernelFamily f) {
  return f == KernelFamily::Exponential ? "exponential" : "ard-rbf";
}

inline KernelFamily kernel_family_from_string(const std::string &s) {
  if (s == "exponential") {
    return KernelFamily::Exponential;
  }
  if (s == "ard-rbf") {
    return KernelFamily::ArdRbf;
  }
  throw ConfigError("unknown kernel family '" + s + "'");
}

struct KernelSpec {
  KernelFamily family = KernelFamily::ArdRbf;
  double sigma_f = 1.0;
  Vector lengthscales;

  Eigen::Index dim() const { return lengthscales.size(); }
};

/// sigma_f = exp(raw_0), l_j = exp(raw_{1+j}).
inline KernelSpec hyperparameter_transform(KernelFamily family,
                                           const Vector &raw) {
  if (raw.size() < 1) {
    throw ShapeError("hyperparameter_transform: empty raw vector");
  }
  KernelSpec spec;
  spec.family = family;
  spec.sigma_f = std::exp(raw(0));
  spec.lengthscales = raw.tail(raw.size() - 1).array().exp().matrix();
  return spec;
}

inline Vector raw_hyperparameters(const KernelSpec &spec) {
  if (!(spec.sigma_f > 0.0) || (spec.lengthscales.array() <= 0.0).any()) {
    throw ContractError("kernel hyperparameters must be positive");
  }
  Vector raw(spec.dim() + 1);
  raw(0) = std::log(spec.sigma_f);
  raw.tail(spec.dim()) = spec.lengthscales.array().log().matrix();
  return raw;
}

/// Kernel hyperparameters in either representation; `raw` is 1 x (1 + d).
template <typename M> struct KernelParams {
  KernelFamily family = KernelFamily::ArdRbf;
  M raw;
};

inline KernelParams<Matrix> kernel_params(const KernelSpec &spec) {
  return {spec.family, raw_hyperparameters(spec).transpose()};
}

namespace detail {

struct KernelScales {
  double sf2;
  Vector inv_l2;
};

inline KernelScales kernel_scales(const Matrix &raw, Eigen::Index dim) {
  if (raw.rows() != 1 || raw.cols() != dim + 1) {
    throw ShapeError("kernel: expected 1x" + std::to_string(dim + 1) +
                     " hyperparameters, got " + shape_string(raw));
  }
  KernelScales s;
  s.sf2 = std::exp(2.0 * raw(0, 0));
  s.inv_l2.resize(dim);
  for (Eigen::Index k = 0; k < dim; ++k) {
    s.inv_l2(k) = std::exp(-2.0 * raw(0, k + 1));
  }
  return s;
}

inline Matrix gram_value(KernelFamily family, const Matrix &raw,
                         const Matrix &a, const Matrix &b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("gram: feature dims " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.cols()));
  }
  const Eigen::Index d = a.cols();
  const KernelScales s = kernel_scales(raw, d);
  Matrix k(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      double acc = 0.0;
      if (family == KernelFamily::ArdRbf) {
        for (Eigen::Index c = 0; c < d; ++c) {
          const double diff = a(i, c) - b(j, c);
          acc += diff * diff * s.inv_l2(c);
        }
        k(i, j) = s.sf2 * std::exp(-0.5 * acc);
      } else {
        for (Eigen::Index c = 0; c < d; ++c) {
          acc += a(i, c) * b(j, c) * s.inv_l2(c);
        }
        k(i, j) = s.sf2 * std::exp(std::min(acc, kExponentialClamp));
      }
    }
  }
  return k;
}

inline Matrix gram_diag_value(KernelFamily family, const Matrix &raw,
                              const Matrix &a) {
  const Eigen::Index d = a.cols();
  const KernelScales s = kernel_scales(raw, d);
  Matrix out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (family == KernelFamily::ArdRbf) {
      out(i, 0) = s.sf2;
    } else {
      double acc = 0.0;
      for (Eigen::Index c = 0; c < d; ++c) {
        acc += a(i, c) * a(i, c) * s.inv_l2(c);
      }
      out(i, 0) = s.sf2 * std::exp(std::min(acc, kExponentialClamp));
    }
  }
  return out;
}

/// Mask of entries whose exponent was not clamped (Exponential only).
inline Matrix exponential_unclamped(const Matrix &raw, const Matrix &a,
                                    const Matrix &b) {
  const KernelScales s = kernel_scales(raw, a.cols());
  Matrix mask(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      double acc = 0.0;
      for (Eigen::Index c = 0; c < a.cols(); ++c) {
        acc += a(i, c) * b(j, c) * s.inv_l2(c);
      }
      mask(i, j) = acc < kExponentialClamp ? 1.0 : 0.0;
    }
  }
  return mask;
}

} // namespace detail

inline Matrix gram(const KernelParams<Matrix> &p, const Matrix &a,
                   const Matrix &b) {
  return detail::gram_value(p.family, p.raw, a, b);
}

/// n x 1 column of k(a_i, a_i).
inline Matrix gram_diag(const KernelParams<Matrix> &p, const Matrix &a) {
  return detail::gram_diag_value(p.family, p.raw, a);
}

inline Matrix gram(const KernelSpec &spec, const Matrix &a, const Matrix &b) {
  if (a.cols() != spec.dim() || b.cols() != spec.dim()) {
    throw ShapeError("gram: inputs must have " + std::to_string(spec.dim()) +
                     " columns");
  }
  return gram(kernel_params(spec), a, b);
}

inline Vector gram_diag(const KernelSpec &spec, const Matrix &a) {
  if (a.cols() != spec.dim()) {
    throw ShapeError("gram_diag: inputs must have " +
                     std::to_string(spec.dim()) + " columns");
  }
  return gram_diag(kernel_params(spec), a).col(0);
}

namespace ad {

inline Var gram(const KernelParams<Var> &p, const Var &a, const Var &b) {
  const KernelFamily family = p.family;
  const Var raw = p.raw;
  Matrix k = sgpa::detail::gram_value(family, raw.value(), a.value(), b.value());
  return a.tape().record(
      std::move(k), {raw, a, b}, [family, raw, a, b](Tape &t, std::size_t self) {
        const Matrix &g = t.adjoint(self);
        const Matrix &kv = t.value(self);
        const Matrix &av = a.value();
        const Matrix &bv = b.value();
        const sgpa::detail::KernelScales s = sgpa::detail::kernel_scales(raw.value(), av.cols());
        const Eigen::RowVectorXd il2 = s.inv_l2.transpose();
        Matrix graw = Matrix::Zero(1, raw.cols());
        graw(0, 0) = 2.0 * g.cwiseProduct(kv).sum();
        if (family == KernelFamily::ArdRbf) {
          const Matrix w = g.cwiseProduct(kv);
          const Vector r = w.rowwise().sum();
          const Vector c = w.colwise().sum().transpose();
          const Matrix wb = w * bv;
          if (t.wants(a)) {
            Matrix ga = (wb - r.asDiagonal() * av);
            ga.array().rowwise() *= il2.array();
            t.accumulate(a.id(), ga);
          }
          if (t.wants(b)) {
            Matrix gb = w.transpose() * av - c.asDiagonal() * bv;
            gb.array().rowwise() *= il2.array();
            t.accumulate(b.id(), gb);
          }
          if (t.wants(raw)) {
            for (Eigen::Index k = 0; k < av.cols(); ++k) {
              const double term = r.dot(av.col(k).cwiseAbs2()) +
                                  c.dot(bv.col(k).cwiseAbs2()) -
                                  2.0 * av.col(k).dot(wb.col(k));
              graw(0, k + 1) = term * s.inv_l2(k);
            }
          }
        } else {
          const Matrix w = g.cwiseProduct(kv).cwiseProduct(
              sgpa::detail::exponential_unclamped(raw.value(), av, bv));
          const Matrix wb = w * bv;
          if (t.wants(a)) {
            Matrix ga = wb;
            ga.array().rowwise() *= il2.array();
            t.accumulate(a.id(), ga);
          }
          if (t.wants(b)) {
            Matrix gb = w.transpose() * av;
            gb.array().rowwise() *= il2.array();
            t.accumulate(b.id(), gb);
          }
          if (t.wants(raw)) {
            for (Eigen::Index k = 0; k < av.cols(); ++k) {
              graw(0, k + 1) = -2.0 * s.inv_l2(k) * av.col(k).dot(wb.col(k));
            }
          }
        }
        t.accumulate(raw.id(), graw);
      });
}

inline Var gram_diag(const KernelParams<Var> &p, const Var &a) {
  const KernelFamily family = p.family;
  const Var raw = p.raw;
  Matrix d = sgpa::detail::gram_diag_value(family, raw.value(), a.value());
  return a.tape().record(
      std::move(d), {raw, a}, [family, raw, a](Tape &t, std::size_t self) {
        const Matrix &g = t.adjoint(self);
        const Matrix &dv = t.value(self);
        const Matrix &av = a.value();
        const sgpa::detail::KernelScales s = sgpa::detail::kernel_scales(raw.value(), av.cols());
        Matrix graw = Matrix::Zero(1, raw.cols());
        graw(0, 0) = 2.0 * g.cwiseProduct(dv).sum();
        if (family == KernelFamily::Exponential) {
          Matrix ga = Matrix::Zero(av.rows(), av.cols());
          for (Eigen::Index i = 0; i < av.rows(); ++i) {
            double acc = 0.0;
            for (Eigen::Index c = 0; c < av.cols(); ++c) {
              acc += av(i, c) * av(i, c) * s.inv_l2(c);
            }
            if (acc >= kExponentialClamp) {
              continue;
            }
            const double w = g(i, 0) * dv(i, 0);
            for (Eigen::Index c = 0; c < av.cols(); ++c) {
              ga(i, c) = 2.0 * w * av(i, c) * s.inv_l2(c);
              graw(0, c + 1) -= 2.0 * w * av(i, c) * av(i, c) * s.inv_l2(c);
            }
          }
          t.accumulate(a.id(), ga);
        }
        t.accumulate(raw.id(), graw);
      });
}

} // namespace ad

} // namespace sgpa
