#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every intermediate as a Node holding its value, an
// accumulated adjoint and the rule that pushes that adjoint to its parents.
// Var is a cheap handle (tape pointer + node index). Forward values are
// computed with the plain-matrix functions from linalg.hpp, so a formula
// templated on the matrix type produces bit-identical values whether it is
// instantiated with Matrix or Var.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <utility>
#include <vector>

#include "sgpa/linalg.hpp"

namespace sgpa::ad {

class Tape;

class Var {
public:
  Var() = default;
  Var(Tape *tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix &value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double scalar() const;

  Tape &tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

private:
  Tape *tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Propagates the adjoint of node `self` into its parents.
using BackwardFn = std::function<void(Tape &, std::size_t self)>;

class Tape {
public:
  explicit Tape(std::uint64_t seed = 0) : seed_(seed), rng_(seed) {}
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  /// Leaf that never receives a gradient (data, noise draws).
  Var constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), Matrix(), false, false, nullptr});
    return Var(this, nodes_.size() - 1);
  }

  /// Leaf that accumulates a gradient.
  Var parameter(Matrix value) {
    nodes_.push_back(Node{std::move(value), Matrix(), true, false, nullptr});
    return Var(this, nodes_.size() - 1);
  }

  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    for (const Var &p : parents) {
      if (&p.tape() != this) {
        throw ContractError("operands recorded on different tapes");
      }
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, std::move(fn));
  }

  Var record(Matrix value, const std::vector<Var> &parents, BackwardFn fn) {
    bool needs = false;
    for (const Var &p : parents) {
      if (&p.tape() != this) {
        throw ContractError("operands recorded on different tapes");
      }
      needs = needs || nodes_[p.id()].requires_grad;
    }
    return push(std::move(value), needs, std::move(fn));
  }

  const Matrix &value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Adjoint of node `id` during a backward pass.
  const Matrix &adjoint(std::size_t id) const { return nodes_[id].grad; }

  void accumulate(std::size_t id, const Matrix &g) {
    Node &n = nodes_[id];
    if (!n.requires_grad) {
      return;
    }
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  bool wants(const Var &v) const { return nodes_[v.id()].requires_grad; }

  /// Runs one reverse sweep from a 1x1 loss. Adjoints from any previous sweep
  /// are discarded first, so repeated calls give identical results.
  void backward(const Var &loss) {
    if (&loss.tape() != this) {
      throw ContractError("backward: loss belongs to another tape");
    }
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw ContractError("backward: loss must be 1x1, got " +
                          shape_string(loss.value()));
    }
    for (Node &n : nodes_) {
      n.has_grad = false;
      n.grad.resize(0, 0);
    }
    accumulate(loss.id(), Matrix::Ones(1, 1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node &n = nodes_[i];
      if (n.has_grad && n.backward) {
        n.backward(*this, i);
      }
    }
  }

  /// Gradient of the last backward pass w.r.t. `v`; zeros when unreached.
  Matrix grad(const Var &v) const {
    const Node &n = nodes_[v.id()];
    if (!n.has_grad) {
      return Matrix::Zero(n.value.rows(), n.value.cols());
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t seed() const { return seed_; }
  std::mt19937_64 &rng() { return rng_; }

private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad;
    bool has_grad;
    BackwardFn backward;
  };

  Var push(Matrix value, bool needs, BackwardFn fn) {
    nodes_.push_back(
        Node{std::move(value), Matrix(), needs, false, needs ? std::move(fn) : nullptr});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::uint64_t seed_;
  std::mt19937_64 rng_;
};

inline const Matrix &Var::value() const { return tape_->value(id_); }

inline double Var::scalar() const {
  if (rows() != 1 || cols() != 1) {
    throw ContractError("scalar(): node is " + shape_string(value()));
  }
  return value()(0, 0);
}

namespace detail {

inline void same_tape(const Var &a, const Var &b) {
  if (&a.tape() != &b.tape()) {
    throw ContractError("operands recorded on different tapes");
  }
}

/// Lower triangle with the diagonal halved.
inline Matrix phi(const Matrix &x) {
  Matrix out = sgpa::tril(x, false);
  out.diagonal() *= 0.5;
  return out;
}

} // namespace detail

// ---- elementwise and structural primitives --------------------------------

inline Var add(const Var &a, const Var &b) {
  detail::same_tape(a, b);
  return a.tape().record(sgpa::add(a.value(), b.value()), {a, b},
                         [a, b](Tape &t, std::size_t self) {
                           t.accumulate(a.id(), t.adjoint(self));
                           t.accumulate(b.id(), t.adjoint(self));
                         });
}

inline Var sub(const Var &a, const Var &b) {
  detail::same_tape(a, b);
  return a.tape().record(sgpa::sub(a.value(), b.value()), {a, b},
                         [a, b](Tape &t, std::size_t self) {
                           t.accumulate(a.id(), t.adjoint(self));
                           if (t.wants(b)) {
                             t.accumulate(b.id(), -t.adjoint(self));
                           }
                         });
}

inline Var hadamard(const Var &a, const Var &b) {
  detail::same_tape(a, b);
  return a.tape().record(
      sgpa::hadamard(a.value(), b.value()), {a, b},
      [a, b](Tape &t, std::size_t self) {
        const Matrix &g = t.adjoint(self);
        if (t.wants(a)) {
          t.accumulate(a.id(), g.cwiseProduct(b.value()));
        }
        if (t.wants(b)) {
          t.accumulate(b.id(), g.cwiseProduct(a.value()));
        }
      });
}

inline Var matmul(const Var &a, const Var &b) {
  detail::same_tape(a, b);
  return a.tape().record(
      sgpa::matmul(a.value(), b.value()), {a, b},
      [a, b](Tape &t, std::size_t self) {
        const Matrix &g = t.adjoint(self);
        if (t.wants(a)) {
          t.accumulate(a.id(), g * b.value().transpose());
        }
        if (t.wants(b)) {
          t.accumulate(b.id(), a.value().transpose() * g);
        }
      });
}

inline Var transpose(const Var &a) {
  return a.tape().record(a.value().transpose(), {a},
                         [a](Tape &t, std::size_t self) {
                           t.accumulate(a.id(), t.adjoint(self).transpose());
                         });
}

inline Var scale(const Var &a, double s) {
  return a.tape().record(a.value() * s, {a}, [a, s](Tape &t, std::size_t self) {
    t.accumulate(a.id(), t.adjoint(self) * s);
  });
}

inline Var add_scalar(const Var &a, double s) {
  return a.tape().record(sgpa::add_scalar(a.value(), s), {a},
                         [a](Tape &t, std::size_t self) {
                           t.accumulate(a.id(), t.adjoint(self));
                         });
}

inline Var negate(const Var &a) { return scale(a, -1.0); }

inline Var exp(const Var &a) {
  return a.tape().record(sgpa::exp(a.value()), {a},
                         [a](Tape &t, std::size_t self) {
                           t.accumulate(a.id(), t.adjoint(self).cwiseProduct(
                                                    t.value(self)));
                         });
}

inline Var log(const Var &a) {
  return a.tape().record(sgpa::log(a.value()), {a},
                         [a](Tape &t, std::size_t self) {
                           t.accumulate(a.id(), t.adjoint(self).cwiseQuotient(
                                                    a.value()));
                         });
}

/// The adjoint is taken as zero where the output is exactly zero.
inline Var sqrt(const Var &a) {
  return a.tape().record(
      sgpa::sqrt(a.value()), {a}, [a](Tape &t, std::size_t self) {
        const Matrix &y = t.value(self);
        const Matrix &g = t.adjoint(self);
        Matrix out(y.rows(), y.cols());
        for (Eigen::Index k = 0; k < y.size(); ++k) {
          out(k) = y(k) > 0.0 ? g(k) / (2.0 * y(k)) : 0.0;
        }
        t.accumulate(a.id(), out);
      });
}

inline Var square(const Var &a) {
  return a.tape().record(sgpa::square(a.value()), {a},
                         [a](Tape &t, std::size_t self) {
                           t.accumulate(a.id(), 2.0 * t.adjoint(self).cwiseProduct(
                                                          a.value()));
                         });
}

inline Var relu(const Var &a) {
  return a.tape().record(
      sgpa::relu(a.value()), {a}, [a](Tape &t, std::size_t self) {
        const Matrix mask = (a.value().array() > 0.0).cast<double>().matrix();
        t.accumulate(a.id(), t.adjoint(self).cwiseProduct(mask));
      });
}

/// max(a, lo); entries at or below `lo` pass no gradient.
inline Var clamp_min(const Var &a, double lo) {
  return a.tape().record(
      sgpa::clamp_min(a.value(), lo), {a}, [a, lo](Tape &t, std::size_t self) {
        const Matrix mask = (a.value().array() > lo).cast<double>().matrix();
        t.accumulate(a.id(), t.adjoint(self).cwiseProduct(mask));
      });
}

inline Var softmax_rows(const Var &a) {
  return a.tape().record(
      sgpa::softmax_rows(a.value()), {a}, [a](Tape &t, std::size_t self) {
        const Matrix &y = t.value(self);
        const Matrix &g = t.adjoint(self);
        const Vector inner = g.cwiseProduct(y).rowwise().sum();
        Matrix out = y.cwiseProduct(g.colwise() - inner);
        t.accumulate(a.id(), out);
      });
}

inline Var log_softmax_rows(const Var &a) {
  return a.tape().record(
      sgpa::log_softmax_rows(a.value()), {a}, [a](Tape &t, std::size_t self) {
        const Matrix soft = t.value(self).array().exp().matrix();
        const Matrix &g = t.adjoint(self);
        const Vector total = g.rowwise().sum();
        Matrix out = g - soft.cwiseProduct(total.replicate(1, g.cols()));
        t.accumulate(a.id(), out);
      });
}

inline Var sum(const Var &a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape().record(std::move(v), {a}, [a](Tape &t, std::size_t self) {
    t.accumulate(a.id(), Matrix::Constant(a.rows(), a.cols(),
                                          t.adjoint(self)(0, 0)));
  });
}

inline Var mean(const Var &a) {
  if (a.value().size() == 0) {
    throw ContractError("mean of an empty matrix");
  }
  Matrix v(1, 1);
  v(0, 0) = a.value().mean();
  const double n = static_cast<double>(a.value().size());
  return a.tape().record(std::move(v), {a}, [a, n](Tape &t, std::size_t self) {
    t.accumulate(a.id(), Matrix::Constant(a.rows(), a.cols(),
                                          t.adjoint(self)(0, 0) / n));
  });
}

inline Var col_sums(const Var &a) {
  return a.tape().record(sgpa::col_sums(a.value()), {a},
                         [a](Tape &t, std::size_t self) {
                           t.accumulate(a.id(),
                                        t.adjoint(self).replicate(a.rows(), 1));
                         });
}

inline Var row_sums(const Var &a) {
  return a.tape().record(sgpa::row_sums(a.value()), {a},
                         [a](Tape &t, std::size_t self) {
                           t.accumulate(a.id(),
                                        t.adjoint(self).replicate(1, a.cols()));
                         });
}

inline Var mean_rows(const Var &a) {
  const double n = static_cast<double>(a.rows());
  return a.tape().record(sgpa::mean_rows(a.value()), {a},
                         [a, n](Tape &t, std::size_t self) {
                           t.accumulate(a.id(),
                                        t.adjoint(self).replicate(a.rows(), 1) / n);
                         });
}

inline Var slice(const Var &a, Eigen::Index r0, Eigen::Index c0,
                 Eigen::Index nr, Eigen::Index nc) {
  return a.tape().record(
      sgpa::slice(a.value(), r0, c0, nr, nc), {a},
      [a, r0, c0, nr, nc](Tape &t, std::size_t self) {
        Matrix g = Matrix::Zero(a.rows(), a.cols());
        g.block(r0, c0, nr, nc) = t.adjoint(self);
        t.accumulate(a.id(), g);
      });
}

inline Var concat_cols(const std::vector<Var> &parts) {
  if (parts.empty()) {
    throw ContractError("concat_cols of no operands");
  }
  std::vector<Matrix> values;
  values.reserve(parts.size());
  for (const Var &p : parts) {
    values.push_back(p.value());
  }
  return parts.front().tape().record(
      sgpa::concat_cols(values), parts, [parts](Tape &t, std::size_t self) {
        const Matrix &g = t.adjoint(self);
        Eigen::Index c = 0;
        for (const Var &p : parts) {
          if (t.wants(p)) {
            t.accumulate(p.id(), g.middleCols(c, p.cols()));
          }
          c += p.cols();
        }
      });
}

inline Var concat_rows(const std::vector<Var> &parts) {
  if (parts.empty()) {
    throw ContractError("concat_rows of no operands");
  }
  std::vector<Matrix> values;
  values.reserve(parts.size());
  for (const Var &p : parts) {
    values.push_back(p.value());
  }
  return parts.front().tape().record(
      sgpa::concat_rows(values), parts, [parts](Tape &t, std::size_t self) {
        const Matrix &g = t.adjoint(self);
        Eigen::Index r = 0;
        for (const Var &p : parts) {
          if (t.wants(p)) {
            t.accumulate(p.id(), g.middleRows(r, p.rows()));
          }
          r += p.rows();
        }
      });
}

inline Var add_row_broadcast(const Var &a, const Var &row) {
  detail::same_tape(a, row);
  return a.tape().record(sgpa::add_row_broadcast(a.value(), row.value()),
                         {a, row}, [a, row](Tape &t, std::size_t self) {
                           const Matrix &g = t.adjoint(self);
                           t.accumulate(a.id(), g);
                           if (t.wants(row)) {
                             t.accumulate(row.id(), g.colwise().sum());
                           }
                         });
}

inline Var repeat_cols(const Var &col, Eigen::Index n) {
  return col.tape().record(sgpa::repeat_cols(col.value(), n), {col},
                           [col](Tape &t, std::size_t self) {
                             t.accumulate(col.id(),
                                          t.adjoint(self).rowwise().sum());
                           });
}

inline Var diag_of(const Var &a) {
  return a.tape().record(sgpa::diag_of(a.value()), {a},
                         [a](Tape &t, std::size_t self) {
                           t.accumulate(a.id(), sgpa::diag_embed(t.adjoint(self)));
                         });
}

inline Var diag_embed(const Var &v) {
  return v.tape().record(sgpa::diag_embed(v.value()), {v},
                         [v](Tape &t, std::size_t self) {
                           t.accumulate(v.id(), t.adjoint(self).diagonal());
                         });
}

inline Var tril(const Var &a, bool strict) {
  return a.tape().record(sgpa::tril(a.value(), strict), {a},
                         [a, strict](Tape &t, std::size_t self) {
                           t.accumulate(a.id(), sgpa::tril(t.adjoint(self), strict));
                         });
}

inline Var layer_norm(const Var &x, const Var &gamma, const Var &beta,
                      double eps) {
  detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  return x.tape().record(
      sgpa::layer_norm(x.value(), gamma.value(), beta.value(), eps),
      {x, gamma, beta}, [x, gamma, beta, eps](Tape &t, std::size_t self) {
        const Matrix &g = t.adjoint(self);
        const Matrix &xv = x.value();
        const auto gam = gamma.value().row(0).array();
        const Eigen::Index n = xv.cols();
        Matrix xhat(xv.rows(), n);
        Vector inv(xv.rows());
        for (Eigen::Index i = 0; i < xv.rows(); ++i) {
          const double mu = xv.row(i).mean();
          const double var = (xv.row(i).array() - mu).square().mean();
          inv(i) = 1.0 / std::sqrt(var + eps);
          xhat.row(i) = ((xv.row(i).array() - mu) * inv(i)).matrix();
        }
        if (t.wants(beta)) {
          t.accumulate(beta.id(), g.colwise().sum());
        }
        if (t.wants(gamma)) {
          t.accumulate(gamma.id(), g.cwiseProduct(xhat).colwise().sum());
        }
        if (t.wants(x)) {
          Matrix dx(xv.rows(), n);
          for (Eigen::Index i = 0; i < xv.rows(); ++i) {
            const Eigen::ArrayXd dxhat = (g.row(i).array() * gam).transpose();
            const Eigen::ArrayXd xh = xhat.row(i).array().transpose();
            const double m1 = dxhat.mean();
            const double m2 = (dxhat * xh).mean();
            dx.row(i) = (inv(i) * (dxhat - m1 - xh * m2)).matrix().transpose();
          }
          t.accumulate(x.id(), dx);
        }
      });
}

// ---- factorizations -------------------------------------------------------

/// Differentiable Cholesky factor of sym(a) + jitter*I. The jitter level is
/// chosen on the forward pass and treated as a constant by the adjoint.
inline BasicCholesky<Var> cholesky(const Var &a,
                                   double base_jitter = kDefaultJitter) {
  CholeskyFactor f = sgpa::cholesky(a.value(), base_jitter);
  const double jitter = f.jitter_used;
  Var lower = a.tape().record(
      std::move(f.lower), {a}, [a](Tape &t, std::size_t self) {
        const Matrix &l = t.value(self);
        const Matrix lbar = sgpa::tril(t.adjoint(self), false);
        Matrix p = detail::phi(l.transpose() * lbar);
        // S = L^-T P L^-1
        Matrix s = sgpa::solve_lower_transpose(l, p);
        s = sgpa::solve_lower_transpose(l, s.transpose()).transpose();
        t.accumulate(a.id(), 0.5 * (s + s.transpose()));
      });
  return {lower, jitter};
}

/// X = L^-1 B.
inline Var solve_lower(const Var &l, const Var &b) {
  detail::same_tape(l, b);
  return l.tape().record(
      sgpa::solve_lower(l.value(), b.value()), {l, b},
      [l, b](Tape &t, std::size_t self) {
        const Matrix bbar = sgpa::solve_lower_transpose(l.value(), t.adjoint(self));
        if (t.wants(l)) {
          t.accumulate(l.id(), -sgpa::tril(bbar * t.value(self).transpose(), false));
        }
        if (t.wants(b)) {
          t.accumulate(b.id(), bbar);
        }
      });
}

/// X = L^-T B.
inline Var solve_lower_transpose(const Var &l, const Var &b) {
  detail::same_tape(l, b);
  return l.tape().record(
      sgpa::solve_lower_transpose(l.value(), b.value()), {l, b},
      [l, b](Tape &t, std::size_t self) {
        const Matrix bbar = sgpa::solve_lower(l.value(), t.adjoint(self));
        if (t.wants(l)) {
          t.accumulate(l.id(), -sgpa::tril(t.value(self) * bbar.transpose(), false));
        }
        if (t.wants(b)) {
          t.accumulate(b.id(), bbar);
        }
      });
}

inline Var solve_cholesky(const BasicCholesky<Var> &f, const Var &b) {
  return solve_lower_transpose(f.lower, solve_lower(f.lower, b));
}

inline Var log_det(const BasicCholesky<Var> &f) {
  return scale(sum(log(diag_of(f.lower))), 2.0);
}

// ---- operators ------------------------------------------------------------
// `*` between two Vars is the matrix product, matching Eigen's Matrix.

inline Var operator+(const Var &a, const Var &b) { return add(a, b); }
inline Var operator-(const Var &a, const Var &b) { return sub(a, b); }
inline Var operator*(const Var &a, const Var &b) { return matmul(a, b); }
inline Var operator-(const Var &a) { return negate(a); }
inline Var operator*(double s, const Var &a) { return scale(a, s); }
inline Var operator*(const Var &a, double s) { return scale(a, s); }
inline Var operator+(const Var &a, double s) { return add_scalar(a, s); }
inline Var operator+(double s, const Var &a) { return add_scalar(a, s); }
inline Var operator-(const Var &a, double s) { return add_scalar(a, -s); }
inline Var operator-(double s, const Var &a) { return add_scalar(negate(a), s); }

} // namespace sgpa::ad

namespace sgpa {

using ad::Tape;
using ad::Var;

/// Wraps a plain matrix as a value of the same representation as `like`.
inline Matrix lift(const Matrix &, Matrix value) { return value; }
inline Var lift(const Var &like, Matrix value) {
  return like.tape().constant(std::move(value));
}

inline const Matrix &value_of(const Matrix &m) { return m; }
inline const Matrix &value_of(const Var &v) { return v.value(); }
inline double scalar_value(double x) { return x; }
inline double scalar_value(const Var &v) { return v.scalar(); }

/// double for Matrix, 1x1 Var for Var.
template <typename M> using scalar_t = decltype(sum(std::declval<M>()));

} // namespace sgpa
