#pragma once

// Minibatch ELBO training with Adam.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include "sgpa/data.hpp"
#include "sgpa/gradcheck.hpp"
#include "sgpa/metrics.hpp"
#include "sgpa/optim.hpp"
#include "sgpa/transformer.hpp"

namespace sgpa {

struct TrainConfig {
  double lr = 1e-3;
  /// Learning rate reached by linear decay at the last step; negative keeps
  /// lr constant.
  double lr_final = -1.0;
  int epochs = 50;
  int batch_size = 32;
  int mc_train = 1;
  int mc_predict = 10;
  double grad_clip = 10.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto need = [](bool ok, const std::string &field, const std::string &why) {
      if (!ok) {
        throw ConfigError("train." + field + ": " + why);
      }
    };
    need(lr >= 0.0 && std::isfinite(lr), "lr", "must be finite and >= 0");
    need(lr_final < 0.0 || std::isfinite(lr_final), "lr_final", "must be finite");
    need(epochs >= 0, "epochs", "must be >= 0");
    need(batch_size >= 1, "batch_size", "must be >= 1");
    need(mc_train >= 1, "mc_train", "must be >= 1");
    need(mc_predict >= 1, "mc_predict", "must be >= 1");
    need(grad_clip >= 0.0, "grad_clip", "must be >= 0 (0 disables)");
  }
};

struct EpochRecord {
  int epoch = 0;
  /// Means over the epoch's minibatches of the full-data ELBO estimate.
  double elbo = 0.0;
  double ell = 0.0;
  double kl_total = 0.0;
  /// NaN without a validation split; accuracy is NaN for regression.
  double valid_acc = std::numeric_limits<double>::quiet_NaN();
  double valid_nll = std::numeric_limits<double>::quiet_NaN();
};

struct TrainTrace {
  std::vector<EpochRecord> epochs;
  std::size_t clamped_variances = 0;
};

/// Validation accuracy and NLL of averaged MC predictions.
struct HeldOutScores {
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double nll = std::numeric_limits<double>::quiet_NaN();
};

inline HeldOutScores held_out_scores(const Model &m, const SequenceDataset &ds,
                                     int n_samples, std::uint64_t seed) {
  HeldOutScores s;
  if (ds.empty()) {
    return s;
  }
  const Prediction p = predict(m, ds.sequences, n_samples, seed);
  if (m.config.likelihood == Likelihood::Categorical) {
    const auto rec = make_records(p.probs, ds.labels);
    s.accuracy = accuracy(rec);
    s.nll = nll(rec);
  } else {
    double total = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      const double r = ds.labels[i] - p.mean(k);
      total += 0.5 * std::log(2.0 * M_PI * p.var(k)) + 0.5 * r * r / p.var(k);
    }
    s.nll = total / static_cast<double>(ds.size());
  }
  return s;
}

/// Gathers a minibatch.
inline void gather(const SequenceDataset &ds, const std::vector<std::size_t> &idx,
                   std::size_t begin, std::size_t end, std::vector<Matrix> &xs,
                   std::vector<double> &ys) {
  xs.clear();
  ys.clear();
  for (std::size_t k = begin; k < end; ++k) {
    xs.push_back(ds.sequences[idx[k]]);
    ys.push_back(ds.labels[idx[k]]);
  }
}

/// Trains in place on `train_set`, evaluating on `valid_set` after every
/// epoch. Deterministic given cfg.seed. Throws NumericalError on a
/// non-finite objective or gradient.
inline TrainTrace train(Model &model, const SequenceDataset &train_set,
                        const SequenceDataset &valid_set, const TrainConfig &cfg,
                        const std::function<void(const EpochRecord &)> &on_epoch = {}) {
  cfg.validate();
  check_dataset(train_set);
  TrainTrace trace;
  if (cfg.epochs == 0) {
    return trace;
  }
  if (train_set.empty()) {
    throw ContractError("train: empty training set");
  }
  const std::size_t n = train_set.size();
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const double total_steps = static_cast<double>(steps_per_epoch) * cfg.epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, streams::kShuffle));
  AdamState adam;
  std::uint64_t step = 0;
  std::vector<Matrix> xs;
  std::vector<double> ys;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t begin = 0; begin < n; begin += bs) {
      gather(train_set, order, begin, std::min(n, begin + bs), xs, ys);
      Tape tape(derive_seed(cfg.seed, streams::kElboNoise, step));
      const std::vector<Var> leaves = leaves_for(tape, model.params);
      ElboTerms<Var> terms = elbo_terms<Var>(model, leaves, xs, ys, cfg.mc_train,
                                             NoiseSource{&tape.rng(), false},
                                             static_cast<double>(n));
      if (!std::isfinite(terms.breakdown.total)) {
        std::ostringstream os;
        os << "training diverged at epoch " << epoch << ", step " << step
           << ": elbo=" << terms.breakdown.total
           << " ell=" << terms.breakdown.expected_log_lik
           << " kl=" << terms.breakdown.kl_total();
        throw NumericalError(os.str());
      }
      tape.backward((-1.0 / static_cast<double>(n)) * terms.objective);
      GradientMap grads;
      grads.reserve(leaves.size());
      for (const Var &v : leaves) {
        grads.push_back(tape.grad(v));
      }
      const double norm = clip_global_norm(grads, cfg.grad_clip);
      if (!std::isfinite(norm)) {
        std::ostringstream os;
        os << "non-finite gradient at epoch " << epoch << ", step " << step;
        throw NumericalError(os.str());
      }
      double lr = cfg.lr;
      if (cfg.lr_final >= 0.0) {
        lr = cfg.lr + (cfg.lr_final - cfg.lr) * static_cast<double>(step) / total_steps;
      }
      adam_step(model.params, grads, adam, lr);
      rec.elbo += terms.breakdown.total;
      rec.ell += terms.breakdown.expected_log_lik;
      rec.kl_total += terms.breakdown.kl_total();
      trace.clamped_variances += terms.clamped;
      ++step;
    }
    const double batches = static_cast<double>(steps_per_epoch);
    rec.elbo /= batches;
    rec.ell /= batches;
    rec.kl_total /= batches;
    const HeldOutScores v =
        held_out_scores(model, valid_set, cfg.mc_predict,
                        derive_seed(cfg.seed, streams::kPredict, static_cast<std::uint64_t>(epoch)));
    rec.valid_acc = v.accuracy;
    rec.valid_nll = v.nll;
    trace.epochs.push_back(rec);
    if (on_epoch) {
      on_epoch(rec);
    }
  }
  return trace;
}

/// Trace CSV: epoch, elbo, ell, kl_total, valid_acc, valid_nll.
inline void write_trace_csv(std::ostream &os, const TrainTrace &trace) {
  os << "epoch,elbo,ell,kl_total,valid_acc,valid_nll\n";
  os.precision(17);
  for (const auto &r : trace.epochs) {
    os << r.epoch << ',' << r.elbo << ',' << r.ell << ',' << r.kl_total << ','
       << r.valid_acc << ',' << r.valid_nll << '\n';
  }
}

} // namespace sgpa
