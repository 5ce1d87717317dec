#pragma once

// Command implementations behind tools/sgpa. Each returns a process exit
// code and writes human-readable progress to `log`.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sgpa/config.hpp"

namespace sgpa {

namespace exit_code {
constexpr int kOk = 0;
constexpr int kConfig = 2;
constexpr int kNumerical = 3;
constexpr int kThreshold = 4;
} // namespace exit_code

namespace detail {

inline void write_text(const std::filesystem::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw ConfigError("cannot write " + path.string());
  }
  out << text;
}

inline void write_json(const std::filesystem::path &path, const nlohmann::json &j) {
  write_text(path, j.dump(2) + "\n");
}

inline std::filesystem::path prepare_dir(const std::string &dir) {
  const auto p = resolve_output_dir(dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) {
    throw ConfigError("cannot create output directory " + p.string() + ": " + ec.message());
  }
  return p;
}

/// Maps library exceptions to exit codes; anything else propagates.
template <typename F> int guarded(std::ostream &log, F &&body) {
  try {
    return body();
  } catch (const ConfigError &e) {
    log << "config error: " << e.what() << '\n';
    return exit_code::kConfig;
  } catch (const ShapeError &e) {
    log << "shape error: " << e.what() << '\n';
    return exit_code::kConfig;
  } catch (const ContractError &e) {
    log << "contract error: " << e.what() << '\n';
    return exit_code::kConfig;
  } catch (const NumericalError &e) {
    log << "numerical failure: " << e.what() << '\n';
    return exit_code::kNumerical;
  } catch (const DeterminismError &e) {
    log << "numerical failure: " << e.what() << '\n';
    return exit_code::kNumerical;
  }
}

/// Checks that a checkpoint can consume the records of `ds`.
inline void check_compatible(const Model &m, const SequenceDataset &ds) {
  const ModelConfig &c = m.config;
  if (ds.empty()) {
    return;
  }
  if (c.vocab_size == 0 && ds.feature_dim() != c.d_in) {
    throw ContractError("checkpoint expects " + std::to_string(c.d_in) +
                        " features per token, data has " + std::to_string(ds.feature_dim()));
  }
  if (c.vocab_size > 0 && ds.feature_dim() != 1) {
    throw ContractError("checkpoint expects token ids (one column per token)");
  }
  if (ds.max_length() > c.max_len) {
    throw ContractError("data has sequences of length " + std::to_string(ds.max_length()) +
                        ", checkpoint max_len is " + std::to_string(c.max_len));
  }
  if (c.likelihood == Likelihood::Categorical && ds.n_classes != c.n_outputs) {
    throw ContractError("checkpoint predicts " + std::to_string(c.n_outputs) +
                        " classes, data has " + std::to_string(ds.n_classes));
  }
}

inline SequenceDataset load_spec_data(const DataSpec &spec) {
  SequenceDataset ds = load_data(spec.data, spec.seed);
  return spec.split ? ds.subset(*spec.split) : ds;
}

} // namespace detail

// ---- train -------------------------------------------------------------------

/// Writes checkpoint.json, trace.csv, config.resolved.json and data.json into
/// the configured output directory. On divergence writes diagnostic.json and
/// returns exit_code::kNumerical.
inline int cmd_train(const std::string &config_path, std::ostream &log) {
  return detail::guarded(log, [&] {
    RunConfig rc = load_run_config(config_path);
    const SequenceDataset ds = load_data(rc.data, rc.seed);
    check_dataset(ds);
    resolve_against_data(rc, ds);
    const auto dir = detail::prepare_dir(rc.output_dir);
    detail::write_json(dir / "config.resolved.json", resolved_snapshot(rc));
    detail::write_json(dir / "data.json", dataset_manifest(ds));

    Model model = init_model(rc.model, derive_seed(rc.seed, streams::kInit));
    const SequenceDataset train_set = ds.subset(Split::Train);
    const SequenceDataset valid_set = ds.subset(Split::Valid);
    log << "training " << to_string(rc.model.attention) << " on " << train_set.size()
        << " sequences (" << model.params.scalar_count() << " parameters)\n";
    TrainTrace trace;
    try {
      trace = train(model, train_set, valid_set, rc.train, [&](const EpochRecord &r) {
        trace.epochs.push_back(r);
        log << "epoch " << r.epoch << "  elbo " << r.elbo << "  kl " << r.kl_total
            << "  valid_acc " << r.valid_acc << "  valid_nll " << r.valid_nll << '\n';
      });
    } catch (const NumericalError &e) {
      std::ostringstream partial;
      write_trace_csv(partial, trace);
      detail::write_json(dir / "diagnostic.json",
                         {{"error", e.what()},
                          {"completed_epochs", trace.epochs.size()},
                          {"trace_csv", partial.str()}});
      save_checkpoint(model, (dir / "checkpoint.diverged.json").string());
      throw;
    }
    std::ostringstream csv;
    write_trace_csv(csv, trace);
    detail::write_text(dir / "trace.csv", csv.str());
    save_checkpoint(model, (dir / "checkpoint.json").string());
    if (trace.clamped_variances > 0) {
      log << "note: " << trace.clamped_variances
          << " negative posterior variances were clamped to zero\n";
    }
    log << "wrote " << dir.string() << '\n';
    return exit_code::kOk;
  });
}

// ---- eval --------------------------------------------------------------------

inline nlohmann::json calibration_json(const CalibrationReport &rep) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto &b : rep.bins) {
    bins.push_back({{"low", b.low},
                    {"high", b.high},
                    {"count", b.count},
                    {"confidence", b.confidence},
                    {"accuracy", b.accuracy}});
  }
  return bins;
}

/// Writes metrics.json, reliability.csv and predictions.csv.
inline int cmd_eval(const std::string &ckpt_path, const std::string &spec_path,
                    const std::string &out_dir, int n_samples, std::ostream &log) {
  return detail::guarded(log, [&] {
    const Model model = load_checkpoint(ckpt_path);
    const DataSpec spec = load_data_spec(spec_path);
    const SequenceDataset ds = detail::load_spec_data(spec);
    check_dataset(ds);
    if (ds.empty()) {
      throw ContractError("eval: dataset is empty");
    }
    detail::check_compatible(model, ds);
    const auto dir = detail::prepare_dir(out_dir);
    const Prediction p =
        predict(model, ds.sequences, n_samples, derive_seed(spec.seed, streams::kPredict));

    nlohmann::json report;
    report["n_records"] = ds.size();
    report["mc_samples"] = p.n_samples;
    report["attention"] = to_string(model.config.attention);
    report["data_checksum"] = checksum_hex(dataset_checksum(ds));
    std::ostringstream pred_csv;
    pred_csv.precision(17);
    if (model.config.likelihood == Likelihood::Categorical) {
      const auto rec = make_records(p.probs, ds.labels);
      const CalibrationReport cal = ece_mce(rec);
      report["accuracy"] = accuracy(rec);
      report["nll"] = nll(rec);
      report["ece"] = cal.ece;
      report["mce"] = cal.mce;
      report["bins"] = calibration_json(cal);
      if (model.config.n_outputs == 2) {
        report["mcc"] = mcc(rec);
      }
      std::ostringstream rel;
      write_reliability_csv(rel, cal);
      detail::write_text(dir / "reliability.csv", rel.str());
      pred_csv << "index,label";
      for (Eigen::Index c = 0; c < p.probs.cols(); ++c) {
        pred_csv << ",p" << c;
      }
      pred_csv << '\n';
      for (Eigen::Index i = 0; i < p.probs.rows(); ++i) {
        pred_csv << i << ',' << ds.labels[static_cast<std::size_t>(i)];
        for (Eigen::Index c = 0; c < p.probs.cols(); ++c) {
          pred_csv << ',' << p.probs(i, c);
        }
        pred_csv << '\n';
      }
      log << "accuracy " << report["accuracy"] << "  nll " << report["nll"] << "  ece "
          << cal.ece << "  mce " << cal.mce << '\n';
    } else {
      double se = 0.0, nl = 0.0;
      pred_csv << "index,target,mean,var\n";
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto k = static_cast<Eigen::Index>(i);
        const double r = ds.labels[i] - p.mean(k);
        se += r * r;
        nl += 0.5 * std::log(2.0 * M_PI * p.var(k)) + 0.5 * r * r / p.var(k);
        pred_csv << i << ',' << ds.labels[i] << ',' << p.mean(k) << ',' << p.var(k) << '\n';
      }
      const double n = static_cast<double>(ds.size());
      report["rmse"] = std::sqrt(se / n);
      report["nll"] = nl / n;
      log << "rmse " << report["rmse"] << "  nll " << report["nll"] << '\n';
    }
    detail::write_text(dir / "predictions.csv", pred_csv.str());
    detail::write_json(dir / "metrics.json", report);
    return exit_code::kOk;
  });
}

// ---- ood ---------------------------------------------------------------------

constexpr int kEntropyHistogramBins = 20;

/// Entropy OOD detection. Writes ood.json, scores.csv and a histogram CSV of
/// entropies on [0, log C].
inline int cmd_ood(const std::string &ckpt_path, const std::string &in_spec_path,
                   const std::string &out_spec_path, const std::string &out_dir,
                   int n_samples, std::ostream &log) {
  return detail::guarded(log, [&] {
    const Model model = load_checkpoint(ckpt_path);
    if (model.config.likelihood != Likelihood::Categorical) {
      throw ConfigError("ood: entropy scores need a categorical model");
    }
    const DataSpec in_spec = load_data_spec(in_spec_path);
    const DataSpec out_spec = load_data_spec(out_spec_path);
    const SequenceDataset in_ds = detail::load_spec_data(in_spec);
    const SequenceDataset out_ds = detail::load_spec_data(out_spec);
    if (in_ds.empty() || out_ds.empty()) {
      throw ContractError("ood: in and out datasets must be nonempty");
    }
    detail::check_compatible(model, in_ds);
    detail::check_compatible(model, out_ds);
    const auto dir = detail::prepare_dir(out_dir);
    // Separate predict streams keep the two sets' noise independent even when
    // both specs share a seed.
    auto scores = [&](const SequenceDataset &ds, std::uint64_t seed, std::uint64_t which) {
      const Prediction p = predict(model, ds.sequences, n_samples,
                                   derive_seed(seed, streams::kPredict, which));
      return entropy_scores(make_records(p.probs, ds.labels));
    };
    const std::vector<double> s_in = scores(in_ds, in_spec.seed, 0);
    const std::vector<double> s_out = scores(out_ds, out_spec.seed, 1);
    const OodScores r = auroc_aupr(s_in, s_out);
    detail::write_json(dir / "ood.json", {{"auroc", r.auroc},
                                          {"aupr", r.aupr},
                                          {"positive_fraction", r.positive_fraction},
                                          {"n_in", s_in.size()},
                                          {"n_out", s_out.size()},
                                          {"mc_samples", n_samples},
                                          {"score", "predictive-entropy"}});
    std::ostringstream csv;
    csv.precision(17);
    csv << "set,index,entropy\n";
    for (std::size_t i = 0; i < s_in.size(); ++i) csv << "in," << i << ',' << s_in[i] << '\n';
    for (std::size_t i = 0; i < s_out.size(); ++i) csv << "out," << i << ',' << s_out[i] << '\n';
    detail::write_text(dir / "scores.csv", csv.str());

    const double top = std::log(static_cast<double>(model.config.n_outputs));
    std::vector<std::size_t> h_in(kEntropyHistogramBins), h_out(kEntropyHistogramBins);
    auto bin = [&](double s) {
      const auto b = static_cast<int>(s / top * kEntropyHistogramBins);
      return static_cast<std::size_t>(std::clamp(b, 0, kEntropyHistogramBins - 1));
    };
    for (double s : s_in) ++h_in[bin(s)];
    for (double s : s_out) ++h_out[bin(s)];
    std::ostringstream hist;
    hist.precision(17);
    hist << "bin_low,bin_high,count_in,count_out\n";
    for (int b = 0; b < kEntropyHistogramBins; ++b) {
      hist << top * b / kEntropyHistogramBins << ',' << top * (b + 1) / kEntropyHistogramBins << ','
           << h_in[static_cast<std::size_t>(b)] << ',' << h_out[static_cast<std::size_t>(b)] << '\n';
    }
    detail::write_text(dir / "entropy_histogram.csv", hist.str());
    log << "auroc " << r.auroc << "  aupr " << r.aupr << "  (random aupr "
        << r.positive_fraction << ")\n";
    return exit_code::kOk;
  });
}

// ---- gradcheck ---------------------------------------------------------------

constexpr Eigen::Index kGradcheckMaxLength = 6;
constexpr Eigen::Index kGradcheckMaxLayers = 2;
constexpr Eigen::Index kGradcheckMaxHeads = 2;
constexpr std::size_t kGradcheckBatch = 4;
constexpr double kGradcheckStep = 1e-5;
constexpr double kGradcheckFailure = 1e-3;

struct GradcheckReport {
  GradCheckResult result;
  double loss = 0.0;
};

/// Full-ELBO finite-difference audit on the first training sequences of the
/// configured data. Noise comes from the elbo-noise stream of step 0.
inline GradcheckReport run_gradcheck(const RunConfig &rc, const SequenceDataset &ds,
                                     bool zero_noise) {
  const ModelConfig &c = rc.model;
  if (c.layers > kGradcheckMaxLayers || c.heads > kGradcheckMaxHeads ||
      c.max_len > kGradcheckMaxLength) {
    throw ConfigError("gradcheck: dims too large (need max_len <= 6, layers <= 2, heads <= 2)");
  }
  const SequenceDataset train_set = ds.subset(Split::Train);
  if (train_set.empty()) {
    throw ContractError("gradcheck: no training sequences");
  }
  const std::size_t b = std::min(kGradcheckBatch, train_set.size());
  const std::vector<Matrix> xs(train_set.sequences.begin(),
                               train_set.sequences.begin() + static_cast<std::ptrdiff_t>(b));
  const std::vector<double> ys(train_set.labels.begin(),
                               train_set.labels.begin() + static_cast<std::ptrdiff_t>(b));
  const Model model = init_model(c, derive_seed(rc.seed, streams::kInit));
  const double n = static_cast<double>(train_set.size());
  LossBuilder build = [&](Tape &t, const std::vector<Var> &v) {
    return elbo_terms<Var>(model, v, xs, ys, rc.train.mc_train,
                           NoiseSource{&t.rng(), zero_noise}, n)
        .objective;
  };
  const std::uint64_t seed = derive_seed(rc.seed, streams::kElboNoise, 0);
  GradcheckReport rep;
  rep.loss = evaluate_loss(build, model.params, seed);
  rep.result = finite_difference_check(build, model.params, kGradcheckStep, seed);
  return rep;
}

inline int cmd_gradcheck(const std::string &config_path, bool zero_noise, std::ostream &log) {
  return detail::guarded(log, [&] {
    RunConfig rc = load_run_config(config_path);
    const SequenceDataset ds = load_data(rc.data, rc.seed);
    check_dataset(ds);
    resolve_against_data(rc, ds);
    const GradcheckReport rep = run_gradcheck(rc, ds, zero_noise);
    log << "elbo " << std::setprecision(17) << rep.loss << std::setprecision(6) << '\n';
    log << std::left << std::setw(32) << "parameter" << std::setw(14) << "max_rel_err"
        << "max_abs_grad\n";
    std::size_t worst = 0;
    for (std::size_t i = 0; i < rep.result.names.size(); ++i) {
      log << std::left << std::setw(32) << rep.result.names[i] << std::setw(14)
          << rep.result.max_rel_error[i] << rep.result.max_abs_grad[i] << '\n';
      if (rep.result.max_rel_error[i] > rep.result.max_rel_error[worst]) {
        worst = i;
      }
    }
    log << "worst: " << rep.result.names[worst] << " " << rep.result.overall << '\n';
    if (rep.result.overall > kGradcheckFailure) {
      log << "FAIL: exceeds " << kGradcheckFailure << '\n';
      return exit_code::kThreshold;
    }
    return exit_code::kOk;
  });
}

// ---- bench -------------------------------------------------------------------

struct BenchPoint {
  Eigen::Index length = 0;
  double median_seconds = 0.0;
};

struct BenchResult {
  std::vector<BenchPoint> points;
  double slope = 0.0;
};

/// Least-squares slope of log(time) against log(T).
inline double log_log_slope(const std::vector<BenchPoint> &pts) {
  if (pts.size() < 2) {
    throw ContractError("bench: need at least two lengths for a slope");
  }
  double mx = 0, my = 0;
  for (const auto &p : pts) {
    mx += std::log(static_cast<double>(p.length));
    my += std::log(p.median_seconds);
  }
  mx /= static_cast<double>(pts.size());
  my /= static_cast<double>(pts.size());
  double sxy = 0, sxx = 0;
  for (const auto &p : pts) {
    const double dx = std::log(static_cast<double>(p.length)) - mx;
    sxy += dx * (std::log(p.median_seconds) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// Benchmark model: one layer, one head, small widths, so the attention
/// block dominates the forward pass at the lengths of interest. Covariance
/// factors are per output dimension, the T x T x d_v layout of standard SGPA.
inline ModelConfig bench_model(AttentionMode mode, Eigen::Index max_len, Eigen::Index m_global) {
  ModelConfig c;
  c.attention = mode;
  c.max_len = max_len;
  c.layers = 1;
  c.heads = 1;
  c.d_in = 4;
  c.d_k = 4;
  c.d_v = 4;
  c.mlp_hidden = 8;
  c.m_global = m_global;
  c.share_cov_across_dims = false;
  return c;
}

constexpr int kBenchBatch = 8;

/// Median wall time of a forward pass over one batch of kBenchBatch
/// sequences per length. Layer caches are built once, as in training, where
/// they are shared across the batch.
inline BenchResult run_bench(AttentionMode mode, const std::vector<Eigen::Index> &lens,
                             int reps, Eigen::Index m_global = 8, std::uint64_t seed = 0) {
  if (reps < 1) {
    throw ConfigError("bench: reps must be >= 1");
  }
  if (mode != AttentionMode::Kernel && mode != AttentionMode::SgpaStandard &&
      mode != AttentionMode::SgpaDecoupled) {
    throw ConfigError("bench: mode must be kernel, sgpa-standard or sgpa-decoupled");
  }
  if (lens.empty() || *std::min_element(lens.begin(), lens.end()) < 1) {
    throw ConfigError("bench: lengths must be positive");
  }
  const Eigen::Index t_max = *std::max_element(lens.begin(), lens.end());
  const Model m = init_model(bench_model(mode, t_max, m_global), derive_seed(seed, streams::kInit));
  const auto p = plain_values(m);
  const auto caches = prepare_layers(m, p);
  std::mt19937_64 rng(derive_seed(seed, streams::kData));
  std::vector<std::vector<Matrix>> inputs;
  for (Eigen::Index t : lens) {
    std::vector<Matrix> batch;
    for (int b = 0; b < kBenchBatch; ++b) {
      batch.push_back(standard_normal(rng, t, m.config.d_in));
    }
    inputs.push_back(std::move(batch));
  }
  std::mt19937_64 noise_rng(derive_seed(seed, streams::kElboNoise));
  NoiseSource noise{&noise_rng, false};
  auto time_one = [&](const std::vector<Matrix> &batch) {
    bool finite = true;
    const auto t0 = std::chrono::steady_clock::now();
    for (const Matrix &x : batch) {
      finite = forward_sequence(m, p, caches, x, noise).output.allFinite() && finite;
    }
    const auto t1 = std::chrono::steady_clock::now();
    if (!finite) {
      throw NumericalError("bench: non-finite forward output at T=" +
                           std::to_string(batch.front().rows()));
    }
    return std::chrono::duration<double>(t1 - t0).count();
  };
  for (const auto &batch : inputs) {
    (void)time_one(batch); // warm-up
  }
  // Lengths are interleaved within each repetition so that slow phases of a
  // shared machine hit every length alike.
  std::vector<std::vector<double>> times(lens.size());
  for (int r = 0; r < reps; ++r) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      times[i].push_back(time_one(inputs[i]));
    }
  }
  BenchResult out;
  for (std::size_t i = 0; i < lens.size(); ++i) {
    auto &ts = times[i];
    std::nth_element(ts.begin(), ts.begin() + static_cast<std::ptrdiff_t>(ts.size() / 2), ts.end());
    out.points.push_back({lens[i], ts[ts.size() / 2]});
  }
  out.slope = lens.size() >= 2 ? log_log_slope(out.points) : 0.0;
  return out;
}

inline int cmd_bench(const std::string &mode, const std::vector<Eigen::Index> &lens, int reps,
                     Eigen::Index m_global, const std::string &out_path, std::ostream &log) {
  return detail::guarded(log, [&] {
    const BenchResult r = run_bench(attention_mode_from_string(mode), lens, reps, m_global);
    std::ostringstream csv;
    csv.precision(9);
    csv << "mode,T,batch,median_seconds,reps\n";
    for (const auto &p : r.points) {
      csv << mode << ',' << p.length << ',' << kBenchBatch << ',' << p.median_seconds << ','
          << reps << '\n';
    }
    if (out_path.empty()) {
      log << csv.str();
    } else {
      const auto path = resolve_output_dir(out_path);
      if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
      }
      detail::write_text(path, csv.str());
    }
    log << "log-log slope " << r.slope << '\n';
    return exit_code::kOk;
  });
}

} // namespace sgpa
