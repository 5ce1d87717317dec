#pragma once

// Accuracy, calibration and out-of-distribution metrics over predicted class
// probabilities.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <vector>

#include "sgpa/linalg.hpp"

namespace sgpa {

struct PredictionRecord {
  Vector probs;
  Eigen::Index label = 0;

  Eigen::Index predicted() const {
    Eigen::Index k = 0;
    probs.maxCoeff(&k);
    return k;
  }
  double confidence() const { return probs.maxCoeff(); }
};

/// Row i of `probs` paired with labels[i].
inline std::vector<PredictionRecord> make_records(const Matrix &probs,
                                                  const std::vector<double> &labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) {
    throw ShapeError("make_records: one label per probability row required");
  }
  std::vector<PredictionRecord> out;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    out.push_back({probs.row(i).transpose(), static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)])});
  }
  return out;
}

constexpr double kProbabilityFloor = 1e-12;

inline void require_nonempty(const std::vector<PredictionRecord> &r, const char *what) {
  if (r.empty()) {
    throw ContractError(std::string(what) + ": no records");
  }
}

inline double accuracy(const std::vector<PredictionRecord> &records) {
  require_nonempty(records, "accuracy");
  std::size_t hits = 0;
  for (const auto &r : records) {
    hits += r.predicted() == r.label ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

/// Mean of -log p(label), probabilities floored at 1e-12.
inline double nll(const std::vector<PredictionRecord> &records) {
  require_nonempty(records, "nll");
  double total = 0.0;
  for (const auto &r : records) {
    if (r.label < 0 || r.label >= r.probs.size()) {
      throw ContractError("nll: label outside probability vector");
    }
    total -= std::log(std::max(r.probs(r.label), kProbabilityFloor));
  }
  return total / static_cast<double>(records.size());
}

struct ReliabilityBin {
  double low = 0.0;
  double high = 0.0;
  std::size_t count = 0;
  double confidence = 0.0;
  double accuracy = 0.0;
};

struct CalibrationReport {
  double ece = 0.0;
  double mce = 0.0;
  std::vector<ReliabilityBin> bins;
};

/// Equal-width bins (low, high] on the max probability; the first bin also
/// takes confidence 0. ECE weights |acc - conf| by bin mass, MCE is the
/// largest gap over nonempty bins.
inline CalibrationReport ece_mce(const std::vector<PredictionRecord> &records,
                                 int n_bins = 15) {
  if (n_bins < 1) {
    throw ContractError("ece_mce: n_bins must be >= 1");
  }
  require_nonempty(records, "ece_mce");
  CalibrationReport rep;
  rep.bins.resize(static_cast<std::size_t>(n_bins));
  std::vector<double> conf_sum(rep.bins.size(), 0.0);
  std::vector<double> hit_sum(rep.bins.size(), 0.0);
  for (const auto &r : records) {
    const double c = r.confidence();
    auto b = static_cast<int>(std::ceil(c * n_bins)) - 1;
    b = std::clamp(b, 0, n_bins - 1);
    const auto k = static_cast<std::size_t>(b);
    rep.bins[k].count += 1;
    conf_sum[k] += c;
    hit_sum[k] += r.predicted() == r.label ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(records.size());
  for (std::size_t k = 0; k < rep.bins.size(); ++k) {
    ReliabilityBin &b = rep.bins[k];
    b.low = static_cast<double>(k) / n_bins;
    b.high = static_cast<double>(k + 1) / n_bins;
    if (b.count == 0) {
      continue;
    }
    const double cnt = static_cast<double>(b.count);
    b.confidence = conf_sum[k] / cnt;
    b.accuracy = hit_sum[k] / cnt;
    const double gap = std::abs(b.accuracy - b.confidence);
    rep.ece += cnt / n * gap;
    rep.mce = std::max(rep.mce, gap);
  }
  return rep;
}

inline void write_reliability_csv(std::ostream &os, const CalibrationReport &rep) {
  os << "bin_low,bin_high,count,confidence,accuracy\n";
  os.precision(17);
  for (const auto &b : rep.bins) {
    os << b.low << ',' << b.high << ',' << b.count << ',' << b.confidence << ','
       << b.accuracy << '\n';
  }
}

/// Matthews correlation of argmax predictions on binary labels; 0 when any
/// marginal count is zero.
inline double mcc(const std::vector<PredictionRecord> &records) {
  double tp = 0, tn = 0, fp = 0, fn = 0;
  for (const auto &r : records) {
    if (r.probs.size() != 2 || r.label < 0 || r.label > 1) {
      throw ContractError("mcc: binary records required");
    }
    const bool pred = r.predicted() == 1;
    const bool truth = r.label == 1;
    tp += pred && truth;
    tn += !pred && !truth;
    fp += pred && !truth;
    fn += !pred && truth;
  }
  const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (denom == 0.0) {
    return 0.0;
  }
  return (tp * tn - fp * fn) / std::sqrt(denom);
}

/// -sum_c p_c log p_c with 0 log 0 = 0.
inline double entropy(const Vector &p) {
  double h = 0.0;
  for (Eigen::Index c = 0; c < p.size(); ++c) {
    if (p(c) > 0.0) {
      h -= p(c) * std::log(p(c));
    }
  }
  return h;
}

inline std::vector<double> entropy_scores(const std::vector<PredictionRecord> &records) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto &r : records) {
    out.push_back(entropy(r.probs));
  }
  return out;
}

struct OodScores {
  double auroc = 0.0;
  double aupr = 0.0;
  /// n_out / (n_in + n_out): the AUPR of a random scorer.
  double positive_fraction = 0.0;
};

/// OOD is the positive class; higher scores should indicate OOD.
/// AUROC = Mann-Whitney U / (n_in n_out) with average ranks for ties.
/// AUPR = sum over distinct thresholds of (recall step) x precision.
inline OodScores auroc_aupr(const std::vector<double> &in_scores,
                            const std::vector<double> &out_scores) {
  if (in_scores.empty() || out_scores.empty()) {
    throw ContractError("auroc_aupr: both score sets must be nonempty");
  }
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> items;
  for (double s : in_scores) {
    items.push_back({s, false});
  }
  for (double s : out_scores) {
    items.push_back({s, true});
  }
  std::stable_sort(items.begin(), items.end(),
                   [](const Item &a, const Item &b) { return a.score < b.score; });
  const double n_in = static_cast<double>(in_scores.size());
  const double n_out = static_cast<double>(out_scores.size());

  double rank_sum = 0.0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    while (j < items.size() && items[j].score == items[i].score) {
      ++j;
    }
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (items[k].positive) {
        rank_sum += avg_rank;
      }
    }
    i = j;
  }
  OodScores out;
  out.auroc = (rank_sum - n_out * (n_out + 1.0) / 2.0) / (n_in * n_out);

  // Walk thresholds from the highest score down; tied scores enter together.
  double tp = 0.0, fp = 0.0, prev_recall = 0.0;
  for (std::size_t i = items.size(); i > 0;) {
    std::size_t j = i;
    while (j > 0 && items[j - 1].score == items[i - 1].score) {
      --j;
      if (items[j].positive) {
        tp += 1.0;
      } else {
        fp += 1.0;
      }
    }
    const double recall = tp / n_out;
    out.aupr += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
    i = j;
  }
  out.positive_fraction = n_out / (n_in + n_out);
  return out;
}

} // namespace sgpa
