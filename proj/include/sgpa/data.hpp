#pragma once

// Desk-scale datasets: a synthetic sequence-classification task with graded
// distribution shifts, and a CSV loader for externally prepared sequences.
//
// Every sequence is a T x d_in matrix. Token-id data uses a T x 1 column of
// ids. Labels are stored as doubles: class indices for classification,
// targets for regression.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "sgpa/random.hpp"

namespace sgpa {

enum class Split { Train, Valid, Test };

inline std::string to_string(Split s) {
  switch (s) {
  case Split::Train:
    return "train";
  case Split::Valid:
    return "valid";
  case Split::Test:
    return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string &s) {
  if (s == "train") {
    return Split::Train;
  }
  if (s == "valid") {
    return Split::Valid;
  }
  if (s == "test") {
    return Split::Test;
  }
  throw ConfigError("unknown split '" + s + "'");
}

struct SequenceDataset {
  std::vector<Matrix> sequences;
  std::vector<double> labels;
  std::vector<Split> splits;
  /// 0 for regression targets.
  Eigen::Index n_classes = 0;
  /// Generator or loader configuration plus seed.
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const { return sequences.size(); }
  bool empty() const { return sequences.empty(); }

  Eigen::Index feature_dim() const { return empty() ? 0 : sequences.front().cols(); }

  SequenceDataset subset(Split s) const {
    SequenceDataset out;
    out.n_classes = n_classes;
    out.provenance = provenance;
    out.provenance["split"] = to_string(s);
    for (std::size_t i = 0; i < size(); ++i) {
      if (splits[i] == s) {
        out.sequences.push_back(sequences[i]);
        out.labels.push_back(labels[i]);
        out.splits.push_back(s);
      }
    }
    return out;
  }

  double mean_length() const {
    if (empty()) {
      return 0.0;
    }
    double total = 0.0;
    for (const Matrix &s : sequences) {
      total += static_cast<double>(s.rows());
    }
    return total / static_cast<double>(size());
  }

  Eigen::Index max_length() const {
    Eigen::Index t = 0;
    for (const Matrix &s : sequences) {
      t = std::max(t, s.rows());
    }
    return t;
  }
};

/// First 80% train, next 10% valid, remainder test, in index order.
inline std::vector<Split> default_splits(std::size_t n) {
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_valid = n / 10;
  std::vector<Split> s(n, Split::Test);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < n_train) {
      s[i] = Split::Train;
    } else if (i < n_train + n_valid) {
      s[i] = Split::Valid;
    }
  }
  return s;
}

inline void check_dataset(const SequenceDataset &ds) {
  if (ds.labels.size() != ds.size() || ds.splits.size() != ds.size()) {
    throw ContractError("dataset: sequences, labels and splits differ in length");
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.sequences[i].rows() == 0) {
      throw ContractError("dataset: sequence " + std::to_string(i) + " is empty");
    }
    if (ds.n_classes > 0) {
      const double y = ds.labels[i];
      if (y != std::floor(y) || y < 0 || y >= static_cast<double>(ds.n_classes)) {
        throw ContractError("dataset: label " + std::to_string(y) + " of sequence " +
                            std::to_string(i) + " is not a class index");
      }
    }
  }
}

/// FNV-1a over the raw bytes of shapes, values, labels and split tags.
inline std::uint64_t dataset_checksum(const SequenceDataset &ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void *p, std::size_t n) {
    const auto *b = static_cast<const unsigned char *>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::int64_t shape[2] = {ds.sequences[i].rows(), ds.sequences[i].cols()};
    mix(shape, sizeof(shape));
    mix(ds.sequences[i].data(), sizeof(double) * static_cast<std::size_t>(ds.sequences[i].size()));
    mix(&ds.labels[i], sizeof(double));
    const auto tag = static_cast<std::int32_t>(ds.splits[i]);
    mix(&tag, sizeof(tag));
  }
  return h;
}

inline std::string checksum_hex(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline nlohmann::json dataset_manifest(const SequenceDataset &ds) {
  nlohmann::json j;
  j["config"] = ds.provenance;
  j["seed"] = ds.provenance.value("seed", nlohmann::json());
  j["size"] = ds.size();
  j["checksum"] = checksum_hex(dataset_checksum(ds));
  return j;
}

// ---- synthetic cluster task ----------------------------------------------

struct ClusterTaskConfig {
  std::size_t n = 2000;
  Eigen::Index length = 16;
  Eigen::Index d_in = 4;
  Eigen::Index n_classes = 3;
  /// Rotates the first two feature dims by 90 degrees, giving class means
  /// disjoint from the unrotated task.
  bool rotated = false;
};

/// Spacing of class means along dim 0 and half-distance of the two mixture
/// components of a class along dim 1, in units of the token noise sd.
constexpr double kClusterClassSpacing = 7.0;
constexpr double kClusterComponentOffset = 3.5;
constexpr double kClusterBaseOffset = 8.0;

/// Mean of mixture component j of class c (first two dims; others zero).
inline Vector cluster_component_mean(const ClusterTaskConfig &cfg, Eigen::Index c, int j) {
  Vector mu = Vector::Zero(cfg.d_in);
  mu(0) = kClusterBaseOffset + kClusterClassSpacing * static_cast<double>(c);
  if (cfg.d_in >= 2) {
    mu(1) = j == 0 ? kClusterComponentOffset : -kClusterComponentOffset;
  }
  return mu;
}

/// Sequence i has label i mod n_classes; each token picks one of its class's
/// two mixture components uniformly and adds unit-variance Gaussian noise.
inline SequenceDataset make_cluster_task(const ClusterTaskConfig &cfg, std::uint64_t seed) {
  if (cfg.n_classes < 2) {
    throw ContractError("cluster task: n_classes must be >= 2");
  }
  if (cfg.length < 1 || cfg.d_in < 1) {
    throw ContractError("cluster task: length and d_in must be >= 1");
  }
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> noise(0.0, 1.0);
  SequenceDataset ds;
  ds.n_classes = cfg.n_classes;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const auto c = static_cast<Eigen::Index>(i % static_cast<std::size_t>(cfg.n_classes));
    Matrix x(cfg.length, cfg.d_in);
    for (Eigen::Index t = 0; t < cfg.length; ++t) {
      const Vector mu = cluster_component_mean(cfg, c, coin(rng) ? 1 : 0);
      for (Eigen::Index k = 0; k < cfg.d_in; ++k) {
        x(t, k) = mu(k) + noise(rng);
      }
    }
    if (cfg.rotated) {
      if (cfg.d_in >= 2) {
        const Vector x0 = x.col(0);
        x.col(0) = -x.col(1);
        x.col(1) = x0;
      } else {
        x.col(0) = -x.col(0);
      }
    }
    ds.sequences.push_back(std::move(x));
    ds.labels.push_back(static_cast<double>(c));
  }
  ds.splits = default_splits(cfg.n);
  ds.provenance = {{"generator", "cluster"},
                   {"n", cfg.n},
                   {"length", cfg.length},
                   {"d_in", cfg.d_in},
                   {"n_classes", cfg.n_classes},
                   {"rotated", cfg.rotated},
                   {"seed", seed}};
  return ds;
}

/// Nearest class centroid of sequence-mean features, fitted on `train`.
struct CentroidClassifier {
  Matrix centroids; // n_classes x d

  static CentroidClassifier fit(const SequenceDataset &train) {
    CentroidClassifier c;
    c.centroids = Matrix::Zero(train.n_classes, train.feature_dim());
    Vector counts = Vector::Zero(train.n_classes);
    for (std::size_t i = 0; i < train.size(); ++i) {
      const auto y = static_cast<Eigen::Index>(train.labels[i]);
      c.centroids.row(y) += train.sequences[i].colwise().mean();
      counts(y) += 1.0;
    }
    for (Eigen::Index k = 0; k < c.centroids.rows(); ++k) {
      if (counts(k) > 0) {
        c.centroids.row(k) /= counts(k);
      }
    }
    return c;
  }

  Eigen::Index classify(const Matrix &x) const {
    Eigen::Index best = 0;
    (c_rows_distance(x)).minCoeff(&best);
    return best;
  }

  double accuracy(const SequenceDataset &ds) const {
    if (ds.empty()) {
      return 0.0;
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      hits += static_cast<double>(classify(ds.sequences[i])) == ds.labels[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(ds.size());
  }

private:
  Vector c_rows_distance(const Matrix &x) const {
    const Eigen::RowVectorXd m = x.colwise().mean();
    return (centroids.rowwise() - m).rowwise().squaredNorm();
  }
};

// ---- distribution shift ----------------------------------------------------

enum class ShiftKind { MeanShift, NoiseInflation, TokenCorruption };

inline std::string to_string(ShiftKind k) {
  switch (k) {
  case ShiftKind::MeanShift:
    return "mean-shift";
  case ShiftKind::NoiseInflation:
    return "noise-inflation";
  case ShiftKind::TokenCorruption:
    return "token-corruption";
  }
  return "?";
}

inline ShiftKind shift_kind_from_string(const std::string &s) {
  for (ShiftKind k : {ShiftKind::MeanShift, ShiftKind::NoiseInflation,
                      ShiftKind::TokenCorruption}) {
    if (to_string(k) == s) {
      return k;
    }
  }
  throw ContractError("unknown shift kind '" + s + "'");
}

struct ShiftSpec {
  ShiftKind kind = ShiftKind::MeanShift;
  /// Intensity level 0..4; 0 is the identity.
  int level = 0;
};

constexpr int kMaxShiftLevel = 4;
/// Per-level strength: dim-0 offset, extra noise sd, corrupted token fraction.
constexpr double kMeanShiftStep = 2.5;
constexpr double kNoiseInflationStep = 1.0;
constexpr double kCorruptionStep = 0.15;
constexpr double kCorruptionScale = 3.0;

/// Applies a graded shift. Labels, splits and lengths are preserved.
/// Token-id data (vocab_size > 0) is corrupted by replacing ids with uniform
/// draws; the other kinds require continuous features.
inline SequenceDataset apply_shift(const SequenceDataset &ds, const ShiftSpec &shift,
                                   std::uint64_t seed, Eigen::Index vocab_size = 0) {
  if (shift.level < 0 || shift.level > kMaxShiftLevel) {
    throw ContractError("shift level must be in 0.." + std::to_string(kMaxShiftLevel));
  }
  SequenceDataset out = ds;
  if (shift.level == 0) {
    return out;
  }
  const double level = static_cast<double>(shift.level);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (vocab_size > 0 && shift.kind != ShiftKind::TokenCorruption) {
    throw ContractError(to_string(shift.kind) + " needs continuous features");
  }
  for (Matrix &x : out.sequences) {
    switch (shift.kind) {
    case ShiftKind::MeanShift:
      x.col(0).array() += kMeanShiftStep * level;
      break;
    case ShiftKind::NoiseInflation:
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        x(i) += kNoiseInflationStep * level * normal(rng);
      }
      break;
    case ShiftKind::TokenCorruption:
      for (Eigen::Index t = 0; t < x.rows(); ++t) {
        if (unit(rng) >= kCorruptionStep * level) {
          continue;
        }
        if (vocab_size > 0) {
          std::uniform_int_distribution<Eigen::Index> id(0, vocab_size - 1);
          x(t, 0) = static_cast<double>(id(rng));
        } else {
          for (Eigen::Index k = 0; k < x.cols(); ++k) {
            x(t, k) = kCorruptionScale * normal(rng);
          }
        }
      }
      break;
    }
  }
  out.provenance["shift"] = {{"kind", to_string(shift.kind)},
                             {"level", shift.level},
                             {"seed", seed}};
  return out;
}

// ---- CSV loading -------------------------------------------------------------

struct CsvSchema {
  std::vector<std::string> token_columns;
  std::string label_column;
  std::string sequence_id_column;
  /// Optional column holding train/valid/test; without it the default
  /// 80/10/10 split over sequences in order of first appearance is used.
  std::string split_column;
  /// 0 for regression labels.
  Eigen::Index n_classes = 0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string &line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (auto &f : out) {
    const auto b = f.find_first_not_of(" \t");
    const auto e = f.find_last_not_of(" \t");
    f = b == std::string::npos ? std::string() : f.substr(b, e - b + 1);
  }
  return out;
}

inline double parse_number(const std::string &s, const std::string &where) {
  if (s.empty()) {
    throw ConfigError(where + ": empty numeric field");
  }
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (used != s.size() || !std::isfinite(v)) {
    throw ConfigError(where + ": '" + s + "' is not a finite number");
  }
  return v;
}

} // namespace detail

/// Rows are grouped by sequence id in order of first appearance; tokens keep
/// row order within a sequence. Plain comma separation, no quoting.
inline SequenceDataset load_csv_sequences(const std::string &path, const CsvSchema &schema) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open " + path);
  }
  if (schema.token_columns.empty()) {
    throw ConfigError("csv schema: token_columns must be nonempty");
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw ConfigError(path + ":1: missing header");
  }
  const auto header = detail::split_csv_line(line);
  auto column = [&](const std::string &name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw ConfigError("csv schema: column '" + name + "' not found in " + path);
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  std::vector<std::size_t> token_idx;
  for (const auto &c : schema.token_columns) {
    token_idx.push_back(column(c));
  }
  const std::size_t label_idx = column(schema.label_column);
  const std::size_t id_idx = column(schema.sequence_id_column);
  const bool has_split = !schema.split_column.empty();
  const std::size_t split_idx = has_split ? column(schema.split_column) : 0;

  struct Pending {
    std::vector<std::vector<double>> rows;
    double label;
    Split split;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Pending> groups;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    const std::string where = path + ":" + std::to_string(line_no);
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size()) {
      throw ConfigError(where + ": expected " + std::to_string(header.size()) +
                        " fields, got " + std::to_string(fields.size()));
    }
    std::vector<double> tok;
    for (std::size_t k : token_idx) {
      tok.push_back(detail::parse_number(fields[k], where));
    }
    const double label = detail::parse_number(fields[label_idx], where);
    if (schema.n_classes > 0 &&
        (label != std::floor(label) || label < 0 ||
         label >= static_cast<double>(schema.n_classes))) {
      throw ConfigError(where + ": label " + fields[label_idx] + " is not a class index");
    }
    Split split = Split::Train;
    if (has_split) {
      try {
        split = split_from_string(fields[split_idx]);
      } catch (const ConfigError &e) {
        throw ConfigError(where + ": " + e.what());
      }
    }
    const std::string &id = fields[id_idx];
    auto it = groups.find(id);
    if (it == groups.end()) {
      order.push_back(id);
      groups.emplace(id, Pending{{tok}, label, split});
    } else {
      if (it->second.label != label) {
        throw ConfigError(where + ": sequence '" + id + "' changes label");
      }
      if (it->second.split != split) {
        throw ConfigError(where + ": sequence '" + id + "' changes split");
      }
      it->second.rows.push_back(std::move(tok));
    }
  }

  SequenceDataset ds;
  ds.n_classes = schema.n_classes;
  for (const auto &id : order) {
    const Pending &p = groups.at(id);
    Matrix x(static_cast<Eigen::Index>(p.rows.size()),
             static_cast<Eigen::Index>(token_idx.size()));
    for (std::size_t r = 0; r < p.rows.size(); ++r) {
      for (std::size_t k = 0; k < token_idx.size(); ++k) {
        x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = p.rows[r][k];
      }
    }
    ds.sequences.push_back(std::move(x));
    ds.labels.push_back(p.label);
    ds.splits.push_back(p.split);
  }
  if (!has_split) {
    ds.splits = default_splits(ds.size());
  }
  ds.provenance = {{"loader", "csv"},
                   {"path", path},
                   {"token_columns", schema.token_columns},
                   {"label_column", schema.label_column},
                   {"sequence_id_column", schema.sequence_id_column},
                   {"split_column", schema.split_column},
                   {"n_classes", schema.n_classes}};
  return ds;
}

} // namespace sgpa
