#pragma once

// Run configuration: one JSON document per experiment.
//
//   {
//     "schema_version": 1,
//     "seed": 0,
//     "model":  { ModelConfig fields; "m_global": -1 picks max(1, round(T_avg / H)) },
//     "train":  { "lr", "lr_final", "epochs", "batch_size", "mc_train", "mc_predict", "grad_clip" },
//     "data":   { "source": "cluster" | "csv", ..., "shift": {"kind", "level"} },
//     "output": { "dir": "runs/name" }
//   }
//
// Unknown keys are errors at every level. The resolved snapshot written next
// to a run spells out every field, so it reproduces the run on its own.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"
#include "sgpa/checkpoint.hpp"
#include "sgpa/data.hpp"
#include "sgpa/train.hpp"

namespace sgpa {

constexpr int kSchemaVersion = 1;
constexpr const char *kOutputRootEnv = "SGPA_OUTPUT_ROOT";

struct CsvSource {
  std::string path;
  CsvSchema schema;
};

struct DataConfig {
  /// Exactly one of these is set.
  std::optional<ClusterTaskConfig> cluster;
  std::optional<CsvSource> csv;
  std::optional<ShiftSpec> shift;
  /// Token-id data: ids are one-hot encoded against this vocabulary.
  Eigen::Index vocab_size = 0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  /// True when the config asked for m_global = -1.
  bool auto_m_global = false;
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "runs/default";
};

namespace detail {

inline const nlohmann::json &require_object(const nlohmann::json &j, const std::string &where) {
  if (!j.is_object()) {
    throw ConfigError(where + ": expected an object");
  }
  return j;
}

/// Calls `f(key, value)` for every member, rewrapping json type errors with
/// the key path.
template <typename F>
void for_each_field(const nlohmann::json &j, const std::string &where, F &&f) {
  require_object(j, where);
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string path = where + "." + it.key();
    try {
      if (!f(it.key(), it.value())) {
        throw ConfigError(path + ": unknown key");
      }
    } catch (const nlohmann::json::exception &e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
}

template <typename T> T count_field(const nlohmann::json &v, const std::string &path) {
  if (!v.is_number_integer()) {
    throw ConfigError(path + ": expected an integer");
  }
  const auto x = v.get<std::int64_t>();
  if (x < 0) {
    throw ConfigError(path + ": must be >= 0");
  }
  return static_cast<T>(x);
}

} // namespace detail

inline ShiftSpec shift_from_json(const nlohmann::json &j, const std::string &where) {
  ShiftSpec s;
  bool has_kind = false;
  detail::for_each_field(j, where, [&](const std::string &k, const nlohmann::json &v) {
    if (k == "kind") {
      try {
        s.kind = shift_kind_from_string(v.get<std::string>());
      } catch (const ContractError &e) {
        throw ConfigError(where + ".kind: " + e.what());
      }
      has_kind = true;
    } else if (k == "level") {
      s.level = v.get<int>();
      if (s.level < 0 || s.level > kMaxShiftLevel) {
        throw ConfigError(where + ".level: must be in 0.." + std::to_string(kMaxShiftLevel));
      }
    } else {
      return false;
    }
    return true;
  });
  if (!has_kind) {
    throw ConfigError(where + ".kind: required");
  }
  return s;
}

inline DataConfig data_config_from_json(const nlohmann::json &j, const std::string &where = "data") {
  detail::require_object(j, where);
  if (!j.contains("source")) {
    throw ConfigError(where + ".source: required (cluster or csv)");
  }
  const std::string source = j.at("source").is_string() ? j.at("source").get<std::string>() : "";
  DataConfig d;
  auto common = [&](const std::string &k, const nlohmann::json &v) {
    if (k == "source") {
      return true;
    }
    if (k == "shift") {
      d.shift = shift_from_json(v, where + ".shift");
      return true;
    }
    if (k == "vocab_size") {
      d.vocab_size = detail::count_field<Eigen::Index>(v, where + ".vocab_size");
      return true;
    }
    return false;
  };
  if (source == "cluster") {
    ClusterTaskConfig c;
    detail::for_each_field(j, where, [&](const std::string &k, const nlohmann::json &v) {
      const std::string path = where + "." + k;
      if (k == "n") c.n = detail::count_field<std::size_t>(v, path);
      else if (k == "length") c.length = detail::count_field<Eigen::Index>(v, path);
      else if (k == "d_in") c.d_in = detail::count_field<Eigen::Index>(v, path);
      else if (k == "n_classes") c.n_classes = detail::count_field<Eigen::Index>(v, path);
      else if (k == "rotated") c.rotated = v.get<bool>();
      else return common(k, v);
      return true;
    });
    if (c.n_classes < 2) {
      throw ConfigError(where + ".n_classes: must be >= 2");
    }
    if (c.length < 1 || c.d_in < 1) {
      throw ConfigError(where + ": length and d_in must be >= 1");
    }
    if (d.vocab_size > 0) {
      throw ConfigError(where + ".vocab_size: the cluster task has continuous tokens");
    }
    d.cluster = c;
  } else if (source == "csv") {
    CsvSource c;
    detail::for_each_field(j, where, [&](const std::string &k, const nlohmann::json &v) {
      if (k == "path") c.path = v.get<std::string>();
      else if (k == "token_columns") c.schema.token_columns = v.get<std::vector<std::string>>();
      else if (k == "label_column") c.schema.label_column = v.get<std::string>();
      else if (k == "sequence_id_column") c.schema.sequence_id_column = v.get<std::string>();
      else if (k == "split_column") c.schema.split_column = v.get<std::string>();
      else if (k == "n_classes") c.schema.n_classes = detail::count_field<Eigen::Index>(v, where + ".n_classes");
      else return common(k, v);
      return true;
    });
    for (const auto &[field, value] :
         {std::pair{"path", c.path}, std::pair{"label_column", c.schema.label_column},
          std::pair{"sequence_id_column", c.schema.sequence_id_column}}) {
      if (value.empty()) {
        throw ConfigError(where + "." + field + ": required for csv data");
      }
    }
    if (c.schema.token_columns.empty()) {
      throw ConfigError(where + ".token_columns: required for csv data");
    }
    if (d.vocab_size > 0 && c.schema.token_columns.size() != 1) {
      throw ConfigError(where + ".token_columns: token-id data has exactly one column");
    }
    d.csv = c;
  } else {
    throw ConfigError(where + ".source: expected \"cluster\" or \"csv\"");
  }
  return d;
}

inline nlohmann::json data_config_to_json(const DataConfig &d) {
  nlohmann::json j;
  if (d.cluster) {
    const auto &c = *d.cluster;
    j = {{"source", "cluster"}, {"n", c.n},       {"length", c.length},
         {"d_in", c.d_in},      {"n_classes", c.n_classes}, {"rotated", c.rotated}};
  } else if (d.csv) {
    const auto &c = *d.csv;
    j = {{"source", "csv"},
         {"path", c.path},
         {"token_columns", c.schema.token_columns},
         {"label_column", c.schema.label_column},
         {"sequence_id_column", c.schema.sequence_id_column},
         {"split_column", c.schema.split_column},
         {"n_classes", c.schema.n_classes},
         {"vocab_size", d.vocab_size}};
  }
  if (d.shift) {
    j["shift"] = {{"kind", to_string(d.shift->kind)}, {"level", d.shift->level}};
  }
  return j;
}

/// Materializes the dataset. Generator and shift draws come from the "data"
/// stream of `seed`.
inline SequenceDataset load_data(const DataConfig &d, std::uint64_t seed) {
  SequenceDataset ds;
  if (d.cluster) {
    ds = make_cluster_task(*d.cluster, derive_seed(seed, streams::kData));
  } else if (d.csv) {
    ds = load_csv_sequences(d.csv->path, d.csv->schema);
  } else {
    throw ConfigError("data: no source configured");
  }
  if (d.shift) {
    ds = apply_shift(ds, *d.shift, derive_seed(seed, streams::kData, 1), d.vocab_size);
  }
  return ds;
}

inline TrainConfig train_config_from_json(const nlohmann::json &j, const std::string &where = "train") {
  TrainConfig t;
  detail::for_each_field(j, where, [&](const std::string &k, const nlohmann::json &v) {
    if (k == "lr") t.lr = v.get<double>();
    else if (k == "lr_final") t.lr_final = v.get<double>();
    else if (k == "epochs") t.epochs = v.get<int>();
    else if (k == "batch_size") t.batch_size = v.get<int>();
    else if (k == "mc_train") t.mc_train = v.get<int>();
    else if (k == "mc_predict") t.mc_predict = v.get<int>();
    else if (k == "grad_clip") t.grad_clip = v.get<double>();
    else return false;
    return true;
  });
  return t;
}

inline nlohmann::json train_config_to_json(const TrainConfig &t) {
  return {{"lr", t.lr},
          {"lr_final", t.lr_final},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"mc_train", t.mc_train},
          {"mc_predict", t.mc_predict},
          {"grad_clip", t.grad_clip}};
}

inline void check_schema_version(const nlohmann::json &j, const std::string &what) {
  if (!j.contains("schema_version")) {
    throw ConfigError(what + ": schema_version is required");
  }
  if (!j.at("schema_version").is_number_integer() ||
      j.at("schema_version").get<int>() != kSchemaVersion) {
    throw ConfigError(what + ": unsupported schema_version (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
}

inline std::uint64_t seed_from_json(const nlohmann::json &j, const std::string &what) {
  if (!j.contains("seed")) {
    throw ConfigError(what + ": seed is required");
  }
  if (!j.at("seed").is_number_unsigned()) {
    throw ConfigError(what + ".seed: expected a non-negative integer");
  }
  return j.at("seed").get<std::uint64_t>();
}

inline RunConfig run_config_from_json(const nlohmann::json &j) {
  detail::require_object(j, "config");
  check_schema_version(j, "config");
  RunConfig rc;
  rc.seed = seed_from_json(j, "config");
  bool has_model = false, has_data = false;
  detail::for_each_field(j, "config", [&](const std::string &k, const nlohmann::json &v) {
    if (k == "schema_version" || k == "seed") {
      return true;
    }
    if (k == "model") {
      nlohmann::json m = v;
      if (m.is_object() && m.contains("m_global") && m["m_global"] == -1) {
        rc.auto_m_global = true;
        m.erase("m_global");
      }
      rc.model = model_config_from_json(m, "model");
      has_model = true;
    } else if (k == "train") {
      rc.train = train_config_from_json(v);
    } else if (k == "data") {
      rc.data = data_config_from_json(v);
      has_data = true;
    } else if (k == "output") {
      detail::for_each_field(v, "output", [&](const std::string &ok, const nlohmann::json &ov) {
        if (ok != "dir") {
          return false;
        }
        rc.output_dir = ov.get<std::string>();
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
  if (!has_model) {
    throw ConfigError("config.model: required");
  }
  if (!has_data) {
    throw ConfigError("config.data: required");
  }
  rc.train.seed = rc.seed;
  rc.train.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config " + path);
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// Fills data-dependent fields and checks the model against the data.
/// The auto rule for M_g spreads the average sequence length over the heads.
inline void resolve_against_data(RunConfig &rc, const SequenceDataset &ds) {
  if (rc.data.vocab_size > 0 && rc.model.vocab_size != rc.data.vocab_size) {
    throw ConfigError("model.vocab_size: must equal data.vocab_size (" +
                      std::to_string(rc.data.vocab_size) + ")");
  }
  if (rc.auto_m_global) {
    const double t_avg = ds.mean_length();
    rc.model.m_global = std::max<Eigen::Index>(
        1, static_cast<Eigen::Index>(std::lround(t_avg / static_cast<double>(rc.model.heads))));
  }
  rc.model.validate();
  if (ds.empty()) {
    return;
  }
  if (rc.model.vocab_size == 0 && ds.feature_dim() != rc.model.d_in) {
    throw ConfigError("model.d_in: data has " + std::to_string(ds.feature_dim()) +
                      " features per token");
  }
  if (ds.max_length() > rc.model.max_len) {
    throw ConfigError("model.max_len: data has sequences of length " +
                      std::to_string(ds.max_length()));
  }
  if (rc.model.likelihood == Likelihood::Categorical && ds.n_classes != rc.model.n_outputs) {
    throw ConfigError("model.n_outputs: data has " + std::to_string(ds.n_classes) + " classes");
  }
  if (rc.model.likelihood == Likelihood::Gaussian && ds.n_classes != 0) {
    throw ConfigError("model.likelihood: gaussian needs regression targets (data.n_classes = 0)");
  }
}

inline nlohmann::json resolved_snapshot(const RunConfig &rc) {
  return {{"schema_version", kSchemaVersion},
          {"seed", rc.seed},
          {"model", model_config_to_json(rc.model)},
          {"train", train_config_to_json(rc.train)},
          {"data", data_config_to_json(rc.data)},
          {"output", {{"dir", rc.output_dir}}}};
}

/// Data spec files used by eval and ood: {"schema_version", "seed", "data"}.
struct DataSpec {
  std::uint64_t seed = 0;
  DataConfig data;
  /// Optional split restriction; all records when absent.
  std::optional<Split> split;
};

inline DataSpec load_data_spec(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open data spec " + path);
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(path + ": " + e.what());
  }
  detail::require_object(j, path);
  check_schema_version(j, path);
  DataSpec s;
  s.seed = seed_from_json(j, path);
  bool has_data = false;
  detail::for_each_field(j, path, [&](const std::string &k, const nlohmann::json &v) {
    if (k == "schema_version" || k == "seed") {
      return true;
    }
    if (k == "data") {
      s.data = data_config_from_json(v);
      has_data = true;
      return true;
    }
    if (k == "split") {
      s.split = split_from_string(v.get<std::string>());
      return true;
    }
    return false;
  });
  if (!has_data) {
    throw ConfigError(path + ".data: required");
  }
  return s;
}

/// Relative output paths live under $SGPA_OUTPUT_ROOT when it is set.
inline std::filesystem::path resolve_output_dir(const std::string &dir) {
  std::filesystem::path p(dir);
  if (p.is_absolute()) {
    return p;
  }
  if (const char *root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') {
    return std::filesystem::path(root) / p;
  }
  return p;
}

} // namespace sgpa
