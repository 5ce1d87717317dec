#pragma once

// JSON model checkpoints.
//
//   {
//     "format": "sgpa-checkpoint", "version": 1,
//     "model": { ...ModelConfig fields... },
//     "params": [ {"name": ..., "rows": r, "cols": c, "data": [row-major]} ]
//   }
//
// Doubles are written in shortest round-trip form, so loading reproduces
// every parameter bit for bit.

#include <fstream>
#include <string>

#include "json.hpp"
#include "sgpa/transformer.hpp"

namespace sgpa {

constexpr int kCheckpointVersion = 1;

inline nlohmann::json model_config_to_json(const ModelConfig &c) {
  return {{"d_in", c.d_in},
          {"vocab_size", c.vocab_size},
          {"max_len", c.max_len},
          {"layers", c.layers},
          {"heads", c.heads},
          {"d_k", c.d_k},
          {"d_v", c.d_v},
          {"mlp_hidden", c.mlp_hidden},
          {"m_global", c.m_global},
          {"n_outputs", c.n_outputs},
          {"kernel", to_string(c.kernel)},
          {"attention", to_string(c.attention)},
          {"likelihood", to_string(c.likelihood)},
          {"share_cov_across_dims", c.share_cov_across_dims},
          {"base_jitter", c.base_jitter},
          {"layer_norm_eps", c.layer_norm_eps}};
}

/// Strict reader: every key must be known. Missing keys keep defaults.
inline ModelConfig model_config_from_json(const nlohmann::json &j,
                                          const std::string &where = "model") {
  if (!j.is_object()) {
    throw ConfigError(where + ": expected an object");
  }
  ModelConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string &k = it.key();
    const nlohmann::json &v = it.value();
    try {
      if (k == "d_in") c.d_in = v.get<Eigen::Index>();
      else if (k == "vocab_size") c.vocab_size = v.get<Eigen::Index>();
      else if (k == "max_len") c.max_len = v.get<Eigen::Index>();
      else if (k == "layers") c.layers = v.get<Eigen::Index>();
      else if (k == "heads") c.heads = v.get<Eigen::Index>();
      else if (k == "d_k") c.d_k = v.get<Eigen::Index>();
      else if (k == "d_v") c.d_v = v.get<Eigen::Index>();
      else if (k == "mlp_hidden") c.mlp_hidden = v.get<Eigen::Index>();
      else if (k == "m_global") c.m_global = v.get<Eigen::Index>();
      else if (k == "n_outputs") c.n_outputs = v.get<Eigen::Index>();
      else if (k == "kernel") c.kernel = kernel_family_from_string(v.get<std::string>());
      else if (k == "attention") c.attention = attention_mode_from_string(v.get<std::string>());
      else if (k == "likelihood") c.likelihood = likelihood_from_string(v.get<std::string>());
      else if (k == "share_cov_across_dims") c.share_cov_across_dims = v.get<bool>();
      else if (k == "base_jitter") c.base_jitter = v.get<double>();
      else if (k == "layer_norm_eps") c.layer_norm_eps = v.get<double>();
      else throw ConfigError(where + "." + k + ": unknown key");
    } catch (const nlohmann::json::exception &e) {
      throw ConfigError(where + "." + k + ": " + e.what());
    } catch (const ConfigError &e) {
      const std::string msg = e.what();
      if (msg.rfind(where + ".", 0) == 0) {
        throw;
      }
      throw ConfigError(where + "." + k + ": " + msg);
    }
  }
  return c;
}

inline nlohmann::json checkpoint_to_json(const Model &m) {
  nlohmann::json j;
  j["format"] = "sgpa-checkpoint";
  j["version"] = kCheckpointVersion;
  j["model"] = model_config_to_json(m.config);
  nlohmann::json params = nlohmann::json::array();
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const Matrix &v = m.params[i];
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(v.size()));
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      for (Eigen::Index c = 0; c < v.cols(); ++c) {
        data.push_back(v(r, c));
      }
    }
    params.push_back({{"name", m.params.name(i)},
                      {"rows", v.rows()},
                      {"cols", v.cols()},
                      {"data", std::move(data)}});
  }
  j["params"] = std::move(params);
  return j;
}

inline Model checkpoint_from_json(const nlohmann::json &j) {
  if (j.value("format", "") != "sgpa-checkpoint") {
    throw ConfigError("checkpoint: unrecognized format");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw ConfigError("checkpoint: unsupported version");
  }
  Model m = init_model(model_config_from_json(j.at("model"), "checkpoint.model"), 0);
  const nlohmann::json &params = j.at("params");
  if (params.size() != m.params.size()) {
    throw ConfigError("checkpoint: expected " + std::to_string(m.params.size()) +
                      " parameters, found " + std::to_string(params.size()));
  }
  for (const auto &p : params) {
    const std::string name = p.at("name").get<std::string>();
    if (!m.params.contains(name)) {
      throw ConfigError("checkpoint: unexpected parameter " + name);
    }
    Matrix &dst = m.params[m.params.id(name)];
    const auto rows = p.at("rows").get<Eigen::Index>();
    const auto cols = p.at("cols").get<Eigen::Index>();
    const auto data = p.at("data").get<std::vector<double>>();
    if (rows != dst.rows() || cols != dst.cols() ||
        data.size() != static_cast<std::size_t>(rows * cols)) {
      throw ConfigError("checkpoint: parameter " + name + " has wrong shape");
    }
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        dst(r, c) = data[static_cast<std::size_t>(r * cols + c)];
      }
    }
  }
  return m;
}

inline void save_checkpoint(const Model &m, const std::string &path) {
  std::ofstream out(path);
  if (!out) {
    throw ConfigError("cannot write checkpoint " + path);
  }
  out << checkpoint_to_json(m).dump() << '\n';
}

inline Model load_checkpoint(const std::string &path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open checkpoint " + path);
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError("checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

} // namespace sgpa
