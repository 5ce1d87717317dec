#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "sgpa/linalg.hpp"

namespace sgpa {

using ParamId = std::size_t;

/// Ordered collection of named trainable matrices. Order is insertion order
/// and is what checkpoints, gradients and optimizer state are aligned to.
class ParameterSet {
public:
  ParamId add(const std::string &name, Matrix value) {
    if (index_.count(name) != 0) {
      throw ContractError("duplicate parameter name: " + name);
    }
    index_.emplace(name, values_.size());
    names_.push_back(name);
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::string &name(ParamId id) const { return names_.at(id); }
  const std::vector<std::string> &names() const { return names_; }

  Matrix &operator[](ParamId id) { return values_.at(id); }
  const Matrix &operator[](ParamId id) const { return values_.at(id); }

  bool contains(const std::string &name) const {
    return index_.count(name) != 0;
  }
  ParamId id(const std::string &name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ContractError("unknown parameter: " + name);
    }
    return it->second;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto &v : values_) {
      n += static_cast<std::size_t>(v.size());
    }
    return n;
  }

private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::unordered_map<std::string, ParamId> index_;
};

/// One gradient matrix per parameter, aligned with a ParameterSet.
using GradientMap = std::vector<Matrix>;

} // namespace sgpa
