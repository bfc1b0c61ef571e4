// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "convstyle/random.hpp"
#include "convstyle/tensor.hpp"

namespace convstyle {

/// Named parameters with a gradient accumulator per entry. Iteration order is
/// lexicographic by name.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;
  };

  void add(const std::string& name, Tensor value) {
    if (entries_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    Tensor grad(value.shape());
    entries_.emplace(name, Entry{std::move(value), std::move(grad)});
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }
  Tensor& grad(const std::string& name) { return entry(name).grad; }
  const Tensor& grad(const std::string& name) const { return entry(name).grad; }

  /// Replace a value, keeping the shape contract.
  void set(const std::string& name, Tensor v) {
    auto& e = entry(name);
    require_same_shape(e.value, v, "ParamStore::set");
    e.value = std::move(v);
  }

  void zero_grad() {
    for (auto& [_, e] : entries_) e.grad.fill(0.0);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [n, _] : entries_) out.push_back(n);
    return out;
  }

  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t total_parameters() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  /// Values only; gradients are not part of parameter identity.
  bool same_values(const ParamStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    auto it = other.entries_.begin();
    for (const auto& [n, e] : entries_) {
      if (n != it->first || !(e.value == it->second.value)) return false;
      ++it;
    }
    return true;
  }

 private:
  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

/// Glorot-uniform matrix in [-s, s], s = sqrt(6 / (fan_in + fan_out)).
/// The stream is keyed by (seed, name) so the draw does not depend on the
/// order parameters are created in.
inline Tensor glorot_uniform(std::size_t fan_out, std::size_t fan_in, std::uint64_t seed,
                             const std::string& name) {
  Rng rng(hash_string(seed, name));
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_out, fan_in});
  for (auto& v : t.data()) v = rng.uniform(-s, s);
  return t;
}

}  // namespace convstyle
