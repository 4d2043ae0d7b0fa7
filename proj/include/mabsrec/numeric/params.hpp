#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "mabsrec/error.hpp"
#include "mabsrec/numeric/rng.hpp"
#include "mabsrec/numeric/tensor.hpp"

namespace mabsrec::numeric {

/// Named trainable tensors with gradient accumulators. Insertion order is
/// preserved and defines the checkpoint layout.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
  };

  Tensor& add(std::string name, Tensor value) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    Tensor grad(value.shape(), 0.0);
    entries_.push_back({std::move(name), std::move(value), std::move(grad)});
    return entries_.back().value;
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  std::size_t index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InvalidArgument("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  Entry& entry(std::size_t i) { return entries_.at(i); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  Entry& entry(std::string_view name) { return entries_[index_of(name)]; }
  const Entry& entry(std::string_view name) const { return entries_[index_of(name)]; }

  Tensor& value(std::string_view name) { return entry(name).value; }
  const Tensor& value(std::string_view name) const { return entry(name).value; }
  Tensor& grad(std::string_view name) { return entry(name).grad; }
  const Tensor& grad(std::string_view name) const { return entry(name).grad; }

  std::size_t size() const noexcept { return entries_.size(); }
  auto begin() noexcept { return entries_.begin(); }
  auto end() noexcept { return entries_.end(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

  std::size_t scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(0.0);
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace init {

inline Tensor normal(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

/// Variance-scaling uniform initializer, fan-average mode (Glorot uniform).
inline Tensor fan_avg_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::matrix(fan_in, fan_out);
  for (double& v : t.values()) v = rng.uniform(-limit, limit);
  return t;
}

}  // namespace init

}  // namespace mabsrec::numeric
