#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "funkflow/errors.hpp"

namespace funkflow {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

// Dense row-major array of doubles.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0) : shape(std::move(s)) {
    data.assign(numel(shape), fill);
  }

  static std::size_t numel(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.size() == 1 ? 1 : shape[0]; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  // 1-d tensors map to a single row.
  MatMap mat() { return MatMap(data.data(), Eigen::Index(rows()), Eigen::Index(cols())); }
  ConstMatMap mat() const {
    return ConstMatMap(data.data(), Eigen::Index(rows()), Eigen::Index(cols()));
  }
  bool operator==(const Tensor&) const = default;
};

// Named parameters with insertion-ordered iteration. The flattened layout is
// the concatenation of every tensor in that order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, std::vector<std::size_t> shape) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, Tensor(std::move(shape)));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return entries_[it->second].second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return entries_[it->second].second;
  }

  std::size_t count() const { return entries_.size(); }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(total_size());
    for (const auto& [_, t] : entries_) out.insert(out.end(), t.data.begin(), t.data.end());
    return out;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != total_size())
      throw ValidationError("flat parameter vector has " + std::to_string(flat.size()) +
                            " values, expected " + std::to_string(total_size()));
    std::size_t off = 0;
    for (auto& [_, t] : entries_) {
      std::copy(flat.begin() + off, flat.begin() + off + t.size(), t.data.begin());
      off += t.size();
    }
  }

  ParamStore zeros_like() const {
    ParamStore z;
    for (const auto& [n, t] : entries_) z.add(n, t.shape);
    return z;
  }

  void set_zero() {
    for (auto& [_, t] : entries_) std::fill(t.data.begin(), t.data.end(), 0.0);
  }

  // this += other; layouts must match.
  void accumulate(const ParamStore& other, double scale = 1.0) {
    check_layout(other);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto& a = entries_[i].second.data;
      const auto& b = other.entries_[i].second.data;
      for (std::size_t k = 0; k < a.size(); ++k) a[k] += scale * b[k];
    }
  }

  void check_layout(const ParamStore& other) const {
    if (other.entries_.size() != entries_.size())
      throw ValidationError("parameter stores differ in tensor count");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].first != other.entries_[i].first ||
          entries_[i].second.shape != other.entries_[i].second.shape)
        throw ValidationError("parameter layout mismatch at " + entries_[i].first);
    }
  }

  bool operator==(const ParamStore& o) const { return entries_ == o.entries_; }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace funkflow
