#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "bnlstm/errors.hpp"

namespace bnlstm {

// Dense row-major array of doubles. Everything in the library is 64-bit:
// the gradient-decay diagnostics measure norms over 100+ timesteps and
// single precision would confound decay with rounding.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

  Tensor(std::vector<int64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_numel(shape_) != static_cast<int64_t>(data_.size())) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int64_t extent(int64_t axis) const { return shape_[static_cast<size_t>(axis)]; }

  // 2-D conveniences; most of the library works on [batch x features].
  int64_t rows() const { return shape_.size() >= 1 ? shape_[0] : 1; }
  int64_t cols() const { return shape_.size() >= 2 ? shape_[1] : 1; }

  const std::vector<int64_t>& shape() const { return shape_; }
  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }
  const double* raw() const { return data_.data(); }
  double* raw() { return data_.data(); }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * cols() + j)]; }
  double at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * cols() + j)]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  static std::string shape_string(const std::vector<int64_t>& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }

  std::string shape_string() const { return shape_string(shape_); }

 private:
  static int64_t checked_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
      if (e < 0) throw ShapeError("negative extent in shape " + shape_string(shape));
      n *= e;
    }
    return n;
  }

  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

// Ordered collection of named tensors. Used for model parameters, gradients
// and optimizer accumulators; iteration order is insertion order so that
// updates and serialization are deterministic.
struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(std::string name, Tensor t) { items.emplace_back(std::move(name), std::move(t)); }

  bool contains(const std::string& name) const {
    for (const auto& [k, v] : items) {
      if (k == name) return true;
    }
    return false;
  }

  Tensor& get(const std::string& name) {
    for (auto& [k, v] : items) {
      if (k == name) return v;
    }
    throw ShapeError("no parameter named '" + name + "'");
  }

  const Tensor& get(const std::string& name) const {
    for (const auto& [k, v] : items) {
      if (k == name) return v;
    }
    throw ShapeError("no parameter named '" + name + "'");
  }

  size_t size() const { return items.size(); }

  bool all_finite() const {
    for (const auto& [k, v] : items) {
      if (!v.all_finite()) return false;
    }
    return true;
  }
};

}  // namespace bnlstm
