// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nlos {

/// Dense row-major tensor of doubles, last axis fastest.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0) : dims_(std::move(dims)) {
    if (dims_.empty()) throw std::invalid_argument("tensor dims must be non-empty");
    std::size_t n = 1;
    for (std::size_t d : dims_) {
      if (d == 0) throw std::invalid_argument("tensor extents must be positive");
      n *= d;
    }
    data_.assign(n, fill);
  }

  Tensor(std::initializer_list<std::size_t> dims, double fill = 0.0)
      : Tensor(std::vector<std::size_t>(dims), fill) {}

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  double* begin() { return data_.data(); }
  double* end() { return data_.data() + data_.size(); }

  std::size_t offset(std::span<const std::size_t> idx) const {
    if (idx.size() != dims_.size()) throw std::out_of_range("tensor index rank mismatch");
    std::size_t off = 0;
    for (std::size_t a = 0; a < idx.size(); ++a) {
      if (idx[a] >= dims_[a]) throw std::out_of_range("tensor index out of range");
      off = off * dims_[a] + idx[a];
    }
    return off;
  }

  double& operator[](std::size_t flat) { return data_[flat]; }
  const double& operator[](std::size_t flat) const { return data_[flat]; }

  double& operator()(std::size_t i) { return data_[check1(i)]; }
  const double& operator()(std::size_t i) const { return data_[check1(i)]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[flat2(i, j)]; }
  const double& operator()(std::size_t i, std::size_t j) const { return data_[flat2(i, j)]; }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) { return data_[flat3(i, j, k)]; }
  const double& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[flat3(i, j, k)];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[flat4(i, j, k, l)];
  }
  const double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[flat4(i, j, k, l)];
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

  /// Flat index of the largest element.
  std::size_t argmax() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < data_.size(); ++i)
      if (data_[i] > data_[best]) best = i;
    return best;
  }

  /// Unravel a flat offset into per-axis indices.
  std::vector<std::size_t> unravel(std::size_t flat) const {
    std::vector<std::size_t> idx(dims_.size());
    for (std::size_t a = dims_.size(); a-- > 0;) {
      idx[a] = flat % dims_[a];
      flat /= dims_[a];
    }
    return idx;
  }

 private:
  std::size_t check1(std::size_t i) const {
    if (dims_.size() != 1 || i >= dims_[0]) throw std::out_of_range("bad 1d index");
    return i;
  }
  std::size_t flat2(std::size_t i, std::size_t j) const {
    if (dims_.size() != 2 || i >= dims_[0] || j >= dims_[1])
      throw std::out_of_range("bad 2d index");
    return i * dims_[1] + j;
  }
  std::size_t flat3(std::size_t i, std::size_t j, std::size_t k) const {
    if (dims_.size() != 3 || i >= dims_[0] || j >= dims_[1] || k >= dims_[2])
      throw std::out_of_range("bad 3d index");
    return (i * dims_[1] + j) * dims_[2] + k;
  }
  std::size_t flat4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    if (dims_.size() != 4 || i >= dims_[0] || j >= dims_[1] || k >= dims_[2] || l >= dims_[3])
      throw std::out_of_range("bad 4d index");
    return ((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l;
  }

  std::vector<std::size_t> dims_;
  std::vector<double> data_;
};

}  // namespace nlos
