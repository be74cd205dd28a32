// Copyright 2026 The vfuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense double-precision kernel shared by every other module.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vfuse/errors.hpp"

namespace vfuse {

using Vec = std::vector<double>;

// Non-negative vector summing to one. Construction validates.
class ProbVec {
 public:
  static constexpr double kSumTolerance = 1e-9;

  ProbVec() = default;

  explicit ProbVec(Vec values) : values_(std::move(values)) {
    double sum = 0.0;
    for (double v : values_) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw UsageError("ProbVec: entries must be finite and non-negative");
      }
      sum += v;
    }
    if (values_.empty() || std::abs(sum - 1.0) > kSumTolerance) {
      throw UsageError("ProbVec: entries must sum to 1 (got " +
                       std::to_string(sum) + ")");
    }
  }

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> values() const noexcept { return values_; }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  friend bool operator==(const ProbVec&, const ProbVec&) = default;

 private:
  Vec values_;
};

// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw UsageError("Matrix: data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline ProbVec softmax(std::span<const double> v) {
  if (v.empty()) throw UsageError("softmax: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  Vec out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return ProbVec(std::move(out));
}

inline ProbVec normalize(std::span<const double> v) {
  if (v.empty()) throw UsageError("normalize: empty input");
  double sum = 0.0;
  for (double x : v) {
    if (!(x >= 0.0)) throw UsageError("normalize: negative or NaN entry");
    sum += x;
  }
  if (!(sum > 0.0)) throw DegenerateInputError("normalize: all-zero input");
  Vec out(v.begin(), v.end());
  for (double& x : out) x /= sum;
  return ProbVec(std::move(out));
}

// (1/sqrt 2) * || sqrt(p) - sqrt(q) ||_2, in [0, 1].
inline double hellinger(const ProbVec& p, const ProbVec& q) {
  if (p.size() != q.size()) {
    throw UsageError("hellinger: length mismatch " + std::to_string(p.size()) +
                     " vs " + std::to_string(q.size()));
  }
  double acc = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double d = std::sqrt(p[j]) - std::sqrt(q[j]);
    acc += d * d;
  }
  return std::min(1.0, std::sqrt(acc) / std::sqrt(2.0));
}

// Indices of the floor(rho * d) smallest scores, ties broken by ascending
// index. Returned in ascending index order.
inline std::vector<std::size_t> mask_indices_by_quantile(
    std::span<const double> scores, double rho) {
  if (scores.empty()) throw UsageError("mask_indices_by_quantile: empty scores");
  if (!(rho >= 0.0 && rho <= 1.0)) {
    throw UsageError("mask_indices_by_quantile: rho outside [0, 1]");
  }
  const std::size_t d = scores.size();
  // The nudge absorbs representation error in rho (0.7 * 10 -> 6.999...).
  const auto m = std::min(
      d, static_cast<std::size_t>(std::floor(rho * static_cast<double>(d) + 1e-9)));
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  order.resize(m);
  std::sort(order.begin(), order.end());
  return order;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw UsageError("matmul: shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " * " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < b.cols(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

inline Vec layer_norm(std::span<const double> x, std::span<const double> gain,
                      std::span<const double> bias, double eps) {
  if (x.size() != gain.size() || x.size() != bias.size()) {
    throw UsageError("layer_norm: length mismatch");
  }
  if (x.empty()) throw UsageError("layer_norm: empty input");
  if (!(eps > 0.0)) throw UsageError("layer_norm: eps must be positive");
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = gain[i] * (x[i] - mean) * inv + bias[i];
  }
  return out;
}

}  // namespace vfuse
