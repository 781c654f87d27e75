// Copyright 2026 The asrkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef ASRKIT_ARRAY_HPP_
#define ASRKIT_ARRAY_HPP_

#include <cstdint>
#include <vector>

#include "asrkit/base.hpp"

namespace asrkit::ad {

// Dense row-major array of doubles. The only tensor carrier in the
// project; rank is dynamic (vectors, matrices, conv maps, conv kernels).
class Array {
 public:
  Array() = default;
  explicit Array(std::vector<int> shape);

  static Array zeros(std::vector<int> shape) { return Array(std::move(shape)); }
  static Array full(std::vector<int> shape, double v);
  static Array from(std::vector<int> shape, std::vector<double> values);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Rank-specific accessors; no bounds checks beyond debug builds.
  double& at(int i) { return data_[static_cast<size_t>(i)]; }
  double at(int i) const { return data_[static_cast<size_t>(i)]; }
  double& at(int i, int j) {
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }
  double at(int i, int j) const {
    return data_[static_cast<size_t>(i) * shape_[1] + j];
  }
  double& at(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  double at(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }

  bool same_shape(const Array& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  void fill(double v);
  void add_inplace(const Array& other);  // same shape

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

bool bitwise_equal(const Array& a, const Array& b);

// Uniform(-limit, limit) with limit = sqrt(6 / fan_in).
Array he_uniform(std::vector<int> shape, int fan_in, Rng& rng);

}  // namespace asrkit::ad

#endif  // ASRKIT_ARRAY_HPP_
