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

#include "asrkit/array.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace asrkit::ad {

namespace {
int64_t shape_product(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DataError("array extents must be positive");
    n *= d;
  }
  return n;
}
}  // namespace

Array::Array(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_product(shape_)), 0.0);
}

Array Array::full(std::vector<int> shape, double v) {
  Array a(std::move(shape));
  a.fill(v);
  return a;
}

Array Array::from(std::vector<int> shape, std::vector<double> values) {
  Array a;
  a.shape_ = std::move(shape);
  if (shape_product(a.shape_) != static_cast<int64_t>(values.size())) {
    throw DataError("array value count does not match shape");
  }
  a.data_ = std::move(values);
  return a;
}

bool Array::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Array::add_inplace(const Array& other) {
  if (!same_shape(other)) throw DataError("add_inplace shape mismatch");
  const double* src = other.data();
  double* dst = data();
  for (int64_t i = 0; i < size(); ++i) dst[i] += src[i];
}

bool bitwise_equal(const Array& a, const Array& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(),
                     static_cast<size_t>(a.size()) * sizeof(double)) == 0;
}

Array he_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  Array a(std::move(shape));
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (int64_t i = 0; i < a.size(); ++i) {
    a[i] = rng.next_uniform(-limit, limit);
  }
  return a;
}

}  // namespace asrkit::ad
