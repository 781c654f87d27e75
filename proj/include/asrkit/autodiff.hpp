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

#ifndef ASRKIT_AUTODIFF_HPP_
#define ASRKIT_AUTODIFF_HPP_

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "asrkit/array.hpp"
#include "asrkit/base.hpp"

namespace asrkit::ad {

class Tape;

// Handle to a node on a Tape. Cheap to copy; invalid when default
// constructed.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Named trainable tensor. Gradient buffer always matches the value shape
// and is all-zero right after zero_grad().
struct Parameter {
  std::string name;
  Array value;
  Array grad;
  bool trainable = true;

  Parameter(std::string n, Array v, bool t)
      : name(std::move(n)), value(std::move(v)), trainable(t) {
    grad = Array::zeros(value.shape());
  }
  void zero_grad() { grad.fill(0.0); }
};

// Ordered, name-addressable parameter collection. Order is creation
// order and defines checkpoint layout.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Array init, bool trainable = true);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  size_t size() const { return items_.size(); }
  Parameter& operator[](size_t i) { return *items_[i]; }
  const Parameter& operator[](size_t i) const { return *items_[i]; }

  void zero_grad();
  int64_t total_elements() const;
  int64_t trainable_elements() const;

 private:
  std::vector<std::unique_ptr<Parameter>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Reverse-mode tape. One tape records one forward pass; backward() may be
// called once and accumulates d(loss)/d(value) into every trainable
// Parameter leased through leaf().
class Tape {
 public:
  struct Node {
    Array value;
    Array grad;
    bool needs_grad = false;
    bool grad_ready = false;
    Parameter* param = nullptr;
    std::function<void(Tape&, int)> backward;
  };

  Var input(Array value);        // constant leaf, no gradient
  Var leaf(Parameter& p);        // parameter leaf

  const Array& val(Var v) const { return node(v.id).value; }
  const Array& val(int id) const { return node(id).value; }
  // Gradient buffer of a node; allocated zero-filled on first access.
  Array& grad(Var v) { return grad_buffer(v.id); }
  Array& grad_buffer(int id);
  bool wants_grad(int id) const { return node(id).needs_grad; }
  bool wants_grad(Var v) const { return node(v.id).needs_grad; }

  // Generic recording hook used by ops defined in other modules.
  int record(Array value, const std::vector<int>& parents,
             std::function<void(Tape&, int)> backward_fn);
  Var as_var(int id) { return Var{this, id}; }

  void backward(Var loss);
  bool consumed() const { return consumed_; }
  size_t node_count() const { return nodes_.size(); }

  // ---- operator set ----
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var scale(Var a, double s);
  Var matmul(Var a, Var b);   // (m,k) x (k,n)
  Var bias_add(Var x, Var b); // (m,n) + (n)
  Var tanh_op(Var x);
  Var sigmoid(Var x);
  Var softmax_rows(Var x);    // softmax over the last axis of a matrix
  Var concat_channels(const std::vector<Var>& xs);  // rank-3, along axis 0

  // 2-D convolution over (C,H,W) maps with 'same' padding: output extent
  // ceil(in/stride) per spatial dim, zero padding split evenly with the
  // extra element on the trailing side. w is (Cout,Cin,kh,kw); bias
  // optional (pass invalid Var).
  Var conv2d(Var x, Var w, Var bias, int stride);

  // Adjoint of the stride-s 'same' convolution: maps (Cin,h,w) back to
  // (Cout,out_h,out_w) where ceil(out/stride) must equal the input
  // extent. w is (Cin,Cout,kh,kw).
  Var conv2d_transpose(Var x, Var w, Var bias, int stride, int out_h,
                       int out_w);

  // Per-channel batch normalization. Channel axis is 0 for rank-3 maps
  // and the last axis for matrices (features). In training mode the
  // batch statistics normalize and, when update_running is set, the
  // running buffers are updated in place; in inference mode the running
  // buffers normalize.
  Var batch_norm(Var x, Var gamma, Var beta, Array* running_mean,
                 Array* running_var, bool training, bool update_running,
                 double eps = 1e-5, double momentum = 0.9);

  // Training-mode Bernoulli mask scaled by 1/(1-rate); identity in
  // evaluation mode.
  Var dropout(Var x, double rate, bool training, Rng* rng);

  Var slice_rows(Var x, int r0, int r1);
  Var slice_cols(Var x, int c0, int c1);
  Var reverse_rows(Var x);
  Var stack_rows(const std::vector<Var>& rows);  // T rows of (1,D) -> (T,D)
  Var reshape(Var x, std::vector<int> shape);
  Var map_to_rows(Var x);                 // (C,H,W) -> (H, C*W)
  Var rows_to_map(Var x, int c, int w);   // (H, C*W) -> (C,H,W)
  Var sum_all(Var x);
  Var mean_all(Var x);

 private:
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  void check_same_tape(Var v) const;
  void accumulate(int id, const Array& g);

  std::vector<Node> nodes_;
  bool consumed_ = false;

  friend struct TapeAccess;
};

// Accumulate helper exposed to ops implemented outside this translation
// unit (CTC loss, masked reconstruction loss).
struct TapeAccess {
  static void accumulate(Tape& t, int id, const Array& g) {
    t.accumulate(id, g);
  }
};

// Adam with bias correction. Moment state persists across steps and is
// keyed per parameter; a parameter's step counter advances only when it
// is trainable, so freshly unfrozen parameters restart their bias
// correction.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(ParamStore& params);
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  struct Moments {
    Array m, v;
    int64_t t = 0;
  };
  double lr_, beta1_, beta2_, eps_;
  std::unordered_map<const Parameter*, Moments> state_;
};

// Central-difference gradient check. build must construct the scalar loss
// from the current parameter values on the given tape. Coordinates are
// sampled (up to max_coords per parameter) for large tensors. Returns the
// max over checked coordinates of |analytic - numeric| / max(1e-8,
// |numeric|).
double finite_difference_check(const std::function<Var(Tape&)>& build,
                               ParamStore& params, double h,
                               int max_coords_per_param, Rng& rng);

}  // namespace asrkit::ad

#endif  // ASRKIT_AUTODIFF_HPP_
