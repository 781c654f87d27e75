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

#include "asrkit/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <set>

namespace asrkit::ad {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                           Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// ---------------------------------------------------------------------------
// ParamStore

Parameter& ParamStore::add(const std::string& name, Array init,
                           bool trainable) {
  if (index_.count(name)) throw DataError("duplicate parameter: " + name);
  items_.push_back(std::make_unique<Parameter>(name, std::move(init),
                                               trainable));
  index_[name] = items_.size() - 1;
  return *items_.back();
}

Parameter* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : items_[it->second].get();
}

const Parameter* ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : items_[it->second].get();
}

Parameter& ParamStore::at(const std::string& name) {
  Parameter* p = find(name);
  if (!p) throw DataError("unknown parameter: " + name);
  return *p;
}

void ParamStore::zero_grad() {
  for (auto& p : items_) p->zero_grad();
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& p : items_) n += p->value.size();
  return n;
}

int64_t ParamStore::trainable_elements() const {
  int64_t n = 0;
  for (const auto& p : items_) {
    if (p->trainable) n += p->value.size();
  }
  return n;
}

// ---------------------------------------------------------------------------
// Tape basics

Var Tape::input(Array value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, nullptr, {}});
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(Parameter& p) {
  Node n;
  n.value = p.value;
  n.needs_grad = p.trainable;
  n.param = &p;
  Parameter* pp = &p;
  n.backward = [pp](Tape& t, int self) {
    if (pp->trainable) pp->grad.add_inplace(t.grad_buffer(self));
  };
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Array& Tape::grad_buffer(int id) {
  Node& n = node(id);
  if (!n.grad_ready) {
    n.grad = Array::zeros(n.value.shape());
    n.grad_ready = true;
  }
  return n.grad;
}

int Tape::record(Array value, const std::vector<int>& parents,
                 std::function<void(Tape&, int)> backward_fn) {
  bool needs = false;
  for (int p : parents) needs = needs || node(p).needs_grad;
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs;
  if (needs) n.backward = std::move(backward_fn);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size() - 1);
}

void Tape::check_same_tape(Var v) const {
  if (v.tape != this || v.id < 0 ||
      v.id >= static_cast<int>(nodes_.size())) {
    throw DataError("variable does not belong to this tape");
  }
}

void Tape::accumulate(int id, const Array& g) {
  if (!node(id).needs_grad) return;
  grad_buffer(id).add_inplace(g);
}

void Tape::backward(Var loss) {
  check_same_tape(loss);
  if (consumed_) throw DataError("tape already consumed");
  if (node(loss.id).value.size() != 1) {
    throw DataError("backward requires a scalar loss");
  }
  consumed_ = true;
  if (!node(loss.id).needs_grad) return;  // nothing trainable upstream
  grad_buffer(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = node(id);
    if (n.needs_grad && n.grad_ready && n.backward) n.backward(*this, id);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and linear ops

Var Tape::add(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Array& av = val(a);
  const Array& bv = val(b);
  if (!av.same_shape(bv)) throw DataError("add: shape mismatch");
  Array out = av;
  out.add_inplace(bv);
  int aid = a.id, bid = b.id;
  int id = record(std::move(out), {aid, bid}, [aid, bid](Tape& t, int self) {
    const Array& g = t.grad_buffer(self);
    t.accumulate(aid, g);
    t.accumulate(bid, g);
  });
  return as_var(id);
}

Var Tape::sub(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Array& av = val(a);
  const Array& bv = val(b);
  if (!av.same_shape(bv)) throw DataError("sub: shape mismatch");
  Array out = av;
  for (int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  int aid = a.id, bid = b.id;
  int id = record(std::move(out), {aid, bid}, [aid, bid](Tape& t, int self) {
    const Array& g = t.grad_buffer(self);
    t.accumulate(aid, g);
    if (t.wants_grad(bid)) {
      Array& gb = t.grad_buffer(bid);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return as_var(id);
}

Var Tape::mul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Array& av = val(a);
  const Array& bv = val(b);
  if (!av.same_shape(bv)) throw DataError("mul: shape mismatch");
  Array out = av;
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  int aid = a.id, bid = b.id;
  int id = record(std::move(out), {aid, bid}, [aid, bid](Tape& t, int self) {
    const Array& g = t.grad_buffer(self);
    if (t.wants_grad(aid)) {
      Array& ga = t.grad_buffer(aid);
      const Array& bvv = t.val(bid);
      for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bvv[i];
    }
    if (t.wants_grad(bid)) {
      Array& gb = t.grad_buffer(bid);
      const Array& avv = t.val(aid);
      for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * avv[i];
    }
  });
  return as_var(id);
}

Var Tape::scale(Var a, double s) {
  check_same_tape(a);
  Array out = val(a);
  for (int64_t i = 0; i < out.size(); ++i) out[i] *= s;
  int aid = a.id;
  int id = record(std::move(out), {aid}, [aid, s](Tape& t, int self) {
    if (!t.wants_grad(aid)) return;
    const Array& g = t.grad_buffer(self);
    Array& ga = t.grad_buffer(aid);
    for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
  return as_var(id);
}

Var Tape::matmul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  const Array& av = val(a);
  const Array& bv = val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DataError("matmul: incompatible shapes");
  }
  int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Array out({m, n});
  EMap(out.data(), m, n).noalias() =
      ECMap(av.data(), m, k) * ECMap(bv.data(), k, n);
  int aid = a.id, bid = b.id;
  int id = record(std::move(out), {aid, bid},
                  [aid, bid, m, k, n](Tape& t, int self) {
    ECMap g(t.grad_buffer(self).data(), m, n);
    if (t.wants_grad(aid)) {
      EMap(t.grad_buffer(aid).data(), m, k).noalias() +=
          g * ECMap(t.val(bid).data(), k, n).transpose();
    }
    if (t.wants_grad(bid)) {
      EMap(t.grad_buffer(bid).data(), k, n).noalias() +=
          ECMap(t.val(aid).data(), m, k).transpose() * g;
    }
  });
  return as_var(id);
}

Var Tape::bias_add(Var x, Var b) {
  check_same_tape(x);
  check_same_tape(b);
  const Array& xv = val(x);
  const Array& bv = val(b);
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw DataError("bias_add: shape mismatch");
  }
  int m = xv.dim(0), n = xv.dim(1);
  Array out = xv;
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.at(i, j) += bv[j];
  }
  int xid = x.id, bid = b.id;
  int id = record(std::move(out), {xid, bid},
                  [xid, bid, m, n](Tape& t, int self) {
    const Array& g = t.grad_buffer(self);
    t.accumulate(xid, g);
    if (t.wants_grad(bid)) {
      Array& gb = t.grad_buffer(bid);
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) gb[j] += g.at(i, j);
      }
    }
  });
  return as_var(id);
}

Var Tape::tanh_op(Var x) {
  check_same_tape(x);
  Array out = val(x);
  for (int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
  int xid = x.id;
  int id = record(std::move(out), {xid}, [xid](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    const Array& g = t.grad_buffer(self);
    const Array& y = t.val(self);
    Array& gx = t.grad_buffer(xid);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
  return as_var(id);
}

Var Tape::sigmoid(Var x) {
  check_same_tape(x);
  Array out = val(x);
  for (int64_t i = 0; i < out.size(); ++i) {
    out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  }
  int xid = x.id;
  int id = record(std::move(out), {xid}, [xid](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    const Array& g = t.grad_buffer(self);
    const Array& y = t.val(self);
    Array& gx = t.grad_buffer(xid);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
  return as_var(id);
}

Var Tape::softmax_rows(Var x) {
  check_same_tape(x);
  const Array& xv = val(x);
  if (xv.rank() != 2) throw DataError("softmax_rows: expects a matrix");
  int m = xv.dim(0), n = xv.dim(1);
  Array out({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = xv.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, xv.at(i, j));
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      double e = std::exp(xv.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= sum;
  }
  int xid = x.id;
  int id = record(std::move(out), {xid}, [xid, m, n](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    const Array& g = t.grad_buffer(self);
    const Array& y = t.val(self);
    Array& gx = t.grad_buffer(xid);
    for (int i = 0; i < m; ++i) {
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
      for (int j = 0; j < n; ++j) {
        gx.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
      }
    }
  });
  return as_var(id);
}

Var Tape::concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw DataError("concat_channels: empty input list");
  for (Var v : xs) check_same_tape(v);
  const Array& first = val(xs[0]);
  if (first.rank() != 3) throw DataError("concat_channels: expects rank-3");
  int h = first.dim(1), w = first.dim(2);
  int ctotal = 0;
  std::vector<int> parents, channels;
  for (Var v : xs) {
    const Array& a = val(v);
    if (a.rank() != 3 || a.dim(1) != h || a.dim(2) != w) {
      throw DataError("concat_channels: spatial extents differ");
    }
    ctotal += a.dim(0);
    parents.push_back(v.id);
    channels.push_back(a.dim(0));
  }
  Array out({ctotal, h, w});
  int64_t plane = static_cast<int64_t>(h) * w;
  int64_t off = 0;
  for (Var v : xs) {
    const Array& a = val(v);
    std::copy(a.data(), a.data() + a.size(), out.data() + off);
    off += a.size();
  }
  int id = record(std::move(out), parents,
                  [parents, channels, plane](Tape& t, int self) {
    const Array& g = t.grad_buffer(self);
    int64_t off2 = 0;
    for (size_t i = 0; i < parents.size(); ++i) {
      int64_t len = channels[i] * plane;
      if (t.wants_grad(parents[i])) {
        Array& gp = t.grad_buffer(parents[i]);
        for (int64_t j = 0; j < len; ++j) gp[j] += g[off2 + j];
      }
      off2 += len;
    }
  });
  return as_var(id);
}

// ---------------------------------------------------------------------------
// Convolution ('same' padding, square stride). All three primitives share
// the chunked im2col geometry so the transpose op is the exact adjoint.

namespace {

struct ConvGeom {
  int cin, h, w;       // input map
  int cout, kh, kw;    // kernel
  int stride;
  int ho, wo;          // output map
  int pad_top, pad_left;
};

ConvGeom make_geom(const std::vector<int>& xshape,
                   const std::vector<int>& wshape, int stride) {
  if (stride < 1) throw DataError("conv: stride must be positive");
  ConvGeom g;
  g.cin = xshape[0];
  g.h = xshape[1];
  g.w = xshape[2];
  g.cout = wshape[0];
  g.kh = wshape[2];
  g.kw = wshape[3];
  g.stride = stride;
  if (wshape[1] != g.cin) throw DataError("conv: channel mismatch");
  g.ho = (g.h + stride - 1) / stride;
  g.wo = (g.w + stride - 1) / stride;
  int pad_h = std::max(0, (g.ho - 1) * stride + g.kh - g.h);
  int pad_w = std::max(0, (g.wo - 1) * stride + g.kw - g.w);
  g.pad_top = pad_h / 2;   // extra padding goes to the trailing side
  g.pad_left = pad_w / 2;
  return g;
}

constexpr int kConvChunk = 2048;  // output positions per im2col block

void fill_col(const ConvGeom& g, const double* x, int p0, int pc,
              double* col) {
  // col is (cin*kh*kw) x pc row-major.
  int64_t plane = static_cast<int64_t>(g.h) * g.w;
  int row = 0;
  for (int ci = 0; ci < g.cin; ++ci) {
    const double* xc = x + ci * plane;
    for (int ki = 0; ki < g.kh; ++ki) {
      for (int kj = 0; kj < g.kw; ++kj, ++row) {
        double* dst = col + static_cast<int64_t>(row) * pc;
        for (int p = 0; p < pc; ++p) {
          int pos = p0 + p;
          int oy = pos / g.wo, ox = pos % g.wo;
          int iy = oy * g.stride - g.pad_top + ki;
          int ix = ox * g.stride - g.pad_left + kj;
          dst[p] = (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w)
                       ? xc[static_cast<int64_t>(iy) * g.w + ix]
                       : 0.0;
        }
      }
    }
  }
}

void conv_forward(const Array& x, const Array& w, int stride, Array* out) {
  ConvGeom g = make_geom(x.shape(), w.shape(), stride);
  *out = Array::zeros({g.cout, g.ho, g.wo});
  int K = g.cin * g.kh * g.kw;
  int P = g.ho * g.wo;
  std::vector<double> col;
  ECMap wmat(w.data(), g.cout, K);
  for (int p0 = 0; p0 < P; p0 += kConvChunk) {
    int pc = std::min(kConvChunk, P - p0);
    col.assign(static_cast<size_t>(K) * pc, 0.0);
    fill_col(g, x.data(), p0, pc, col.data());
    EMat y = wmat * ECMap(col.data(), K, pc);
    for (int co = 0; co < g.cout; ++co) {
      double* dst = out->data() + static_cast<int64_t>(co) * P + p0;
      for (int p = 0; p < pc; ++p) dst[p] = y(co, p);
    }
  }
}

void conv_grad_w(const Array& x, const Array& gout, int stride, Array* dw) {
  ConvGeom g = make_geom(x.shape(), dw->shape(), stride);
  int K = g.cin * g.kh * g.kw;
  int P = g.ho * g.wo;
  std::vector<double> col;
  EMap dwmat(dw->data(), g.cout, K);
  for (int p0 = 0; p0 < P; p0 += kConvChunk) {
    int pc = std::min(kConvChunk, P - p0);
    col.assign(static_cast<size_t>(K) * pc, 0.0);
    fill_col(g, x.data(), p0, pc, col.data());
    EMat gchunk(g.cout, pc);
    for (int co = 0; co < g.cout; ++co) {
      const double* src = gout.data() + static_cast<int64_t>(co) * P + p0;
      for (int p = 0; p < pc; ++p) gchunk(co, p) = src[p];
    }
    dwmat.noalias() +=
        gchunk * ECMap(col.data(), K, pc).transpose();
  }
}

void conv_grad_x(const Array& gout, const Array& w, int stride, Array* dx) {
  ConvGeom g = make_geom(dx->shape(), w.shape(), stride);
  if (gout.dim(0) != g.cout || gout.dim(1) != g.ho || gout.dim(2) != g.wo) {
    throw DataError("conv: gradient extent mismatch");
  }
  int K = g.cin * g.kh * g.kw;
  int P = g.ho * g.wo;
  int64_t plane = static_cast<int64_t>(g.h) * g.w;
  ECMap wmat(w.data(), g.cout, K);
  for (int p0 = 0; p0 < P; p0 += kConvChunk) {
    int pc = std::min(kConvChunk, P - p0);
    EMat gchunk(g.cout, pc);
    for (int co = 0; co < g.cout; ++co) {
      const double* src = gout.data() + static_cast<int64_t>(co) * P + p0;
      for (int p = 0; p < pc; ++p) gchunk(co, p) = src[p];
    }
    EMat dcol = wmat.transpose() * gchunk;  // K x pc
    int row = 0;
    for (int ci = 0; ci < g.cin; ++ci) {
      double* xc = dx->data() + ci * plane;
      for (int ki = 0; ki < g.kh; ++ki) {
        for (int kj = 0; kj < g.kw; ++kj, ++row) {
          for (int p = 0; p < pc; ++p) {
            int pos = p0 + p;
            int oy = pos / g.wo, ox = pos % g.wo;
            int iy = oy * g.stride - g.pad_top + ki;
            int ix = ox * g.stride - g.pad_left + kj;
            if (iy >= 0 && iy < g.h && ix >= 0 && ix < g.w) {
              xc[static_cast<int64_t>(iy) * g.w + ix] += dcol(row, p);
            }
          }
        }
      }
    }
  }
}

void add_channel_bias(Array* map, const Array& bias) {
  int c = map->dim(0);
  int64_t plane = static_cast<int64_t>(map->dim(1)) * map->dim(2);
  for (int ci = 0; ci < c; ++ci) {
    double* dst = map->data() + ci * plane;
    for (int64_t i = 0; i < plane; ++i) dst[i] += bias[ci];
  }
}

}  // namespace

Var Tape::conv2d(Var x, Var w, Var bias, int stride) {
  check_same_tape(x);
  check_same_tape(w);
  const Array& xv = val(x);
  const Array& wv = val(w);
  if (xv.rank() != 3 || wv.rank() != 4) {
    throw DataError("conv2d: expects (C,H,W) input and (Cout,Cin,kh,kw) kernel");
  }
  Array out;
  conv_forward(xv, wv, stride, &out);
  int bid = -1;
  if (bias.valid()) {
    check_same_tape(bias);
    const Array& bv = val(bias);
    if (bv.rank() != 1 || bv.dim(0) != wv.dim(0)) {
      throw DataError("conv2d: bias shape mismatch");
    }
    add_channel_bias(&out, bv);
    bid = bias.id;
  }
  int xid = x.id, wid = w.id;
  int id = record(std::move(out), bid >= 0
                      ? std::vector<int>{xid, wid, bid}
                      : std::vector<int>{xid, wid},
                  [xid, wid, bid, stride](Tape& t, int self) {
    const Array& g = t.grad_buffer(self);
    if (t.wants_grad(wid)) {
      conv_grad_w(t.val(xid), g, stride, &t.grad_buffer(wid));
    }
    if (t.wants_grad(xid)) {
      conv_grad_x(g, t.val(wid), stride, &t.grad_buffer(xid));
    }
    if (bid >= 0 && t.wants_grad(bid)) {
      Array& gb = t.grad_buffer(bid);
      int c = g.dim(0);
      int64_t plane = static_cast<int64_t>(g.dim(1)) * g.dim(2);
      for (int ci = 0; ci < c; ++ci) {
        const double* src = g.data() + ci * plane;
        for (int64_t i = 0; i < plane; ++i) gb[ci] += src[i];
      }
    }
  });
  return as_var(id);
}

Var Tape::conv2d_transpose(Var x, Var w, Var bias, int stride, int out_h,
                           int out_w) {
  check_same_tape(x);
  check_same_tape(w);
  const Array& xv = val(x);
  const Array& wv = val(w);
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(0) != xv.dim(0)) {
    throw DataError(
        "conv2d_transpose: expects (Cin,H,W) input and (Cin,Cout,kh,kw)");
  }
  if ((out_h + stride - 1) / stride != xv.dim(1) ||
      (out_w + stride - 1) / stride != xv.dim(2)) {
    throw DataError("conv2d_transpose: temporal extent mismatch");
  }
  int cout = wv.dim(1);
  // Forward = adjoint of the stride-s 'same' conv mapping the output map
  // back to the input map.
  Array out = Array::zeros({cout, out_h, out_w});
  conv_grad_x(xv, wv, stride, &out);
  int bid = -1;
  if (bias.valid()) {
    check_same_tape(bias);
    const Array& bv = val(bias);
    if (bv.rank() != 1 || bv.dim(0) != cout) {
      throw DataError("conv2d_transpose: bias shape mismatch");
    }
    add_channel_bias(&out, bv);
    bid = bias.id;
  }
  int xid = x.id, wid = w.id;
  int id = record(std::move(out), bid >= 0
                      ? std::vector<int>{xid, wid, bid}
                      : std::vector<int>{xid, wid},
                  [xid, wid, bid, stride](Tape& t, int self) {
    const Array& g = t.grad_buffer(self);
    if (t.wants_grad(xid)) {
      Array tmp;
      conv_forward(g, t.val(wid), stride, &tmp);
      t.grad_buffer(xid).add_inplace(tmp);
    }
    if (t.wants_grad(wid)) {
      conv_grad_w(g, t.val(xid), stride, &t.grad_buffer(wid));
    }
    if (bid >= 0 && t.wants_grad(bid)) {
      Array& gb = t.grad_buffer(bid);
      int c = g.dim(0);
      int64_t plane = static_cast<int64_t>(g.dim(1)) * g.dim(2);
      for (int ci = 0; ci < c; ++ci) {
        const double* src = g.data() + ci * plane;
        for (int64_t i = 0; i < plane; ++i) gb[ci] += src[i];
      }
    }
  });
  return as_var(id);
}

// ---------------------------------------------------------------------------
// Batch normalization

namespace {

struct BnLayout {
  int channels;
  int64_t n;  // elements per channel
  // iterate(c, f): calls f(index) for every element of channel c
};

// Channel axis 0 for maps, last axis for matrices.
void bn_layout_check(const Array& x, int* channels, int64_t* per_channel) {
  if (x.rank() == 3) {
    *channels = x.dim(0);
    *per_channel = static_cast<int64_t>(x.dim(1)) * x.dim(2);
  } else if (x.rank() == 2) {
    *channels = x.dim(1);
    *per_channel = x.dim(0);
  } else {
    throw DataError("batch_norm: expects rank 2 or 3");
  }
}

template <typename F>
void bn_for_each(const Array& x, int c, F&& f) {
  if (x.rank() == 3) {
    int64_t plane = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    int64_t base = c * plane;
    for (int64_t i = 0; i < plane; ++i) f(base + i);
  } else {
    int rows = x.dim(0), cols = x.dim(1);
    for (int i = 0; i < rows; ++i) f(static_cast<int64_t>(i) * cols + c);
  }
}

}  // namespace

Var Tape::batch_norm(Var x, Var gamma, Var beta, Array* running_mean,
                     Array* running_var, bool training, bool update_running,
                     double eps, double momentum) {
  check_same_tape(x);
  check_same_tape(gamma);
  check_same_tape(beta);
  const Array& xv = val(x);
  int channels;
  int64_t per_channel;
  bn_layout_check(xv, &channels, &per_channel);
  if (val(gamma).size() != channels || val(beta).size() != channels) {
    throw DataError("batch_norm: scale/shift size mismatch");
  }
  if (!training && (!running_mean || !running_var)) {
    throw DataError("batch_norm: inference mode requires running statistics");
  }

  auto mu = std::make_shared<std::vector<double>>(channels);
  auto inv_std = std::make_shared<std::vector<double>>(channels);
  const Array& gv = val(gamma);
  const Array& bv = val(beta);
  Array out(xv.shape());
  for (int c = 0; c < channels; ++c) {
    double m, v;
    if (training) {
      double sum = 0.0, sq = 0.0;
      bn_for_each(xv, c, [&](int64_t i) { sum += xv[i]; });
      m = sum / static_cast<double>(per_channel);
      bn_for_each(xv, c, [&](int64_t i) {
        double d = xv[i] - m;
        sq += d * d;
      });
      v = sq / static_cast<double>(per_channel);
      if (update_running && running_mean && running_var) {
        (*running_mean)[c] = momentum * (*running_mean)[c] + (1 - momentum) * m;
        (*running_var)[c] = momentum * (*running_var)[c] + (1 - momentum) * v;
      }
    } else {
      m = (*running_mean)[c];
      v = (*running_var)[c];
    }
    double is = 1.0 / std::sqrt(v + eps);
    (*mu)[c] = m;
    (*inv_std)[c] = is;
    double gc = gv[c], bc = bv[c];
    bn_for_each(xv, c, [&](int64_t i) {
      out[i] = gc * (xv[i] - m) * is + bc;
    });
  }

  int xid = x.id, gid = gamma.id, bid = beta.id;
  int id = record(std::move(out), {xid, gid, bid},
                  [xid, gid, bid, mu, inv_std, channels, per_channel,
                   training](Tape& t, int self) {
    const Array& g = t.grad_buffer(self);
    const Array& xvv = t.val(xid);
    const Array& gvv = t.val(gid);
    for (int c = 0; c < channels; ++c) {
      double m = (*mu)[c], is = (*inv_std)[c], gc = gvv[c];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      bn_for_each(xvv, c, [&](int64_t i) {
        double xhat = (xvv[i] - m) * is;
        sum_dy += g[i];
        sum_dy_xhat += g[i] * xhat;
      });
      if (t.wants_grad(gid)) t.grad_buffer(gid)[c] += sum_dy_xhat;
      if (t.wants_grad(bid)) t.grad_buffer(bid)[c] += sum_dy;
      if (t.wants_grad(xid)) {
        Array& gx = t.grad_buffer(xid);
        double n = static_cast<double>(per_channel);
        if (training) {
          bn_for_each(xvv, c, [&](int64_t i) {
            double xhat = (xvv[i] - m) * is;
            gx[i] += gc * is *
                     (g[i] - sum_dy / n - xhat * sum_dy_xhat / n);
          });
        } else {
          bn_for_each(xvv, c, [&](int64_t i) { gx[i] += gc * is * g[i]; });
        }
      }
    }
  });
  return as_var(id);
}

Var Tape::dropout(Var x, double rate, bool training, Rng* rng) {
  check_same_tape(x);
  if (rate < 0.0 || rate >= 1.0) throw DataError("dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return x;  // identity in evaluation mode
  if (!rng) throw DataError("dropout: training mode requires an rng");
  const Array& xv = val(x);
  auto mask = std::make_shared<Array>(Array::zeros(xv.shape()));
  double keep_scale = 1.0 / (1.0 - rate);
  Array out(xv.shape());
  for (int64_t i = 0; i < xv.size(); ++i) {
    double keep = (rng->next_double() >= rate) ? keep_scale : 0.0;
    (*mask)[i] = keep;
    out[i] = xv[i] * keep;
  }
  int xid = x.id;
  int id = record(std::move(out), {xid}, [xid, mask](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    const Array& g = t.grad_buffer(self);
    Array& gx = t.grad_buffer(xid);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
  return as_var(id);
}

// ---------------------------------------------------------------------------
// Structural ops

Var Tape::slice_rows(Var x, int r0, int r1) {
  check_same_tape(x);
  const Array& xv = val(x);
  if (xv.rank() != 2 || r0 < 0 || r1 > xv.dim(0) || r0 >= r1) {
    throw DataError("slice_rows: bad range");
  }
  int n = xv.dim(1);
  Array out({r1 - r0, n});
  std::copy(xv.data() + static_cast<int64_t>(r0) * n,
            xv.data() + static_cast<int64_t>(r1) * n, out.data());
  int xid = x.id;
  int id = record(std::move(out), {xid}, [xid, r0, n](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    const Array& g = t.grad_buffer(self);
    Array& gx = t.grad_buffer(xid);
    double* dst = gx.data() + static_cast<int64_t>(r0) * n;
    for (int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
  return as_var(id);
}

Var Tape::slice_cols(Var x, int c0, int c1) {
  check_same_tape(x);
  const Array& xv = val(x);
  if (xv.rank() != 2 || c0 < 0 || c1 > xv.dim(1) || c0 >= c1) {
    throw DataError("slice_cols: bad range");
  }
  int m = xv.dim(0), n = xv.dim(1), w = c1 - c0;
  Array out({m, w});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < w; ++j) out.at(i, j) = xv.at(i, c0 + j);
  }
  int xid = x.id;
  int id = record(std::move(out), {xid}, [xid, c0, n, w, m](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    const Array& g = t.grad_buffer(self);
    Array& gx = t.grad_buffer(xid);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < w; ++j) {
        gx[static_cast<int64_t>(i) * n + c0 + j] += g.at(i, j);
      }
    }
  });
  return as_var(id);
}

Var Tape::reverse_rows(Var x) {
  check_same_tape(x);
  const Array& xv = val(x);
  if (xv.rank() != 2) throw DataError("reverse_rows: expects a matrix");
  int m = xv.dim(0), n = xv.dim(1);
  Array out({m, n});
  for (int i = 0; i < m; ++i) {
    std::copy(xv.data() + static_cast<int64_t>(i) * n,
              xv.data() + static_cast<int64_t>(i + 1) * n,
              out.data() + static_cast<int64_t>(m - 1 - i) * n);
  }
  int xid = x.id;
  int id = record(std::move(out), {xid}, [xid, m, n](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    const Array& g = t.grad_buffer(self);
    Array& gx = t.grad_buffer(xid);
    for (int i = 0; i < m; ++i) {
      const double* src = g.data() + static_cast<int64_t>(m - 1 - i) * n;
      double* dst = gx.data() + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
  return as_var(id);
}

Var Tape::stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw DataError("stack_rows: empty input list");
  std::vector<int> parents;
  int n = -1;
  for (Var v : rows) {
    check_same_tape(v);
    const Array& a = val(v);
    if (a.rank() != 2 || a.dim(0) != 1) {
      throw DataError("stack_rows: expects (1,D) rows");
    }
    if (n < 0) n = a.dim(1);
    if (a.dim(1) != n) throw DataError("stack_rows: widths differ");
    parents.push_back(v.id);
  }
  int t_len = static_cast<int>(rows.size());
  Array out({t_len, n});
  for (int i = 0; i < t_len; ++i) {
    const Array& a = val(rows[static_cast<size_t>(i)]);
    std::copy(a.data(), a.data() + n, out.data() + static_cast<int64_t>(i) * n);
  }
  int id = record(std::move(out), parents, [parents, n](Tape& t, int self) {
    const Array& g = t.grad_buffer(self);
    for (size_t i = 0; i < parents.size(); ++i) {
      if (!t.wants_grad(parents[i])) continue;
      Array& gp = t.grad_buffer(parents[i]);
      const double* src = g.data() + static_cast<int64_t>(i) * n;
      for (int j = 0; j < n; ++j) gp[j] += src[j];
    }
  });
  return as_var(id);
}

Var Tape::reshape(Var x, std::vector<int> shape) {
  check_same_tape(x);
  const Array& xv = val(x);
  int64_t n = 1;
  for (int d : shape) n *= d;
  if (n != xv.size()) throw DataError("reshape: element count mismatch");
  Array out = Array::from(std::move(shape),
                          std::vector<double>(xv.data(), xv.data() + xv.size()));
  int xid = x.id;
  int id = record(std::move(out), {xid}, [xid](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    const Array& g = t.grad_buffer(self);
    Array& gx = t.grad_buffer(xid);
    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return as_var(id);
}

Var Tape::map_to_rows(Var x) {
  check_same_tape(x);
  const Array& xv = val(x);
  if (xv.rank() != 3) throw DataError("map_to_rows: expects (C,H,W)");
  int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Array out({h, c * w});
  for (int ci = 0; ci < c; ++ci) {
    for (int hi = 0; hi < h; ++hi) {
      for (int wi = 0; wi < w; ++wi) {
        out.at(hi, ci * w + wi) = xv.at(ci, hi, wi);
      }
    }
  }
  int xid = x.id;
  int id = record(std::move(out), {xid}, [xid, c, h, w](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    const Array& g = t.grad_buffer(self);
    Array& gx = t.grad_buffer(xid);
    for (int ci = 0; ci < c; ++ci) {
      for (int hi = 0; hi < h; ++hi) {
        for (int wi = 0; wi < w; ++wi) {
          gx.at(ci, hi, wi) += g.at(hi, ci * w + wi);
        }
      }
    }
  });
  return as_var(id);
}

Var Tape::rows_to_map(Var x, int c, int w) {
  check_same_tape(x);
  const Array& xv = val(x);
  if (xv.rank() != 2 || xv.dim(1) != c * w) {
    throw DataError("rows_to_map: width must equal channels*freq");
  }
  int h = xv.dim(0);
  Array out({c, h, w});
  for (int ci = 0; ci < c; ++ci) {
    for (int hi = 0; hi < h; ++hi) {
      for (int wi = 0; wi < w; ++wi) {
        out.at(ci, hi, wi) = xv.at(hi, ci * w + wi);
      }
    }
  }
  int xid = x.id;
  int id = record(std::move(out), {xid}, [xid, c, h, w](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    const Array& g = t.grad_buffer(self);
    Array& gx = t.grad_buffer(xid);
    for (int ci = 0; ci < c; ++ci) {
      for (int hi = 0; hi < h; ++hi) {
        for (int wi = 0; wi < w; ++wi) {
          gx.at(hi, ci * w + wi) += g.at(ci, hi, wi);
        }
      }
    }
  });
  return as_var(id);
}

Var Tape::sum_all(Var x) {
  check_same_tape(x);
  const Array& xv = val(x);
  double s = 0.0;
  for (int64_t i = 0; i < xv.size(); ++i) s += xv[i];
  int xid = x.id;
  int id = record(Array::from({1}, {s}), {xid}, [xid](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    double g = t.grad_buffer(self)[0];
    Array& gx = t.grad_buffer(xid);
    for (int64_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
  return as_var(id);
}

Var Tape::mean_all(Var x) {
  check_same_tape(x);
  const Array& xv = val(x);
  double s = 0.0;
  for (int64_t i = 0; i < xv.size(); ++i) s += xv[i];
  double n = static_cast<double>(xv.size());
  int xid = x.id;
  int id = record(Array::from({1}, {s / n}), {xid},
                  [xid, n](Tape& t, int self) {
    if (!t.wants_grad(xid)) return;
    double g = t.grad_buffer(self)[0] / n;
    Array& gx = t.grad_buffer(xid);
    for (int64_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
  return as_var(id);
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (lr <= 0) throw UsageError("adam: learning rate must be positive");
}

void Adam::step(ParamStore& params) {
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (!p.trainable) continue;
    if (!p.grad.all_finite()) {
      throw NumericError("adam: non-finite gradient for " + p.name);
    }
    Moments& st = state_[&p];
    if (st.m.empty()) {
      st.m = Array::zeros(p.value.shape());
      st.v = Array::zeros(p.value.shape());
    }
    st.t += 1;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(st.t));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(st.t));
    for (int64_t j = 0; j < p.value.size(); ++j) {
      double g = p.grad[j];
      st.m[j] = beta1_ * st.m[j] + (1.0 - beta1_) * g;
      st.v[j] = beta2_ * st.v[j] + (1.0 - beta2_) * g * g;
      double mhat = st.m[j] / bc1;
      double vhat = st.v[j] / bc2;
      p.value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

double finite_difference_check(const std::function<Var(Tape&)>& build,
                               ParamStore& params, double h,
                               int max_coords_per_param, Rng& rng) {
  if (h <= 0) throw UsageError("finite_difference_check: h must be positive");
  params.zero_grad();
  {
    Tape t;
    Var loss = build(t);
    t.backward(loss);
  }
  std::vector<Array> analytic;
  analytic.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) analytic.push_back(params[i].grad);

  auto eval = [&build]() {
    Tape t;
    Var loss = build(t);
    return t.val(loss)[0];
  };

  double max_rel = 0.0;
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (!p.trainable) continue;
    std::vector<int64_t> coords;
    if (p.value.size() <= max_coords_per_param) {
      for (int64_t c = 0; c < p.value.size(); ++c) coords.push_back(c);
    } else {
      std::set<int64_t> picked;
      while (static_cast<int>(picked.size()) < max_coords_per_param) {
        picked.insert(static_cast<int64_t>(
            rng.next_below(static_cast<uint64_t>(p.value.size()))));
      }
      coords.assign(picked.begin(), picked.end());
    }
    for (int64_t c : coords) {
      double v0 = p.value[c];
      p.value[c] = v0 + h;
      double fp = eval();
      p.value[c] = v0 - h;
      double fm = eval();
      p.value[c] = v0;
      double numeric = (fp - fm) / (2.0 * h);
      double rel = std::abs(analytic[i][c] - numeric) /
                   std::max(1e-8, std::abs(numeric));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace asrkit::ad
