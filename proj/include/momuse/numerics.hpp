// Copyright 2026 The momuse Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Dense tensors and a tape-based reverse-mode differentiator.
//
// Everything the network computes is expressed through the ops in this
// header. Each op evaluates eagerly and, when the tape is recording and an
// input requires a gradient, stores a closure that maps the output gradient
// back onto its inputs. Reverse replay is strictly LIFO.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "momuse/error.hpp"

namespace momuse {

namespace detail {

/// Accumulator for reductions: double, or T itself when T is wider.
template <typename T>
using acc_t = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

}  // namespace detail

/// Row-major dense array. Rank 2 ([rows x cols]) is the common case; biases
/// are rank 1 and convolution kernels rank 3.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(detail::product(shape_), fill) {}

  explicit Tensor(std::size_t rows, std::size_t cols, T fill = T(0))
      : Tensor(std::vector<std::size_t>{rows, cols}, fill) {}

  explicit Tensor(std::initializer_list<std::size_t> shape, T fill = T(0))
      : Tensor(std::vector<std::size_t>(shape), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (detail::product(shape_) != data_.size()) {
      throw DimensionError("tensor: shape " + detail::shape_str(shape_) +
                           " does not match " + std::to_string(data_.size()) +
                           " values");
    }
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("tensor: ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor column(std::initializer_list<T> values) {
    return Tensor({values.size(), 1}, std::vector<T>(values));
  }

  static Tensor row(std::initializer_list<T> values) {
    return Tensor({1, values.size()}, std::vector<T>(values));
  }

  static Tensor row(std::span<const T> values) {
    return Tensor({1, values.size()}, std::vector<T>(values.begin(), values.end()));
  }

  static Tensor scalar(T value) { return Tensor({1, 1}, std::vector<T>{value}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const {
    return shape_.size() < 2 ? 1 : data_.size() / std::max<std::size_t>(shape_[0], 1);
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  /// Pointer to the start of row r of a rank-2 tensor.
  T* row_ptr(std::size_t r) { return data_.data() + r * cols(); }
  const T* row_ptr(std::size_t r) const { return data_.data() + r * cols(); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;

/// Learnable weight with its accumulated gradient.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Tensor<T>(value.shape());
    grad.fill(T(0));
  }
};

template <typename T>
void zero_grads(std::span<Param<T>* const> params) {
  for (auto* p : params) p->zero_grad();
}

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  bool valid() const { return tape != nullptr; }
};

/// Single-owner record of executed ops. Not thread-safe.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
    return Var<T>{this, nodes_.size() - 1};
  }

  /// Leaf bound to a parameter. Repeated calls return the same node.
  Var<T> param(Param<T>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var<T>{this, it->second};
    const bool rg = recording_ && p.trainable;
    nodes_.push_back(Node{p.value, {}, {}, rg ? &p : nullptr, rg});
    param_ids_.emplace(&p, nodes_.size() - 1);
    return Var<T>{this, nodes_.size() - 1};
  }

  /// Appends an op result. The closure is kept only when some input needs a
  /// gradient and the tape is recording.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    bool rg = false;
    if (recording_) {
      for (const auto& in : inputs) {
        if (in.tape != this) throw ContractError("tape: input recorded on another tape");
        rg = rg || nodes_[in.id].requires_grad;
      }
    }
    nodes_.push_back(Node{std::move(value), {}, rg ? std::move(backward) : Backward{}, nullptr, rg});
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(Var<T> v) const { return requires_grad(v.id); }

  /// Gradient buffer of a node, zero-allocated on first use.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Gradient of a node after backward(); empty if nothing flowed into it.
  const Tensor<T>& grad_of(Var<T> v) const { return nodes_.at(v.id).grad; }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
    if (value(loss.id).size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          detail::shape_str(value(loss.id).shape()));
    }
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id)[0] = T(1);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) {
        Tensor<T>& pg = n.param->grad;
        if (!pg.same_shape(n.value)) pg = Tensor<T>(n.value.shape());
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Backward backward;
    Param<T>* param = nullptr;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Param<T>*, std::size_t> param_ids_;
  bool recording_;
};

namespace detail {

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
  if (t.ndim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
void axpy(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
detail::acc_t<T> dot(const T* x, const T* y, std::size_t n) {
  detail::acc_t<T> acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<detail::acc_t<T>>(x[i]) * static_cast<detail::acc_t<T>>(y[i]);
  return acc;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Affine maps and convolutions
// ---------------------------------------------------------------------------

/// out[:, l] = w * x[:, l] (+ b).  x: [in x L], w: [out x in], b: [out].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, const Var<T>* b = nullptr) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  detail::require_rank2(xv, "linear");
  detail::require_rank2(wv, "linear");
  const std::size_t in = xv.rows(), len = xv.cols(), out = wv.rows();
  if (wv.cols() != in) {
    throw DimensionError("linear: weight " + detail::shape_str(wv.shape()) + " vs input " +
                         detail::shape_str(xv.shape()));
  }
  if (b && b->value().size() != out) {
    throw DimensionError("linear: bias has " + std::to_string(b->value().size()) +
                         " entries, expected " + std::to_string(out));
  }
  Tensor<T> y(out, len);
  for (std::size_t o = 0; o < out; ++o) {
    T* yr = y.row_ptr(o);
    if (b) std::fill(yr, yr + len, b->value()[o]);
    for (std::size_t i = 0; i < in; ++i) detail::axpy(wv(o, i), xv.row_ptr(i), yr, len);
  }
  Tape<T>& tape = *x.tape;
  const std::size_t xid = x.id, wid = w.id, bid = b ? b->id : 0;
  const bool has_bias = b != nullptr;
  auto bw = [xid, wid, bid, has_bias, in, out, len](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& xv = tp.value(xid);
    const Tensor<T>& wv = tp.value(wid);
    if (tp.requires_grad(xid)) {
      Tensor<T>& gx = tp.grad(xid);
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i) detail::axpy(wv(o, i), g.row_ptr(o), gx.row_ptr(i), len);
    }
    if (tp.requires_grad(wid)) {
      Tensor<T>& gw = tp.grad(wid);
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i)
          gw(o, i) += static_cast<T>(detail::dot(g.row_ptr(o), xv.row_ptr(i), len));
    }
    if (has_bias && tp.requires_grad(bid)) {
      Tensor<T>& gb = tp.grad(bid);
      for (std::size_t o = 0; o < out; ++o) {
        const T* gr = g.row_ptr(o);
        detail::acc_t<T> acc = 0.0;
        for (std::size_t l = 0; l < len; ++l) acc += gr[l];
        gb[o] += static_cast<T>(acc);
      }
    }
  };
  if (b) return tape.record(std::move(y), {x, w, *b}, bw);
  return tape.record(std::move(y), {x, w}, bw);
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return linear(x, w, &b);
}

/// Valid (unpadded) strided correlation. x: [C_in x T], w: [C_out x C_in x K].
/// Output length floor((T - K) / stride) + 1.
template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, std::size_t stride) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  detail::require_rank2(xv, "conv1d");
  if (wv.ndim() != 3) throw DimensionError("conv1d: kernel must be [C_out x C_in x K]");
  if (stride < 1) throw ContractError("conv1d: stride must be >= 1");
  const std::size_t cin = xv.rows(), n = xv.cols();
  const std::size_t cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != cin) {
    throw DimensionError("conv1d: kernel " + detail::shape_str(wv.shape()) + " vs input " +
                         detail::shape_str(xv.shape()));
  }
  if (n < k) {
    throw InputTooShortError("conv1d: input length " + std::to_string(n) +
                             " shorter than kernel " + std::to_string(k));
  }
  const std::size_t len = (n - k) / stride + 1;
  Tensor<T> y(cout, len);
  for (std::size_t o = 0; o < cout; ++o) {
    T* yr = y.row_ptr(o);
    for (std::size_t i = 0; i < cin; ++i) {
      const T* xr = xv.row_ptr(i);
      const T* wk = wv.data() + (o * cin + i) * k;
      for (std::size_t l = 0; l < len; ++l) {
        const T* xs = xr + l * stride;
        T acc = T(0);
        for (std::size_t j = 0; j < k; ++j) acc += wk[j] * xs[j];
        yr[l] += acc;
      }
    }
  }
  const std::size_t xid = x.id, wid = w.id;
  return x.tape->record(std::move(y), {x, w},
                        [xid, wid, cin, cout, k, len, stride](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& xv = tp.value(xid);
    const Tensor<T>& wv = tp.value(wid);
    const bool gx_on = tp.requires_grad(xid), gw_on = tp.requires_grad(wid);
    for (std::size_t o = 0; o < cout; ++o) {
      const T* gr = g.row_ptr(o);
      for (std::size_t i = 0; i < cin; ++i) {
        const T* wk = wv.data() + (o * cin + i) * k;
        if (gx_on) {
          T* gxr = tp.grad(xid).row_ptr(i);
          for (std::size_t l = 0; l < len; ++l) detail::axpy(gr[l], wk, gxr + l * stride, k);
        }
        if (gw_on) {
          const T* xr = xv.row_ptr(i);
          T* gwk = tp.grad(wid).data() + (o * cin + i) * k;
          for (std::size_t j = 0; j < k; ++j) {
            detail::acc_t<T> acc = 0.0;
            for (std::size_t l = 0; l < len; ++l) acc += static_cast<detail::acc_t<T>>(gr[l]) * xr[l * stride + j];
            gwk[j] += static_cast<T>(acc);
          }
        }
      }
    }
  });
}

/// Transposed convolution, the adjoint of conv1d with the same kernel.
/// x: [C_in x L], w: [C_in x C_out x K]. Output length (L - 1) * stride + K.
template <typename T>
Var<T> conv_transpose1d(Var<T> x, Var<T> w, std::size_t stride) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  detail::require_rank2(xv, "conv_transpose1d");
  if (wv.ndim() != 3) throw DimensionError("conv_transpose1d: kernel must be [C_in x C_out x K]");
  if (stride < 1) throw ContractError("conv_transpose1d: stride must be >= 1");
  const std::size_t cin = xv.rows(), len = xv.cols();
  const std::size_t cout = wv.dim(1), k = wv.dim(2);
  if (wv.dim(0) != cin) {
    throw DimensionError("conv_transpose1d: kernel " + detail::shape_str(wv.shape()) +
                         " vs input " + detail::shape_str(xv.shape()));
  }
  if (len == 0) throw InputTooShortError("conv_transpose1d: empty input");
  const std::size_t n = (len - 1) * stride + k;
  Tensor<T> y(cout, n);
  for (std::size_t i = 0; i < cin; ++i) {
    const T* xr = xv.row_ptr(i);
    for (std::size_t o = 0; o < cout; ++o) {
      const T* wk = wv.data() + (i * cout + o) * k;
      T* yr = y.row_ptr(o);
      for (std::size_t l = 0; l < len; ++l) detail::axpy(xr[l], wk, yr + l * stride, k);
    }
  }
  const std::size_t xid = x.id, wid = w.id;
  return x.tape->record(std::move(y), {x, w},
                        [xid, wid, cin, cout, k, len, stride](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& xv = tp.value(xid);
    const Tensor<T>& wv = tp.value(wid);
    const bool gx_on = tp.requires_grad(xid), gw_on = tp.requires_grad(wid);
    for (std::size_t i = 0; i < cin; ++i) {
      const T* xr = xv.row_ptr(i);
      for (std::size_t o = 0; o < cout; ++o) {
        const T* wk = wv.data() + (i * cout + o) * k;
        const T* gr = g.row_ptr(o);
        if (gx_on) {
          T* gxr = tp.grad(xid).row_ptr(i);
          for (std::size_t l = 0; l < len; ++l) gxr[l] += static_cast<T>(detail::dot(wk, gr + l * stride, k));
        }
        if (gw_on) {
          T* gwk = tp.grad(wid).data() + (i * cout + o) * k;
          for (std::size_t j = 0; j < k; ++j) {
            detail::acc_t<T> acc = 0.0;
            for (std::size_t l = 0; l < len; ++l) acc += static_cast<detail::acc_t<T>>(xr[l]) * gr[l * stride + j];
            gwk[j] += static_cast<T>(acc);
          }
        }
      }
    }
  });
}

/// Length-preserving dilated convolution with zero padding and bias.
/// Non-causal: an odd kernel of width K sees (K-1)/2 * dilation steps on
/// either side. x: [C_in x L], w: [C_out x C_in x K], b: [C_out].
template <typename T>
Var<T> dilated_conv(Var<T> x, Var<T> w, Var<T> b, std::size_t dilation) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  detail::require_rank2(xv, "dilated_conv");
  if (wv.ndim() != 3) throw DimensionError("dilated_conv: kernel must be [C_out x C_in x K]");
  const std::size_t cin = xv.rows(), len = xv.cols();
  const std::size_t cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != cin || b.value().size() != cout) {
    throw DimensionError("dilated_conv: kernel " + detail::shape_str(wv.shape()) + " vs input " +
                         detail::shape_str(xv.shape()));
  }
  if (k % 2 == 0) throw ContractError("dilated_conv: kernel width must be odd");
  if (dilation < 1) throw ContractError("dilated_conv: dilation must be >= 1");
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  const auto slen = static_cast<std::ptrdiff_t>(len);
  // Column range [lo, hi) of the output that tap j touches without leaving x.
  auto tap_range = [=](std::size_t j) {
    const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(j) - half) * static_cast<std::ptrdiff_t>(dilation);
    const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-off, 0, slen);
    const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(slen - off, 0, slen);
    return std::tuple{off, lo, std::max(lo, hi)};
  };
  Tensor<T> y(cout, len);
  for (std::size_t o = 0; o < cout; ++o) {
    T* yr = y.row_ptr(o);
    std::fill(yr, yr + len, b.value()[o]);
    for (std::size_t i = 0; i < cin; ++i) {
      const T* xr = xv.row_ptr(i);
      for (std::size_t j = 0; j < k; ++j) {
        const auto [off, lo, hi] = tap_range(j);
        if (hi > lo) detail::axpy(wv[(o * cin + i) * k + j], xr + lo + off, yr + lo, static_cast<std::size_t>(hi - lo));
      }
    }
  }
  const std::size_t xid = x.id, wid = w.id, bid = b.id;
  return x.tape->record(std::move(y), {x, w, b},
                        [xid, wid, bid, cin, cout, k, len, tap_range](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& xv = tp.value(xid);
    const Tensor<T>& wv = tp.value(wid);
    const bool gx_on = tp.requires_grad(xid), gw_on = tp.requires_grad(wid);
    for (std::size_t o = 0; o < cout; ++o) {
      const T* gr = g.row_ptr(o);
      for (std::size_t i = 0; i < cin; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const auto [off, lo, hi] = tap_range(j);
          if (hi <= lo) continue;
          const auto n = static_cast<std::size_t>(hi - lo);
          if (gx_on) detail::axpy(wv[(o * cin + i) * k + j], gr + lo, tp.grad(xid).row_ptr(i) + lo + off, n);
          if (gw_on) {
            tp.grad(wid)[(o * cin + i) * k + j] +=
                static_cast<T>(detail::dot(gr + lo, xv.row_ptr(i) + lo + off, n));
          }
        }
      }
    }
    if (tp.requires_grad(bid)) {
      Tensor<T>& gb = tp.grad(bid);
      for (std::size_t o = 0; o < cout; ++o) {
        const T* gr = g.row_ptr(o);
        detail::acc_t<T> acc = 0.0;
        for (std::size_t l = 0; l < len; ++l) acc += gr[l];
        gb[o] += static_cast<T>(acc);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> tanh(Var<T> x) {
  Tensor<T> y = x.value();
  for (auto& v : y.values()) v = std::tanh(v);
  const std::size_t xid = x.id;
  return x.tape->record(std::move(y), {x}, [xid](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& xv = tp.value(xid);
    Tensor<T>& gx = tp.grad(xid);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T t = std::tanh(xv[i]);
      gx[i] += g[i] * (T(1) - t * t);
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> y = x.value();
  for (auto& v : y.values()) v = v > T(0) ? v : T(0);
  const std::size_t xid = x.id;
  return x.tape->record(std::move(y), {x}, [xid](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& xv = tp.value(xid);
    Tensor<T>& gx = tp.grad(xid);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0)) gx[i] += g[i];
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same(a.value(), b.value(), "add");
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(y), {a, b}, [aid, bid](Tape<T>& tp, const Tensor<T>& g) {
    for (std::size_t id : {aid, bid}) {
      if (!tp.requires_grad(id)) continue;
      Tensor<T>& gx = tp.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same(a.value(), b.value(), "sub");
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(y), {a, b}, [aid, bid](Tape<T>& tp, const Tensor<T>& g) {
    if (tp.requires_grad(aid)) {
      Tensor<T>& ga = tp.grad(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bid)) {
      Tensor<T>& gb = tp.grad(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise product of equally shaped tensors.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same(a.value(), b.value(), "mul");
  Tensor<T> y = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(y), {a, b}, [aid, bid](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& av = tp.value(aid);
    const Tensor<T>& bv = tp.value(bid);
    if (tp.requires_grad(aid)) {
      Tensor<T>& ga = tp.grad(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(bid)) {
      Tensor<T>& gb = tp.grad(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> y = x.value();
  for (auto& v : y.values()) v *= factor;
  const std::size_t xid = x.id;
  return x.tape->record(std::move(y), {x}, [xid, factor](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
  });
}

/// Row-wise broadcast product: out[h, l] = a[0, l] * e[h, l]. a: [1 x L].
template <typename T>
Var<T> mul_rows(Var<T> a, Var<T> e) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& ev = e.value();
  detail::require_rank2(ev, "mul_rows");
  if (av.rows() != 1 || av.cols() != ev.cols()) {
    throw DimensionError("mul_rows: weights " + detail::shape_str(av.shape()) + " vs " +
                         detail::shape_str(ev.shape()));
  }
  const std::size_t h = ev.rows(), len = ev.cols();
  Tensor<T> y = ev;
  for (std::size_t r = 0; r < h; ++r) {
    T* yr = y.row_ptr(r);
    for (std::size_t l = 0; l < len; ++l) yr[l] *= av[l];
  }
  const std::size_t aid = a.id, eid = e.id;
  return a.tape->record(std::move(y), {a, e}, [aid, eid, h, len](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& av = tp.value(aid);
    const Tensor<T>& ev = tp.value(eid);
    if (tp.requires_grad(aid)) {
      Tensor<T>& ga = tp.grad(aid);
      for (std::size_t r = 0; r < h; ++r) {
        const T* gr = g.row_ptr(r);
        const T* er = ev.row_ptr(r);
        for (std::size_t l = 0; l < len; ++l) ga[l] += gr[l] * er[l];
      }
    }
    if (tp.requires_grad(eid)) {
      Tensor<T>& ge = tp.grad(eid);
      for (std::size_t r = 0; r < h; ++r) {
        const T* gr = g.row_ptr(r);
        T* gor = ge.row_ptr(r);
        for (std::size_t l = 0; l < len; ++l) gor[l] += gr[l] * av[l];
      }
    }
  });
}

/// Stacks two matrices along the channel (row) axis.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::require_rank2(av, "concat_channels");
  detail::require_rank2(bv, "concat_channels");
  if (av.cols() != bv.cols()) {
    throw DimensionError("concat_channels: time lengths " + std::to_string(av.cols()) + " vs " +
                         std::to_string(bv.cols()));
  }
  std::vector<T> data(av.storage());
  data.insert(data.end(), bv.storage().begin(), bv.storage().end());
  Tensor<T> y({av.rows() + bv.rows(), av.cols()}, std::move(data));
  const std::size_t aid = a.id, bid = b.id, split = av.size();
  return a.tape->record(std::move(y), {a, b}, [aid, bid, split](Tape<T>& tp, const Tensor<T>& g) {
    if (tp.requires_grad(aid)) {
      Tensor<T>& ga = tp.grad(aid);
      for (std::size_t i = 0; i < split; ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bid)) {
      Tensor<T>& gb = tp.grad(bid);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[split + i];
    }
  });
}

/// [H x L] -> [H x 1] arithmetic mean along time.
template <typename T>
Var<T> mean_over_time(Var<T> x) {
  const Tensor<T>& xv = x.value();
  detail::require_rank2(xv, "mean_over_time");
  const std::size_t h = xv.rows(), len = xv.cols();
  if (len == 0) throw InputTooShortError("mean_over_time: empty time axis");
  Tensor<T> y(h, 1);
  for (std::size_t r = 0; r < h; ++r) {
    const T* xr = xv.row_ptr(r);
    detail::acc_t<T> acc = 0.0;
    for (std::size_t l = 0; l < len; ++l) acc += xr[l];
    y[r] = static_cast<T>(acc / static_cast<detail::acc_t<T>>(len));
  }
  const std::size_t xid = x.id;
  return x.tape->record(std::move(y), {x}, [xid, h, len](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad(xid);
    const T inv = T(1) / static_cast<T>(len);
    for (std::size_t r = 0; r < h; ++r) {
      T* gr = gx.row_ptr(r);
      const T v = g[r] * inv;
      for (std::size_t l = 0; l < len; ++l) gr[l] += v;
    }
  });
}

/// [H x 1] -> [H x L] with L identical columns.
template <typename T>
Var<T> repeat_columns(Var<T> e, std::size_t len) {
  const Tensor<T>& ev = e.value();
  if (ev.ndim() != 2 || ev.cols() != 1) {
    throw DimensionError("repeat_columns: expected [H x 1], got " + detail::shape_str(ev.shape()));
  }
  const std::size_t h = ev.rows();
  Tensor<T> y(h, len);
  for (std::size_t r = 0; r < h; ++r) std::fill(y.row_ptr(r), y.row_ptr(r) + len, ev[r]);
  const std::size_t eid = e.id;
  return e.tape->record(std::move(y), {e}, [eid, h, len](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& ge = tp.grad(eid);
    for (std::size_t r = 0; r < h; ++r) {
      const T* gr = g.row_ptr(r);
      detail::acc_t<T> acc = 0.0;
      for (std::size_t l = 0; l < len; ++l) acc += gr[l];
      ge[r] += static_cast<T>(acc);
    }
  });
}

/// Columns [begin, end) of a matrix.
template <typename T>
Var<T> crop_cols(Var<T> x, std::size_t begin, std::size_t end) {
  const Tensor<T>& xv = x.value();
  detail::require_rank2(xv, "crop_cols");
  if (begin > end || end > xv.cols()) throw DimensionError("crop_cols: range outside input");
  const std::size_t h = xv.rows(), n = end - begin;
  Tensor<T> y(h, n);
  for (std::size_t r = 0; r < h; ++r) std::copy_n(xv.row_ptr(r) + begin, n, y.row_ptr(r));
  const std::size_t xid = x.id;
  return x.tape->record(std::move(y), {x}, [xid, h, n, begin](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad(xid);
    for (std::size_t r = 0; r < h; ++r) detail::axpy(T(1), g.row_ptr(r), gx.row_ptr(r) + begin, n);
  });
}

/// Sum of all entries as a [1 x 1] scalar.
template <typename T>
Var<T> sum(Var<T> x) {
  detail::acc_t<T> acc = 0.0;
  for (T v : x.value().values()) acc += v;
  const std::size_t xid = x.id;
  return x.tape->record(Tensor<T>::scalar(static_cast<T>(acc)), {x}, [xid](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gx = tp.grad(xid);
    for (auto& v : gx.values()) v += g[0];
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw InputTooShortError("mean: empty input");
  return scale(sum(x), T(1) / static_cast<T>(n));
}

/// Two-way softmax along a pair of score rows, per time step.
/// Returns (a, b) with a + b = 1 and both in [0, 1]; stable for any finite
/// score difference.
template <typename T>
std::pair<Var<T>, Var<T>> softmax_over_pair(Var<T> s_a, Var<T> s_b) {
  detail::require_same(s_a.value(), s_b.value(), "softmax_over_pair");
  const Tensor<T>& av = s_a.value();
  const Tensor<T>& bv = s_b.value();
  Tensor<T> wa(av.shape()), wb(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T m = std::max(av[i], bv[i]);
    const T ea = std::exp(av[i] - m), eb = std::exp(bv[i] - m);
    const T z = ea + eb;
    wa[i] = ea / z;
    wb[i] = eb / z;
  }
  const std::size_t aid = s_a.id, bid = s_b.id;
  Tape<T>& tape = *s_a.tape;
  // d a / d s_a = a * b, d a / d s_b = -a * b, and symmetrically for b.
  const Tensor<T> wa_copy = wa, wb_copy = wb;
  Var<T> out_a = tape.record(std::move(wa), {s_a, s_b}, [aid, bid, wa_copy, wb_copy](Tape<T>& tp, const Tensor<T>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T d = g[i] * wa_copy[i] * wb_copy[i];
      if (tp.requires_grad(aid)) tp.grad(aid)[i] += d;
      if (tp.requires_grad(bid)) tp.grad(bid)[i] -= d;
    }
  });
  Var<T> out_b = tape.record(std::move(wb), {s_a, s_b}, [aid, bid, wa_copy, wb_copy](Tape<T>& tp, const Tensor<T>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T d = g[i] * wa_copy[i] * wb_copy[i];
      if (tp.requires_grad(aid)) tp.grad(aid)[i] -= d;
      if (tp.requires_grad(bid)) tp.grad(bid)[i] += d;
    }
  });
  return {out_a, out_b};
}

/// Softmax cross-entropy of a logit column against a class index.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::size_t label) {
  const Tensor<T>& zv = logits.value();
  const std::size_t n = zv.size();
  if (label >= n) {
    throw ContractError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                        std::to_string(n) + ")");
  }
  const T m = *std::max_element(zv.values().begin(), zv.values().end());
  detail::acc_t<T> z = 0.0;
  for (T v : zv.values()) z += std::exp(static_cast<detail::acc_t<T>>(v - m));
  const detail::acc_t<T> lse = static_cast<detail::acc_t<T>>(m) + std::log(z);
  Tensor<T> probs(zv.shape());
  for (std::size_t i = 0; i < n; ++i) probs[i] = static_cast<T>(std::exp(static_cast<detail::acc_t<T>>(zv[i]) - lse));
  const T loss = static_cast<T>(lse - static_cast<detail::acc_t<T>>(zv[label]));
  const std::size_t zid = logits.id;
  return logits.tape->record(Tensor<T>::scalar(loss), {logits},
                             [zid, label, probs = std::move(probs)](Tape<T>& tp, const Tensor<T>& g) {
    Tensor<T>& gz = tp.grad(zid);
    for (std::size_t i = 0; i < probs.size(); ++i)
      gz[i] += g[0] * (probs[i] - (i == label ? T(1) : T(0)));
  });
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries = 0;
};

/// Compares tape gradients of `loss_fn` against central differences for
/// every entry of every trainable parameter. Relative error uses the
/// denominator max(|analytic|, |numeric|, 1e-8).
template <typename T>
GradCheckReport grad_check(const std::function<Var<T>(Tape<T>&)>& loss_fn,
                           std::span<Param<T>* const> params, double eps) {
  if (!(eps >= 1e-5 && eps <= 1e-2)) throw ContractError("grad_check: eps must lie in [1e-5, 1e-2]");
  using A = detail::acc_t<T>;
  auto evaluate = [&]() {
    Tape<T> tape(false);
    return static_cast<A>(loss_fn(tape).value()[0]);
  };

  zero_grads(params);
  A base = 0;
  {
    Tape<T> tape(true);
    Var<T> loss = loss_fn(tape);
    base = loss.value()[0];
    tape.backward(loss);
  }
  if (evaluate() != base || evaluate() != base) {
    throw ContractError("grad_check: loss function is not deterministic; check is unreliable");
  }

  GradCheckReport report;
  for (Param<T>* p : params) {
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const T saved = p->value[i];
      p->value[i] = static_cast<T>(saved + eps);
      const A up = evaluate();
      p->value[i] = static_cast<T>(saved - eps);
      const A down = evaluate();
      p->value[i] = saved;
      const double numeric = static_cast<double>((up - down) / (2 * static_cast<A>(eps)));
      const double analytic = static_cast<double>(p->grad[i]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.entries;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p->name;
        report.worst_index = i;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace momuse
