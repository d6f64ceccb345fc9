// Copyright 2026 The Metaloop Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Differentiable primitives. Every backward rule is expressed with the
// primitives in this file, which is what makes gradients differentiable to
// any order.

#pragma once

#include <cmath>
#include <limits>
#include <type_traits>
#include <Eigen/Core>

#include "metaloop/tensor.hpp"

namespace metaloop {

namespace detail {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Reductions over kLanes interleaved partial sums. The summation order
// depends only on n, never on the address of x, so results replay bit-exactly
// wherever the buffers land; the lane loop still vectorizes.
inline constexpr std::size_t kLanes = 16;

template <typename T>
T combine_lanes(const T (&acc)[kLanes]) {
  T total = T(0);
  for (std::size_t j = 0; j < kLanes; ++j) total += acc[j];
  return total;
}

template <typename T>
T vec_sum(const T* x, std::size_t n) {
  T acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += x[i + j];
  for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += x[i];
  return combine_lanes(acc);
}

template <typename T>
T vec_dot(const T* x, const T* y, std::size_t n) {
  T acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += x[i + j] * y[i + j];
  for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += x[i] * y[i];
  return combine_lanes(acc);
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
  }
}

template <typename T, typename F>
Tensor<T> map_unary(const Tensor<T>& a, F f, const char* op,
                    std::type_identity_t<BackwardFn<T>> backward) {
  Buffer<T> out(a.numel());
  const T* x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return Tensor<T>::make_result(op, a.shape(), std::move(out), {a},
                                std::move(backward));
}

template <typename T, typename F>
Tensor<T> map_binary(const Tensor<T>& a, const Tensor<T>& b, F f,
                     const char* op, std::type_identity_t<BackwardFn<T>> backward) {
  require_same_shape(op, a.shape(), b.shape());
  Buffer<T> out(a.numel());
  const T* x = a.data();
  const T* y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return Tensor<T>::make_result(op, a.shape(), std::move(out), {a, b},
                                std::move(backward));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::map_binary(
      a, b, [](T x, T y) { return x + y; }, "add",
      [](const Tensor<T>& g, const std::vector<bool>& needs) {
        return std::vector<Tensor<T>>{needs[0] ? g : Tensor<T>(),
                                      needs[1] ? g : Tensor<T>()};
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::map_binary(
      a, b, [](T x, T y) { return x - y; }, "sub",
      [](const Tensor<T>& g, const std::vector<bool>& needs) {
        return std::vector<Tensor<T>>{needs[0] ? g : Tensor<T>(),
                                      needs[1] ? scale(g, T(-1)) : Tensor<T>()};
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::map_binary(
      a, b, [](T x, T y) { return x * y; }, "mul",
      [a, b](const Tensor<T>& g, const std::vector<bool>& needs) {
        return std::vector<Tensor<T>>{needs[0] ? mul(g, b) : Tensor<T>(),
                                      needs[1] ? mul(g, a) : Tensor<T>()};
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::map_unary(
      a, [s](T x) { return x * s; }, "scale",
      [s](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{scale(g, s)};
      });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::map_unary(
      a, [s](T x) { return x + s; }, "add_scalar",
      [](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{g};
      });
}

/// Elementwise a^p. Non-integer p requires positive inputs.
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T p) {
  return detail::map_unary(
      a, [p](T x) { return std::pow(x, p); }, "pow_scalar",
      [a, p](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{mul(g, scale(pow_scalar(a, p - T(1)), p))};
      });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::map_unary(
      a, [](T x) { return std::exp(x); }, "exp",
      [a](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{mul(g, exp(a))};
      });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::map_unary(
      a, [](T x) { return std::log(x); }, "log",
      [a](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{mul(g, pow_scalar(a, T(-1)))};
      });
}

namespace detail {

// g * (ref > 0 ? 1 : slope). Linear in g; ref is a constant.
template <typename T>
Tensor<T> leaky_mask(const Tensor<T>& g, std::shared_ptr<const Buffer<T>> ref,
                     T slope) {
  Buffer<T> out(g.numel());
  const T* gv = g.data();
  const T* rv = ref->data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = rv[i] > T(0) ? gv[i] : gv[i] * slope;
  }
  return Tensor<T>::make_result(
      "leaky_mask", g.shape(), std::move(out), {g},
      [ref, slope](const Tensor<T>& gg, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{leaky_mask(gg, ref, slope)};
      });
}

}  // namespace detail

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  auto ref = a.storage();
  return detail::map_unary(
      a, [slope](T x) { return x > T(0) ? x : x * slope; },
      slope == T(0) ? "relu" : "leaky_relu",
      [ref, slope](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{detail::leaky_mask(g, ref, slope)};
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return leaky_relu(a, T(0));
}

// ------------------------------------------------------------ shape and views

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  Shape original = a.shape();
  return Tensor<T>::make_result(
      "reshape", std::move(shape), a.storage(), {a},
      [original](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{reshape(g, original)};
      });
}

/// (N, ...) -> (N, prod(...)).
template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
  if (a.rank() < 1) throw ShapeError("flatten: rank-0 tensor");
  return reshape(a, Shape{a.dim(0), a.numel() / std::max<std::size_t>(a.dim(0), 1)});
}

// ------------------------------------------------- reductions and broadcasts
//
// A tensor is viewed as (outer, middle, inner); keep_sum reduces over outer and
// inner leaving (middle), keep_broadcast is its adjoint. Channel sums
// (N, C, H, W) -> (C), row sums (N, C) -> (N) and total sums are all instances.

template <typename T>
Tensor<T> keep_broadcast(const Tensor<T>& v, std::size_t outer,
                         std::size_t inner, Shape out_shape);

template <typename T>
Tensor<T> keep_sum(const Tensor<T>& a, std::size_t outer, std::size_t middle,
                   std::size_t inner, Shape out_shape) {
  if (outer * middle * inner != a.numel() || shape_numel(out_shape) != middle) {
    throw ShapeError("keep_sum: bad factorization of " + shape_str(a.shape()));
  }
  Buffer<T> out(middle, T(0));
  const T* x = a.data();
  if (inner == 1) {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t m = 0; m < middle; ++m) out[m] += x[o * middle + m];
    }
  } else {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t m = 0; m < middle; ++m) {
        out[m] += detail::vec_sum(x + (o * middle + m) * inner, inner);
      }
    }
  }
  Shape in_shape = a.shape();
  return Tensor<T>::make_result(
      "keep_sum", std::move(out_shape), std::move(out), {a},
      [outer, inner, in_shape](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{keep_broadcast(g, outer, inner, in_shape)};
      });
}

template <typename T>
Tensor<T> keep_broadcast(const Tensor<T>& v, std::size_t outer,
                         std::size_t inner, Shape out_shape) {
  const std::size_t middle = v.numel();
  if (outer * middle * inner != shape_numel(out_shape)) {
    throw ShapeError("keep_broadcast: cannot broadcast " + shape_str(v.shape()) +
                     " to " + shape_str(out_shape));
  }
  Buffer<T> out(shape_numel(out_shape));
  const T* x = v.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t m = 0; m < middle; ++m) {
      T* row = out.data() + (o * middle + m) * inner;
      std::fill(row, row + inner, x[m]);
    }
  }
  Shape v_shape = v.shape();
  return Tensor<T>::make_result(
      "keep_broadcast", std::move(out_shape), std::move(out), {v},
      [outer, middle, inner, v_shape](const Tensor<T>& g,
                                      const std::vector<bool>&) {
        return std::vector<Tensor<T>>{keep_sum(g, outer, middle, inner, v_shape)};
      });
}

namespace detail {

inline std::size_t inner_size(const Shape& s) {
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return inner;
}

}  // namespace detail

/// (N, C, ...) -> (C)
template <typename T>
Tensor<T> channel_sum(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("channel_sum: need rank >= 2, got " + shape_str(a.shape()));
  return keep_sum(a, a.dim(0), a.dim(1), detail::inner_size(a.shape()),
                  Shape{a.dim(1)});
}

/// (C) -> like_shape (N, C, ...)
template <typename T>
Tensor<T> channel_broadcast(const Tensor<T>& v, const Shape& like_shape) {
  if (like_shape.size() < 2 || v.numel() != like_shape[1]) {
    throw ShapeError("channel_broadcast: " + shape_str(v.shape()) +
                     " does not match channels of " + shape_str(like_shape));
  }
  return keep_broadcast(v, like_shape[0], detail::inner_size(like_shape),
                        like_shape);
}

/// (N, C) -> (N)
template <typename T>
Tensor<T> row_sum(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("row_sum: need rank 2, got " + shape_str(a.shape()));
  return keep_sum(a, 1, a.dim(0), a.dim(1), Shape{a.dim(0)});
}

/// (N) -> (N, cols)
template <typename T>
Tensor<T> row_broadcast(const Tensor<T>& v, std::size_t cols) {
  return keep_broadcast(v, 1, cols, Shape{v.numel(), cols});
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  return keep_sum(a, 1, 1, a.numel(), Shape{});
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Scalar -> shape filled with it.
template <typename T>
Tensor<T> expand(const Tensor<T>& s, const Shape& shape) {
  if (s.numel() != 1) throw ShapeError("expand: need a scalar, got " + shape_str(s.shape()));
  return keep_broadcast(s, 1, shape_numel(shape), shape);
}

// ------------------------------------------------------ per-channel primitives
//
// Dimension 1 is the channel axis; a (C) vector acts on every (n, c, ...)
// slice. channel_dot is the bilinear form behind both scale gradients.

template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& a);

namespace detail {

inline void require_channels(const char* op, const Shape& x, const Shape& v) {
  if (x.size() < 2 || shape_numel(v) != x[1]) {
    throw ShapeError(std::string(op) + ": " + shape_str(v) + " does not match channels of " +
                     shape_str(x));
  }
}

}  // namespace detail

/// (N, C, ...) x (N, C, ...) -> (C): sum over all but the channel axis of x*y.
template <typename T>
Tensor<T> channel_dot(const Tensor<T>& x, const Tensor<T>& y) {
  detail::require_same_shape("channel_dot", x.shape(), y.shape());
  if (x.rank() < 2) throw ShapeError("channel_dot: need rank >= 2, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), inner = detail::inner_size(x.shape());
  Buffer<T> out(c, T(0));
  const T* xv = x.data();
  const T* yv = y.data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * inner;
      out[ch] += detail::vec_dot(xv + base, yv + base, inner);
    }
  }
  const bool same = x.node() == y.node();
  return Tensor<T>::make_result(
      "channel_dot", Shape{c}, std::move(out), {x, y},
      [x, y, same](const Tensor<T>& g, const std::vector<bool>& needs) {
        if (same) return std::vector<Tensor<T>>{channel_scale(x, scale(g, T(2))), Tensor<T>()};
        return std::vector<Tensor<T>>{needs[0] ? channel_scale(y, g) : Tensor<T>(),
                                      needs[1] ? channel_scale(x, g) : Tensor<T>()};
      });
}

/// x * a[c] + b[c]; an undefined `b` means no shift.
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_channels("channel_affine", x.shape(), a.shape());
  if (b.defined()) detail::require_channels("channel_affine", x.shape(), b.shape());
  const std::size_t n = x.dim(0), c = x.dim(1), inner = detail::inner_size(x.shape());
  Buffer<T> out(x.numel());
  const T* xv = x.data();
  const T* av = a.data();
  const T* bv = b.defined() ? b.data() : nullptr;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * inner;
      const T m = av[ch], k = bv ? bv[ch] : T(0);
      for (std::size_t i = 0; i < inner; ++i) out[base + i] = xv[base + i] * m + k;
    }
  }
  std::vector<Tensor<T>> inputs{x, a};
  if (b.defined()) inputs.push_back(b);
  return Tensor<T>::make_result(
      b.defined() ? "channel_affine" : "channel_scale", x.shape(), std::move(out),
      std::move(inputs), [x, a](const Tensor<T>& g, const std::vector<bool>& needs) {
        std::vector<Tensor<T>> r{needs[0] ? channel_scale(g, a) : Tensor<T>(),
                                 needs[1] ? channel_dot(g, x) : Tensor<T>()};
        if (needs.size() > 2) r.push_back(needs[2] ? channel_sum(g) : Tensor<T>());
        return r;
      });
}

template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& a) {
  return channel_affine(x, a, Tensor<T>());
}

/// x + b[c].
template <typename T>
Tensor<T> channel_shift(const Tensor<T>& x, const Tensor<T>& b) {
  detail::require_channels("channel_shift", x.shape(), b.shape());
  const std::size_t n = x.dim(0), c = x.dim(1), inner = detail::inner_size(x.shape());
  Buffer<T> out(x.numel());
  const T* xv = x.data();
  const T* bv = b.data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * inner;
      const T k = bv[ch];
      for (std::size_t i = 0; i < inner; ++i) out[base + i] = xv[base + i] + k;
    }
  }
  return Tensor<T>::make_result(
      "channel_shift", x.shape(), std::move(out), {x, b},
      [](const Tensor<T>& g, const std::vector<bool>& needs) {
        return std::vector<Tensor<T>>{needs[0] ? g : Tensor<T>(),
                                      needs[1] ? channel_sum(g) : Tensor<T>()};
      });
}

/// x + b with b broadcast along dimension 1 (bias add for dense and conv).
template <typename T>
Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& b) {
  return channel_shift(x, b);
}

template <typename T>
Tensor<T> residual_add(const Tensor<T>& x, const Tensor<T>& y) {
  return add(x, y);
}

// --------------------------------------------------------------------- matmul

/// op(a) * op(b) for 2-D tensors, op = transpose when the flag is set.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: need rank-2 operands, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t ka = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (ka != kb) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) +
                     (trans_a ? "^T" : "") + " and " + shape_str(b.shape()) +
                     (trans_b ? "^T" : ""));
  }
  using Mat = detail::MatrixRM<T>;
  Buffer<T> out(m * n);
  Eigen::Map<const Mat> A(a.data(), a.dim(0), a.dim(1));
  Eigen::Map<const Mat> B(b.data(), b.dim(0), b.dim(1));
  Eigen::Map<Mat> C(out.data(), m, n);
  if (!trans_a && !trans_b) C.noalias() = A * B;
  else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  else C.noalias() = A.transpose() * B.transpose();

  return Tensor<T>::make_result(
      "matmul", Shape{m, n}, std::move(out), {a, b},
      [a, b, trans_a, trans_b](const Tensor<T>& g, const std::vector<bool>& needs) {
        Tensor<T> ga, gb;
        if (needs[0]) ga = trans_a ? matmul(b, g, trans_b, true) : matmul(g, b, false, !trans_b);
        if (needs[1]) gb = trans_b ? matmul(g, a, true, trans_a) : matmul(a, g, !trans_a, false);
        return std::vector<Tensor<T>>{ga, gb};
      });
}

// ----------------------------------------------------------------- convolution
//
// Stride-1 convolution with zero padding 0 or 1. conv2d, conv2d_input_grad and
// conv2d_weight_grad are the three partial derivatives of the trilinear form
// <gy, conv2d(x, w)>, so each one's backward is expressed with the other two.

namespace detail {

struct ConvGeometry {
  std::size_t n, ci, h, w, co, kh, kw, pad, ho, wo;
  std::size_t k() const { return ci * kh * kw; }
  std::size_t hw_out() const { return ho * wo; }
};

inline ConvGeometry conv_geometry(const char* op, const Shape& x, const Shape& w,
                                  std::size_t pad) {
  if (x.size() != 4 || w.size() != 4) {
    throw ShapeError(std::string(op) + ": need NCHW input and OIHW kernel, got " +
                     shape_str(x) + " and " + shape_str(w));
  }
  if (x[1] != w[1]) {
    throw ShapeError(std::string(op) + ": input channels of " + shape_str(x) +
                     " do not match kernel " + shape_str(w));
  }
  if (pad > 1) {
    throw std::invalid_argument(std::string(op) + ": padding must be 0 or 1, got " +
                                std::to_string(pad));
  }
  if (x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3]) {
    throw ShapeError(std::string(op) + ": kernel " + shape_str(w) +
                     " larger than padded input " + shape_str(x));
  }
  return {x[0], x[1], x[2], x[3], w[0], w[2], w[3], pad,
          x[2] + 2 * pad - w[2] + 1, x[3] + 2 * pad - w[3] + 1};
}

// Output columns [lo, hi) of a kernel tap at offset k read in-bounds input.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t pad,
                                                       std::size_t in, std::size_t out) {
  const std::size_t lo = k < pad ? pad - k : 0;
  const std::size_t hi = std::min(out, in + pad - k);
  return {std::min(lo, hi), hi};
}

// Column matrix (K, N*Ho*Wo) for the whole batch.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.n * g.hw_out();
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const auto [ylo, yhi] = valid_range(ky, g.pad, g.h, g.ho);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const auto [xlo, xhi] = valid_range(kx, g.pad, g.w, g.wo);
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t s = 0; s < g.n; ++s) {
          const T* plane = x + (s * g.ci + c) * g.h * g.w;
          T* dst = row + s * g.hw_out();
          std::fill(dst, dst + ylo * g.wo, T(0));
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            T* drow = dst + oy * g.wo;
            const T* srow = plane + (oy + ky - g.pad) * g.w + (kx + xlo - g.pad);
            std::fill(drow, drow + xlo, T(0));
            std::copy(srow, srow + (xhi - xlo), drow + xlo);
            std::fill(drow + xhi, drow + g.wo, T(0));
          }
          std::fill(dst + yhi * g.wo, dst + g.ho * g.wo, T(0));
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into a zeroed image buffer.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* x) {
  const std::size_t cols = g.n * g.hw_out();
  for (std::size_t c = 0; c < g.ci; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const auto [ylo, yhi] = valid_range(ky, g.pad, g.h, g.ho);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const auto [xlo, xhi] = valid_range(kx, g.pad, g.w, g.wo);
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t s = 0; s < g.n; ++s) {
          T* plane = x + (s * g.ci + c) * g.h * g.w;
          const T* src = row + s * g.hw_out();
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            T* drow = plane + (oy + ky - g.pad) * g.w + (kx + xlo - g.pad);
            const T* srow = src + oy * g.wo + xlo;
            for (std::size_t i = 0; i < xhi - xlo; ++i) drow[i] += srow[i];
          }
        }
      }
    }
  }
}

// (N, C, HW) <-> (C, N*HW)
template <typename T>
void nchw_to_cn(const T* src, std::size_t n, std::size_t c, std::size_t hw, T* dst) {
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(src + (s * c + ch) * hw, hw, dst + ch * n * hw + s * hw);
}

template <typename T>
void cn_to_nchw(const T* src, std::size_t n, std::size_t c, std::size_t hw, T* dst) {
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(src + ch * n * hw + s * hw, hw, dst + (s * c + ch) * hw);
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& gy, const Tensor<T>& w,
                            std::size_t pad, std::size_t h, std::size_t width);
template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& gy,
                             std::size_t pad, std::size_t kh, std::size_t kw);

/// Cross-correlation of NCHW `x` with OIHW `w`; stride must be 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride,
                 std::size_t pad) {
  if (stride != 1) {
    throw std::invalid_argument("conv2d: only stride 1 is supported, got " +
                                std::to_string(stride));
  }
  const auto g = detail::conv_geometry("conv2d", x.shape(), w.shape(), pad);
  using Mat = detail::MatrixRM<T>;
  const std::size_t cols = g.n * g.hw_out();
  Buffer<T> col(g.k() * cols);
  detail::im2col(x.data(), g, col.data());
  Buffer<T> ycn(g.co * cols);
  Eigen::Map<const Mat> W(w.data(), g.co, g.k());
  Eigen::Map<const Mat> C(col.data(), g.k(), cols);
  Eigen::Map<Mat>(ycn.data(), g.co, cols).noalias() = W * C;
  Buffer<T> out(g.n * g.co * g.hw_out());
  detail::cn_to_nchw(ycn.data(), g.n, g.co, g.hw_out(), out.data());

  return Tensor<T>::make_result(
      "conv2d", Shape{g.n, g.co, g.ho, g.wo}, std::move(out), {x, w},
      [x, w, g](const Tensor<T>& gy, const std::vector<bool>& needs) {
        Tensor<T> gx, gw;
        if (needs[0]) gx = conv2d_input_grad(gy, w, g.pad, g.h, g.w);
        if (needs[1]) gw = conv2d_weight_grad(x, gy, g.pad, g.kh, g.kw);
        return std::vector<Tensor<T>>{gx, gw};
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t pad) {
  return conv2d(x, w, 1, pad);
}

/// Gradient of <gy, conv2d(x, w)> with respect to x, for an input of size h×width.
template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& gy, const Tensor<T>& w,
                            std::size_t pad, std::size_t h, std::size_t width) {
  const Shape x_shape{gy.dim(0), w.dim(1), h, width};
  const auto g = detail::conv_geometry("conv2d_input_grad", x_shape, w.shape(), pad);
  if (gy.shape() != Shape{g.n, g.co, g.ho, g.wo}) {
    throw ShapeError("conv2d_input_grad: upstream " + shape_str(gy.shape()) +
                     " does not match kernel " + shape_str(w.shape()));
  }
  using Mat = detail::MatrixRM<T>;
  const std::size_t cols = g.n * g.hw_out();
  Buffer<T> gycn(g.co * cols);
  detail::nchw_to_cn(gy.data(), g.n, g.co, g.hw_out(), gycn.data());
  Buffer<T> col(g.k() * cols);
  Eigen::Map<const Mat> W(w.data(), g.co, g.k());
  Eigen::Map<Mat>(col.data(), g.k(), cols).noalias() =
      W.transpose() * Eigen::Map<const Mat>(gycn.data(), g.co, cols);
  Buffer<T> out(shape_numel(x_shape), T(0));
  detail::col2im(col.data(), g, out.data());

  return Tensor<T>::make_result(
      "conv2d_input_grad", x_shape, std::move(out), {gy, w},
      [gy, w, g](const Tensor<T>& gg, const std::vector<bool>& needs) {
        Tensor<T> d_gy, d_w;
        if (needs[0]) d_gy = conv2d(gg, w, 1, g.pad);
        if (needs[1]) d_w = conv2d_weight_grad(gg, gy, g.pad, g.kh, g.kw);
        return std::vector<Tensor<T>>{d_gy, d_w};
      });
}

/// Gradient of <gy, conv2d(x, w)> with respect to a kh×kw kernel w.
template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& gy,
                             std::size_t pad, std::size_t kh, std::size_t kw) {
  if (gy.rank() != 4 || x.rank() != 4) {
    throw ShapeError("conv2d_weight_grad: need NCHW operands, got " +
                     shape_str(x.shape()) + " and " + shape_str(gy.shape()));
  }
  const Shape w_shape{gy.dim(1), x.dim(1), kh, kw};
  const auto g = detail::conv_geometry("conv2d_weight_grad", x.shape(), w_shape, pad);
  if (gy.shape() != Shape{g.n, g.co, g.ho, g.wo}) {
    throw ShapeError("conv2d_weight_grad: upstream " + shape_str(gy.shape()) +
                     " does not match input " + shape_str(x.shape()));
  }
  using Mat = detail::MatrixRM<T>;
  const std::size_t cols = g.n * g.hw_out();
  Buffer<T> col(g.k() * cols);
  detail::im2col(x.data(), g, col.data());
  Buffer<T> gycn(g.co * cols);
  detail::nchw_to_cn(gy.data(), g.n, g.co, g.hw_out(), gycn.data());
  Buffer<T> out(g.co * g.k());
  Eigen::Map<Mat>(out.data(), g.co, g.k()).noalias() =
      Eigen::Map<const Mat>(gycn.data(), g.co, cols) *
      Eigen::Map<const Mat>(col.data(), g.k(), cols).transpose();

  return Tensor<T>::make_result(
      "conv2d_weight_grad", w_shape, std::move(out), {x, gy},
      [x, gy, g](const Tensor<T>& gg, const std::vector<bool>& needs) {
        Tensor<T> d_x, d_gy;
        if (needs[0]) d_x = conv2d_input_grad(gy, gg, g.pad, g.h, g.w);
        if (needs[1]) d_gy = conv2d(x, gg, 1, g.pad);
        return std::vector<Tensor<T>>{d_x, d_gy};
      });
}

// ------------------------------------------------------------------- pooling

namespace detail {

using IndexList = std::shared_ptr<const std::vector<std::uint32_t>>;

template <typename T>
Tensor<T> gather(const Tensor<T>& a, IndexList idx, Shape out_shape);

// out[idx[i]] += g[i]
template <typename T>
Tensor<T> scatter(const Tensor<T>& g, IndexList idx, Shape out_shape) {
  Buffer<T> out(shape_numel(out_shape), T(0));
  const T* gv = g.data();
  for (std::size_t i = 0; i < idx->size(); ++i) out[(*idx)[i]] += gv[i];
  Shape g_shape = g.shape();
  return Tensor<T>::make_result(
      "scatter", std::move(out_shape), std::move(out), {g},
      [idx, g_shape](const Tensor<T>& gg, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{gather(gg, idx, g_shape)};
      });
}

// out[i] = a[idx[i]]
template <typename T>
Tensor<T> gather(const Tensor<T>& a, IndexList idx, Shape out_shape) {
  Buffer<T> out(idx->size());
  const T* av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[(*idx)[i]];
  Shape a_shape = a.shape();
  return Tensor<T>::make_result(
      "gather", std::move(out_shape), std::move(out), {a},
      [idx, a_shape](const Tensor<T>& gg, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{scatter(gg, idx, a_shape)};
      });
}

}  // namespace detail

/// Non-overlapping window×window max pooling (floor on odd sizes). The first
/// maximal element in scan order wins ties.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t window = 2) {
  if (x.rank() != 4) throw ShapeError("max_pool2d: need NCHW input, got " + shape_str(x.shape()));
  if (window == 0) throw std::invalid_argument("max_pool2d: window must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h / window, wo = w / window;
  if (ho == 0 || wo == 0) {
    throw ShapeError("max_pool2d: input " + shape_str(x.shape()) +
                     " smaller than window " + std::to_string(window));
  }
  auto idx = std::make_shared<std::vector<std::uint32_t>>(n * c * ho * wo);
  Buffer<T> out(idx->size());
  const T* xv = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = base + oy * window * w + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t at = base + (oy * window + dy) * w + ox * window + dx;
            if (xv[at] > xv[best]) best = at;
          }
        }
        const std::size_t o = (p * ho + oy) * wo + ox;
        (*idx)[o] = static_cast<std::uint32_t>(best);
        out[o] = xv[best];
      }
    }
  }
  detail::IndexList shared = idx;
  Shape in_shape = x.shape();
  return Tensor<T>::make_result(
      "max_pool2d", Shape{n, c, ho, wo}, std::move(out), {x},
      [shared, in_shape](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{detail::scatter(g, shared, in_shape)};
      });
}

// -------------------------------------------------------------- normalization

/// Batch normalization with the statistics of `x` itself (biased variance),
/// per channel over every dimension except 1. There are no running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  if (x.rank() < 2) throw ShapeError("batch_norm: need rank >= 2, got " + shape_str(x.shape()));
  if (x.dim(0) < 2) {
    throw ShapeError("batch_norm: batch size must be at least 2, got " +
                     shape_str(x.shape()));
  }
  if (gamma.numel() != x.dim(1) || beta.numel() != x.dim(1)) {
    throw ShapeError("batch_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                     shape_str(beta.shape()) + " do not match channels of " +
                     shape_str(x.shape()));
  }
  if (!(eps >= T(0))) throw std::invalid_argument("batch_norm: eps must be non-negative");
  const T inv_m = T(1) / static_cast<T>(x.numel() / x.dim(1));
  auto mu = scale(channel_sum(x), inv_m);
  auto centered = channel_shift(x, scale(mu, T(-1)));
  auto var = scale(channel_dot(centered, centered), inv_m);
  auto inv_std = pow_scalar(add_scalar(var, eps), T(-0.5));
  const Shape c{x.dim(1)};
  auto g = gamma.shape() == c ? gamma : reshape(gamma, c);
  auto b = beta.shape() == c ? beta : reshape(beta, c);
  return channel_affine(centered, mul(inv_std, g), b);
}

// ---------------------------------------------------------------- classification

/// Row-wise softmax of (N, C) logits.
template <typename T>
Tensor<T> softmax(const Tensor<T>& z) {
  if (z.rank() != 2) throw ShapeError("softmax: need (N, C) logits, got " + shape_str(z.shape()));
  const std::size_t n = z.dim(0), c = z.dim(1);
  Buffer<T> shift(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.data() + i * c;
    const T m = *std::max_element(row, row + c);
    std::fill(shift.begin() + i * c, shift.begin() + (i + 1) * c, m);
  }
  auto e = exp(sub(z, Tensor<T>::from_buffer(z.shape(), std::move(shift))));
  return mul(e, row_broadcast(pow_scalar(row_sum(e), T(-1)), c));
}

/// Mean over rows of -log softmax(z)[label].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax_cross_entropy: need (N, C) logits, got " +
                     shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  }
  Buffer<T> onehot(n * c, T(0));
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw std::out_of_range("softmax_cross_entropy: label " +
                              std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(c) + ")");
    }
    const T* row = logits.data() + i * c;
    const T m = *std::max_element(row, row + c);
    T acc = T(0);
    for (std::size_t j = 0; j < c; ++j) acc += std::exp(row[j] - m);
    total += std::log(acc) + m - row[labels[i]];
    onehot[i * c + labels[i]] = T(1);
  }
  auto target = Tensor<T>::from_buffer(logits.shape(), std::move(onehot));
  const T inv_n = T(1) / static_cast<T>(n);
  return Tensor<T>::make_result(
      "softmax_cross_entropy", Shape{}, {total * inv_n}, {logits},
      [logits, target, inv_n](const Tensor<T>& g, const std::vector<bool>&) {
        auto delta = sub(softmax(logits), target);
        return std::vector<Tensor<T>>{
            mul(delta, expand(scale(g, inv_n), logits.shape()))};
      });
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  return softmax_cross_entropy(logits, std::span<const int>(labels));
}

/// Dense layer: x (N, D) * w(C, D)^T + b(C).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return bias_add(matmul(x, w, false, true), b);
}

/// Index of the largest entry per row; ties go to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& z) {
  const std::size_t n = z.dim(0), c = z.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = z.data() + i * c;
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (row[j] > row[best]) best = j;
    }
    out[i] = static_cast<int>(best);
  }
  return out;
}

/// Converts values between precisions (no recording).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  Buffer<To> v(t.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(t.at(i));
  return Tensor<To>::from_buffer(t.shape(), std::move(v));
}

}  // namespace metaloop
