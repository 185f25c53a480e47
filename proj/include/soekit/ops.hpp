// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_OPS_HPP
#define SOEKIT_OPS_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "soekit/tensor.hpp"

// Differentiable op catalog. Image-like tensors are NCHW.

namespace soekit {

namespace detail {

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_stride, b_stride;  // 0 on broadcast dims
  bool same = false;
};

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

inline BroadcastPlan broadcast_plan(const char* op, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  if (a.size() != b.size()) shape_error(op, a, b);
  p.out.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) shape_error(op, a, b);
    p.out[i] = std::max(a[i], b[i]);
  }
  auto sa = row_major_strides(a), sb = row_major_strides(b);
  p.a_stride.resize(a.size());
  p.b_stride.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    p.a_stride[i] = a[i] == 1 ? 0 : sa[i];
    p.b_stride[i] = b[i] == 1 ? 0 : sb[i];
  }
  return p;
}

// Calls f(out_index, a_index, b_index) in row-major order of the output.
template <class F>
void broadcast_for_each(const BroadcastPlan& p, F&& f) {
  const std::size_t n = numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = p.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += p.a_stride[d];
      ib += p.b_stride[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.a_stride[d] * p.out[d];
      ib -= p.b_stride[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}
inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

template <typename T>
void require_rank(const char* op, const BasicTensor<T>& x, std::size_t rank) {
  if (x.ndim() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(x.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  auto plan = detail::broadcast_plan("add", a.shape(), b.shape());
  std::vector<T> out(numel(plan.out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] + pb[j]; });
  return make_result<T>("add", plan.out, std::move(out), {a, b}, [plan](TensorNode<T>& n) {
    T* ga = input_grad(n, 0);
    T* gb = input_grad(n, 1);
    const T* g = n.grad.data();
    detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (ga) ga[i] += g[o];
      if (gb) gb[j] += g[o];
    });
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  auto plan = detail::broadcast_plan("sub", a.shape(), b.shape());
  std::vector<T> out(numel(plan.out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] - pb[j]; });
  return make_result<T>("sub", plan.out, std::move(out), {a, b}, [plan](TensorNode<T>& n) {
    T* ga = input_grad(n, 0);
    T* gb = input_grad(n, 1);
    const T* g = n.grad.data();
    detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (ga) ga[i] += g[o];
      if (gb) gb[j] -= g[o];
    });
  });
}

/// Elementwise product; either side may broadcast along size-1 dims, which
/// makes this the masking operator x ⊙ m for an (N,1,H,W) mask.
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  auto plan = detail::broadcast_plan("mul", a.shape(), b.shape());
  std::vector<T> out(numel(plan.out));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] * pb[j]; });
  return make_result<T>("mul", plan.out, std::move(out), {a, b}, [plan](TensorNode<T>& n) {
    T* ga = input_grad(n, 0);
    T* gb = input_grad(n, 1);
    const T* pa = input_data(n, 0);
    const T* pb = input_data(n, 1);
    const T* g = n.grad.data();
    detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
      if (ga) ga[i] += g[o] * pb[j];
      if (gb) gb[j] += g[o] * pa[i];
    });
  });
}

template <typename T>
BasicTensor<T> mask_mul(const BasicTensor<T>& x, const BasicTensor<T>& mask) {
  return mul(x, mask);
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T s) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return make_result<T>("scale", x.shape(), std::move(out), {x}, [s](TensorNode<T>& n) {
    if (T* gx = input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i] * s;
  });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T s) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s;
  return make_result<T>("add_scalar", x.shape(), std::move(out), {x}, [](TensorNode<T>& n) {
    if (T* gx = input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
  });
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (T(1) + std::exp(-x[i]));
  return make_result<T>("silu", x.shape(), std::move(out), {x}, [](TensorNode<T>& n) {
    T* gx = input_grad(n, 0);
    if (!gx) return;
    const T* px = input_data(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-px[i]));
      gx[i] += n.grad[i] * s * (T(1) + px[i] * (T(1) - s));
    }
  });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-x[i]));
  return make_result<T>("sigmoid", x.shape(), std::move(out), {x}, [](TensorNode<T>& n) {
    T* gx = input_grad(n, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i] * n.data[i] * (T(1) - n.data[i]);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc = 0;
  for (auto v : x.data()) acc += v;
  return make_result<T>("sum", {1}, {acc}, {x}, [](TensorNode<T>& n) {
    if (T* gx = input_grad(n, 0))
      for (std::size_t i = 0; i < n.inputs[0]->data.size(); ++i) gx[i] += n.grad[0];
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  T acc = 0;
  for (auto v : x.data()) acc += v;
  const T inv = T(1) / static_cast<T>(x.size());
  return make_result<T>("mean", {1}, {acc * inv}, {x}, [inv](TensorNode<T>& n) {
    if (T* gx = input_grad(n, 0))
      for (std::size_t i = 0; i < n.inputs[0]->data.size(); ++i) gx[i] += n.grad[0] * inv;
  });
}

/// Mean over the two trailing (spatial) axes: (N,C,H,W) -> (N,C).
template <typename T>
BasicTensor<T> mean_hw(const BasicTensor<T>& x) {
  detail::require_rank("mean_hw", x, 4);
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(nc);
  for (std::size_t i = 0; i < nc; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < hw; ++j) acc += x[i * hw + j];
    out[i] = acc / static_cast<T>(hw);
  }
  return make_result<T>("mean_hw", {x.dim(0), x.dim(1)}, std::move(out), {x}, [nc, hw](TensorNode<T>& n) {
    T* gx = input_grad(n, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t j = 0; j < hw; ++j) gx[i * hw + j] += n.grad[i] / static_cast<T>(hw);
  });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", x.shape(), shape);
  return make_result<T>("reshape", std::move(shape), x.vec(), {x}, [](TensorNode<T>& n) {
    if (T* gx = input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
  });
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.ndim();
  if (perm.size() != rank) throw ShapeError("permute: permutation rank does not match " + to_string(x.shape()));
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(perm.at(i));
  auto in_strides = detail::row_major_strides(x.shape());
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) src_stride[i] = in_strides[perm[i]];
  // Gather index for each output element.
  std::vector<std::size_t> src(x.size());
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t s = 0;
    for (std::size_t o = 0; o < src.size(); ++o) {
      src[o] = s;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        s += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        s -= src_stride[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x[src[o]];
  return make_result<T>("permute", out_shape, std::move(out), {x}, [src = std::move(src)](TensorNode<T>& n) {
    if (T* gx = input_grad(n, 0))
      for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += n.grad[o];
  });
}

/// Swaps the last two axes.
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  if (x.ndim() < 2) throw ShapeError("transpose: need rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> perm(x.ndim());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x.ndim() - 1], perm[x.ndim() - 2]);
  return permute(x, perm);
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = xs[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range for " + to_string(out_shape));
  out_shape[axis] = 0;
  for (const auto& x : xs) {
    Shape a = x.shape(), b = xs[0].shape();
    if (a.size() != b.size()) shape_error("concat", b, a);
    a[axis] = b[axis] = 0;
    if (a != b) shape_error("concat", xs[0].shape(), x.shape());
    out_shape[axis] += x.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  std::vector<std::size_t> widths;
  for (const auto& x : xs) widths.push_back(x.dim(axis) * inner);
  const std::size_t row = out_shape[axis] * inner;
  std::vector<T> out(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      std::copy_n(xs[k].data().data() + o * widths[k], widths[k], out.data() + o * row + off);
      off += widths[k];
    }
  }
  return make_result<T>("concat", out_shape, std::move(out), xs, [outer, row, widths](TensorNode<T>& n) {
    for (std::size_t o = 0; o < outer; ++o) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < widths.size(); ++k) {
        if (T* g = input_grad(n, k))
          for (std::size_t i = 0; i < widths[k]; ++i) g[o * widths[k] + i] += n.grad[o * row + off + i];
        off += widths[k];
      }
    }
  });
}

/// Half-open range [begin, end) along one axis.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.ndim() || begin >= end || end > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + to_string(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
  for (std::size_t i = axis + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::size_t in_row = x.dim(axis) * inner, out_row = (end - begin) * inner, off = begin * inner;
  std::vector<T> out(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + o * in_row + off, out_row, out.data() + o * out_row);
  return make_result<T>("slice", out_shape, std::move(out), {x}, [=](TensorNode<T>& n) {
    T* gx = input_grad(n, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < out_row; ++i) gx[o * in_row + off + i] += n.grad[o * out_row + i];
  });
}

/// Spatial crop of an NCHW tensor.
template <typename T>
BasicTensor<T> crop(const BasicTensor<T>& x, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  detail::require_rank("crop", x, 4);
  return slice(slice(x, 2, y0, y0 + h), 3, x0, x0 + w);
}

// ---------------------------------------------------------------------------
// Linear algebra

/// (M,K)@(K,N) -> (M,N) or batched (B,M,K)@(B,K,N) -> (B,M,N).
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const bool batched = a.ndim() == 3;
  if ((a.ndim() != 2 && a.ndim() != 3) || b.ndim() != a.ndim()) shape_error("matmul", a.shape(), b.shape());
  const std::size_t B = batched ? a.dim(0) : 1;
  const std::size_t M = a.dim(a.ndim() - 2), K = a.dim(a.ndim() - 1);
  const std::size_t K2 = b.dim(b.ndim() - 2), N = b.dim(b.ndim() - 1);
  if (K != K2 || (batched && b.dim(0) != B)) shape_error("matmul", a.shape(), b.shape());
  std::vector<T> out(B * M * N, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t i = 0; i < M; ++i) {
      T* __restrict c = out.data() + (bi * M + i) * N;
      for (std::size_t k = 0; k < K; ++k) {
        const T av = pa[(bi * M + i) * K + k];
        const T* __restrict brow = pb + (bi * K + k) * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += av * brow[j];
      }
    }
  Shape shape = batched ? Shape{B, M, N} : Shape{M, N};
  return make_result<T>("matmul", shape, std::move(out), {a, b}, [B, M, K, N](TensorNode<T>& n) {
    T* ga = input_grad(n, 0);
    T* gb = input_grad(n, 1);
    const T* pa = input_data(n, 0);
    const T* pb = input_data(n, 1);
    const T* g = n.grad.data();
    for (std::size_t bi = 0; bi < B; ++bi)
      for (std::size_t i = 0; i < M; ++i) {
        const T* grow = g + (bi * M + i) * N;
        for (std::size_t k = 0; k < K; ++k) {
          const T* brow = pb + (bi * K + k) * N;
          if (ga) {
            T acc = 0;
            for (std::size_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
            ga[(bi * M + i) * K + k] += acc;
          }
          if (gb) {
            const T av = pa[(bi * M + i) * K + k];
            T* gbrow = gb + (bi * K + k) * N;
            for (std::size_t j = 0; j < N; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
  });
}

/// x (n,in) times W^T with W (out,in), plus optional bias (out).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias = {}) {
  detail::require_rank("linear", x, 2);
  detail::require_rank("linear", weight, 2);
  if (x.dim(1) != weight.dim(1)) shape_error("linear", x.shape(), weight.shape());
  auto y = matmul(x, transpose(weight));
  if (bias.defined()) {
    if (bias.size() != weight.dim(0)) shape_error("linear", weight.shape(), bias.shape());
    y = add(y, reshape(bias, {1, weight.dim(0)}));
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

// C[MxN] += A[MxK] * B[KxN], all row-major. Each C entry accumulates its k
// terms in ascending order, so results match a naive triple loop exactly.
template <typename T>
void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const T* __restrict A, const T* __restrict B,
              T* __restrict C) {
  constexpr std::size_t MR = 4, NR = 32;
  std::size_t i = 0;
  for (; i + MR <= M; i += MR) {
    std::size_t j = 0;
    for (; j + NR <= N; j += NR) {
      T acc[MR][NR];
      for (std::size_t r = 0; r < MR; ++r)
        for (std::size_t c = 0; c < NR; ++c) acc[r][c] = C[(i + r) * N + j + c];
      for (std::size_t k = 0; k < K; ++k) {
        const T* b = B + k * N + j;
        for (std::size_t r = 0; r < MR; ++r) {
          const T a = A[(i + r) * K + k];
          for (std::size_t c = 0; c < NR; ++c) acc[r][c] += a * b[c];
        }
      }
      for (std::size_t r = 0; r < MR; ++r)
        for (std::size_t c = 0; c < NR; ++c) C[(i + r) * N + j + c] = acc[r][c];
    }
    if (j < N)
      for (std::size_t r = 0; r < MR; ++r) {
        T* crow = C + (i + r) * N;
        for (std::size_t k = 0; k < K; ++k) {
          const T a = A[(i + r) * K + k];
          const T* b = B + k * N;
          for (std::size_t c = j; c < N; ++c) crow[c] += a * b[c];
        }
      }
  }
  for (; i < M; ++i) {
    T* crow = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      const T* b = B + k * N;
      for (std::size_t c = 0; c < N; ++c) crow[c] += a * b[c];
    }
  }
}

template <typename T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

struct ConvGeometry {
  std::int64_t C, H, W, KH, KW, s, p, OH, OW;  // src (C,H,W) sampled onto an OHxOW grid
  std::int64_t rows() const { return C * KH * KW; }
  std::int64_t cols() const { return OH * OW; }
};

// col[(c,ky,kx), (oy,ox)] = src[c, oy*s-p+ky, ox*s-p+kx], zero outside.
template <typename T>
void im2col(const ConvGeometry& g, const T* __restrict src, T* __restrict col) {
  for (std::int64_t c = 0; c < g.C; ++c)
    for (std::int64_t ky = 0; ky < g.KH; ++ky)
      for (std::int64_t kx = 0; kx < g.KW; ++kx) {
        T* __restrict row = col + ((c * g.KH + ky) * g.KW + kx) * g.cols();
        const std::int64_t lo = std::max<std::int64_t>(0, ceil_div(g.p - kx, g.s));
        const std::int64_t hi = std::min<std::int64_t>(g.OW - 1, floor_div(g.W - 1 + g.p - kx, g.s));
        for (std::int64_t oy = 0; oy < g.OH; ++oy) {
          T* __restrict r = row + oy * g.OW;
          const std::int64_t iy = oy * g.s - g.p + ky;
          if (iy < 0 || iy >= g.H || hi < lo) {
            std::fill(r, r + g.OW, T(0));
            continue;
          }
          std::fill(r, r + lo, T(0));
          const T* __restrict in = src + (c * g.H + iy) * g.W + (lo * g.s - g.p + kx);
          for (std::int64_t i = 0; i <= hi - lo; ++i) r[lo + i] = in[i * g.s];
          std::fill(r + hi + 1, r + g.OW, T(0));
        }
      }
}

// Adjoint of im2col: dst[c, iy, ix] += col[...] for every in-bounds tap.
template <typename T>
void col2im(const ConvGeometry& g, const T* __restrict col, T* __restrict dst) {
  for (std::int64_t c = 0; c < g.C; ++c)
    for (std::int64_t ky = 0; ky < g.KH; ++ky)
      for (std::int64_t kx = 0; kx < g.KW; ++kx) {
        const T* __restrict row = col + ((c * g.KH + ky) * g.KW + kx) * g.cols();
        const std::int64_t lo = std::max<std::int64_t>(0, ceil_div(g.p - kx, g.s));
        const std::int64_t hi = std::min<std::int64_t>(g.OW - 1, floor_div(g.W - 1 + g.p - kx, g.s));
        if (hi < lo) continue;
        for (std::int64_t oy = 0; oy < g.OH; ++oy) {
          const std::int64_t iy = oy * g.s - g.p + ky;
          if (iy < 0 || iy >= g.H) continue;
          const T* __restrict r = row + oy * g.OW + lo;
          T* __restrict out = dst + (c * g.H + iy) * g.W + (lo * g.s - g.p + kx);
          for (std::int64_t i = 0; i <= hi - lo; ++i) out[i * g.s] += r[i];
        }
      }
}

}  // namespace detail

/// x (N,Ci,H,W), w (Co,Ci,KH,KW), optional bias (Co); zero padding.
/// Each output is accumulated over (ci, ky, kx) in that order, then biased.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias, int stride,
                      int pad) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", w, 4);
  if (x.dim(1) != w.dim(1) || stride < 1 || pad < 0) shape_error("conv2d", x.shape(), w.shape());
  if (bias.defined() && bias.size() != w.dim(0)) shape_error("conv2d", w.shape(), bias.shape());
  const std::int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3), s = stride, p = pad;
  if (H + 2 * p < KH || W + 2 * p < KW) shape_error("conv2d", x.shape(), w.shape());
  const std::int64_t OH = (H + 2 * p - KH) / s + 1, OW = (W + 2 * p - KW) / s + 1;
  const detail::ConvGeometry g{Ci, H, W, KH, KW, s, p, OH, OW};
  const std::size_t K = g.rows(), P = g.cols();

  std::vector<T> out(N * Co * P, T(0));
  std::vector<T> col(K * P);
  for (std::int64_t n = 0; n < N; ++n) {
    detail::im2col(g, x.data().data() + n * Ci * H * W, col.data());
    T* o = out.data() + n * Co * P;
    detail::gemm_acc<T>(Co, P, K, w.data().data(), col.data(), o);
    if (bias.defined())
      for (std::int64_t co = 0; co < Co; ++co)
        for (std::size_t i = 0; i < P; ++i) o[co * P + i] += bias[co];
  }

  std::vector<BasicTensor<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>("conv2d", {std::size_t(N), std::size_t(Co), std::size_t(OH), std::size_t(OW)},
                        std::move(out), inputs, [g, N, Co](TensorNode<T>& nd) {
    T* gx = input_grad(nd, 0);
    T* gw = input_grad(nd, 1);
    T* gb = nd.inputs.size() > 2 ? input_grad(nd, 2) : nullptr;
    const T* px = input_data(nd, 0);
    const T* pw = input_data(nd, 1);
    const T* go = nd.grad.data();
    const std::size_t K = g.rows(), P = g.cols(), in_sz = g.C * g.H * g.W;
    std::vector<T> col(K * P), colT(P * K), wT, gcol;
    if (gx) {
      wT.resize(Co * K);
      detail::transpose_into<T>(Co, K, pw, wT.data());
      gcol.resize(K * P);
    }
    for (std::int64_t n = 0; n < N; ++n) {
      const T* gplane = go + n * Co * P;
      if (gb)
        for (std::int64_t co = 0; co < Co; ++co) {
          T acc = 0;
          for (std::size_t i = 0; i < P; ++i) acc += gplane[co * P + i];
          gb[co] += acc;
        }
      if (gw) {
        detail::im2col(g, px + n * in_sz, col.data());
        detail::transpose_into<T>(K, P, col.data(), colT.data());
        detail::gemm_acc<T>(Co, K, P, gplane, colT.data(), gw);
      }
      if (gx) {
        std::fill(gcol.begin(), gcol.end(), T(0));
        detail::gemm_acc<T>(K, P, Co, wT.data(), gplane, gcol.data());
        detail::col2im(g, gcol.data(), gx + n * in_sz);
      }
    }
  });
}

/// Transposed convolution: x (N,Ci,H,W), w (Ci,Co,KH,KW); output side
/// (H-1)*stride - 2*pad + KH. The adjoint of conv2d with the same geometry.
template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& bias,
                                int stride, int pad) {
  detail::require_rank("conv_transpose2d", x, 4);
  detail::require_rank("conv_transpose2d", w, 4);
  if (x.dim(1) != w.dim(0) || stride < 1 || pad < 0) shape_error("conv_transpose2d", x.shape(), w.shape());
  if (bias.defined() && bias.size() != w.dim(1)) shape_error("conv_transpose2d", w.shape(), bias.shape());
  const std::int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Co = w.dim(1), KH = w.dim(2), KW = w.dim(3), s = stride, p = pad;
  const std::int64_t OH = (H - 1) * s - 2 * p + KH, OW = (W - 1) * s - 2 * p + KW;
  if (OH < 1 || OW < 1) shape_error("conv_transpose2d", x.shape(), w.shape());
  // Geometry of the equivalent forward conv, which maps (Co,OH,OW) onto HxW.
  const detail::ConvGeometry g{Co, OH, OW, KH, KW, s, p, H, W};
  const std::size_t K = g.rows(), P = g.cols();

  std::vector<T> wT(K * Ci);
  detail::transpose_into<T>(Ci, K, w.data().data(), wT.data());
  std::vector<T> out(N * Co * OH * OW, T(0));
  std::vector<T> col(K * P);
  for (std::int64_t n = 0; n < N; ++n) {
    std::fill(col.begin(), col.end(), T(0));
    detail::gemm_acc<T>(K, P, Ci, wT.data(), x.data().data() + n * Ci * P, col.data());
    T* o = out.data() + n * Co * OH * OW;
    detail::col2im(g, col.data(), o);
    if (bias.defined())
      for (std::int64_t co = 0; co < Co; ++co)
        for (std::int64_t i = 0; i < OH * OW; ++i) o[co * OH * OW + i] += bias[co];
  }

  std::vector<BasicTensor<T>> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>("conv_transpose2d", {std::size_t(N), std::size_t(Co), std::size_t(OH), std::size_t(OW)},
                        std::move(out), inputs, [g, N, Ci](TensorNode<T>& nd) {
    T* gx = input_grad(nd, 0);
    T* gw = input_grad(nd, 1);
    T* gb = nd.inputs.size() > 2 ? input_grad(nd, 2) : nullptr;
    const T* px = input_data(nd, 0);
    const T* pw = input_data(nd, 1);
    const T* go = nd.grad.data();
    const std::size_t K = g.rows(), P = g.cols(), out_sz = g.C * g.H * g.W;
    std::vector<T> col(K * P), colT(P * K);
    for (std::int64_t n = 0; n < N; ++n) {
      const T* gplane = go + n * out_sz;
      if (gb)
        for (std::int64_t co = 0; co < g.C; ++co) {
          T acc = 0;
          for (std::int64_t i = 0; i < g.H * g.W; ++i) acc += gplane[co * g.H * g.W + i];
          gb[co] += acc;
        }
      detail::im2col(g, gplane, col.data());
      if (gx) detail::gemm_acc<T>(Ci, P, K, pw, col.data(), gx + n * Ci * P);
      if (gw) {
        detail::transpose_into<T>(K, P, col.data(), colT.data());
        detail::gemm_acc<T>(Ci, K, P, px + n * Ci * P, colT.data(), gw);
      }
    }
  });
}

/// Non-overlapping max pooling with a k×k window (used to bring pixel masks
/// down to latent resolution).
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t k) {
  detail::require_rank("max_pool2d", x, 4);
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k == 0 || H % k || W % k)
    throw ShapeError("max_pool2d: spatial dims of " + to_string(x.shape()) + " not divisible by " + std::to_string(k));
  const std::size_t OH = H / k, OW = W / k;
  std::vector<T> out(N * C * OH * OW);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = nc * H * W + oy * k * W + ox * k;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) {
            const std::size_t i = nc * H * W + (oy * k + dy) * W + ox * k + dx;
            if (x[i] > x[best]) best = i;
          }
        const std::size_t o = (nc * OH + oy) * OW + ox;
        out[o] = x[best];
        arg[o] = best;
      }
  return make_result<T>("max_pool2d", {N, C, OH, OW}, std::move(out), {x}, [arg = std::move(arg)](TensorNode<T>& n) {
    if (T* gx = input_grad(n, 0))
      for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += n.grad[o];
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention

/// Group normalization over (C/G, H, W) per sample and group, with
/// per-channel affine gamma/beta. Works on (N,C,...) of any trailing rank.
template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::size_t groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = 1e-5) {
  if (x.ndim() < 2) throw ShapeError("group_norm: need rank >= 2, got " + to_string(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.size() / (N * C);
  if (groups == 0 || C % groups) throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible by " +
                                                  std::to_string(groups) + " groups");
  if (gamma.size() != C || beta.size() != C) shape_error("group_norm", x.shape(), gamma.shape());
  const std::size_t cpg = C / groups, M = cpg * S;
  std::vector<T> out(x.size()), xhat(x.size());
  std::vector<T> rstd(N * groups);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (n * C + gi * cpg) * S;
      double m = 0, v = 0;
      for (std::size_t i = 0; i < M; ++i) m += x[base + i];
      m /= static_cast<double>(M);
      for (std::size_t i = 0; i < M; ++i) {
        const double d = x[base + i] - m;
        v += d * d;
      }
      v /= static_cast<double>(M);
      const T r = static_cast<T>(1.0 / std::sqrt(v + eps));
      rstd[n * groups + gi] = r;
      for (std::size_t i = 0; i < M; ++i) {
        const std::size_t c = gi * cpg + i / S;
        const T xh = (x[base + i] - static_cast<T>(m)) * r;
        xhat[base + i] = xh;
        out[base + i] = xh * gamma[c] + beta[c];
      }
    }
  return make_result<T>("group_norm", x.shape(), std::move(out), {x, gamma, beta},
                        [=, xhat = std::move(xhat), rstd = std::move(rstd)](TensorNode<T>& nd) {
    T* gx = input_grad(nd, 0);
    T* gg = input_grad(nd, 1);
    T* gbeta = input_grad(nd, 2);
    const T* pg = input_data(nd, 1);
    const T* go = nd.grad.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t gi = 0; gi < groups; ++gi) {
        const std::size_t base = (n * C + gi * cpg) * S;
        double sum_d = 0, sum_dx = 0;
        for (std::size_t i = 0; i < M; ++i) {
          const std::size_t c = gi * cpg + i / S;
          const double d = static_cast<double>(go[base + i]) * pg[c];
          sum_d += d;
          sum_dx += d * xhat[base + i];
          if (gg) gg[c] += go[base + i] * xhat[base + i];
          if (gbeta) gbeta[c] += go[base + i];
        }
        if (!gx) continue;
        const double md = sum_d / static_cast<double>(M), mdx = sum_dx / static_cast<double>(M);
        const double r = rstd[n * groups + gi];
        for (std::size_t i = 0; i < M; ++i) {
          const std::size_t c = gi * cpg + i / S;
          const double d = static_cast<double>(go[base + i]) * pg[c];
          gx[base + i] += static_cast<T>(r * (d - md - xhat[base + i] * mdx));
        }
      }
  });
}

/// Softmax over the last axis.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  const std::size_t L = x.shape().back(), rows = x.size() / L;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * L;
    T* o = out.data() + r * L;
    const T mx = *std::max_element(in, in + L);
    T total = 0;
    for (std::size_t i = 0; i < L; ++i) total += (o[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < L; ++i) o[i] /= total;
  }
  return make_result<T>("softmax", x.shape(), std::move(out), {x}, [rows, L](TensorNode<T>& n) {
    T* gx = input_grad(n, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = n.data.data() + r * L;
      const T* g = n.grad.data() + r * L;
      T dot = 0;
      for (std::size_t i = 0; i < L; ++i) dot += g[i] * y[i];
      for (std::size_t i = 0; i < L; ++i) gx[r * L + i] += y[i] * (g[i] - dot);
    }
  });
}

/// Scaled dot-product attention probabilities softmax(q k^T / sqrt(d)):
/// q (B,n,d), k (B,m,d) -> (B,n,m).
template <typename T>
BasicTensor<T> attention_weights(const BasicTensor<T>& q, const BasicTensor<T>& k) {
  detail::require_rank("attention", q, 3);
  detail::require_rank("attention", k, 3);
  if (q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) shape_error("attention", q.shape(), k.shape());
  const T inv = T(1) / std::sqrt(static_cast<T>(q.dim(2)));
  return softmax(scale(matmul(q, transpose(k)), inv));
}

/// Cross-attention from n query positions onto m context tokens.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v) {
  detail::require_rank("attention", v, 3);
  if (v.dim(0) != k.dim(0) || v.dim(1) != k.dim(1)) shape_error("attention", k.shape(), v.shape());
  return matmul(attention_weights(q, k), v);
}

// ---------------------------------------------------------------------------
// Resampling

/// Nearest-neighbour resize of (N,C,H,W) with half-pixel centres.
template <typename T>
BasicTensor<T> resize_nearest(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank("resize_nearest", x, 4);
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_nearest: empty output size");
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  auto src_index = [](std::size_t o, std::size_t in, std::size_t out) {
    return std::min(in - 1, ((2 * o + 1) * in) / (2 * out));
  };
  std::vector<std::size_t> src(NC * out_h * out_w);
  for (std::size_t c = 0; c < NC; ++c)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox)
        src[(c * out_h + oy) * out_w + ox] = (c * H + src_index(oy, H, out_h)) * W + src_index(ox, W, out_w);
  std::vector<T> out(src.size());
  for (std::size_t o = 0; o < src.size(); ++o) out[o] = x[src[o]];
  return make_result<T>("resize_nearest", {x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x},
                        [src = std::move(src)](TensorNode<T>& n) {
    if (T* gx = input_grad(n, 0))
      for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += n.grad[o];
  });
}

namespace detail {
struct LerpTap {
  std::size_t i0, i1;
  double w;  // weight of i1
};
inline std::vector<LerpTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(src);
    taps[o] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace detail

/// Bilinear resize of (N,C,H,W) with half-pixel centres and edge clamping.
/// Written in lerp form so a constant map stays exactly constant.
template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank("resize_bilinear", x, 4);
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: empty output size");
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  auto ty = detail::bilinear_taps(H, out_h), tx = detail::bilinear_taps(W, out_w);
  std::vector<T> out(NC * out_h * out_w);
  for (std::size_t c = 0; c < NC; ++c) {
    const T* in = x.data().data() + c * H * W;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      const T wy = static_cast<T>(a.w);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const T wx = static_cast<T>(b.w);
        const T top = in[a.i0 * W + b.i0] + wx * (in[a.i0 * W + b.i1] - in[a.i0 * W + b.i0]);
        const T bot = in[a.i1 * W + b.i0] + wx * (in[a.i1 * W + b.i1] - in[a.i1 * W + b.i0]);
        out[(c * out_h + oy) * out_w + ox] = top + wy * (bot - top);
      }
    }
  }
  return make_result<T>("resize_bilinear", {x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x},
                        [=, ty = std::move(ty), tx = std::move(tx)](TensorNode<T>& n) {
    T* gx = input_grad(n, 0);
    if (!gx) return;
    for (std::size_t c = 0; c < NC; ++c) {
      T* g = gx + c * H * W;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[oy];
        const T wy = static_cast<T>(a.w);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[ox];
          const T wx = static_cast<T>(b.w);
          const T go = n.grad[(c * out_h + oy) * out_w + ox];
          g[a.i0 * W + b.i0] += go * (T(1) - wy) * (T(1) - wx);
          g[a.i0 * W + b.i1] += go * (T(1) - wy) * wx;
          g[a.i1 * W + b.i0] += go * wy * (T(1) - wx);
          g[a.i1 * W + b.i1] += go * wy * wx;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Lookup

/// Rows of `table` (V,d) selected by `ids` -> (ids.size(), d).
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, const std::vector<int>& ids) {
  detail::require_rank("embedding", table, 2);
  const std::size_t V = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V)
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range for table " + to_string(table.shape()));
    std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
  }
  return make_result<T>("embedding", {ids.size(), d}, std::move(out), {table}, [ids, d](TensorNode<T>& n) {
    if (T* g = input_grad(n, 0))
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[ids[i] * d + j] += n.grad[i * d + j];
  });
}

}  // namespace soekit

#endif  // SOEKIT_OPS_HPP
