// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_LOSS_HPP
#define SOEKIT_LOSS_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "soekit/ops.hpp"

namespace soekit {

/// Sum of per-element Huber penalties divided by `divisor`.
///   ½r²            if |r| <= delta
///   delta(|r| - ½delta)  otherwise,   r = pred - target.
template <typename T>
BasicTensor<T> huber_reduce(const BasicTensor<T>& pred, const BasicTensor<T>& target, T delta, T divisor) {
  if (pred.shape() != target.shape()) shape_error("huber", pred.shape(), target.shape());
  if (!(delta > 0)) throw Error("huber: delta must be positive, got " + std::to_string(delta));
  T acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T r = pred[i] - target[i];
    const T a = std::abs(r);
    acc += a <= delta ? T(0.5) * r * r : delta * (a - T(0.5) * delta);
  }
  const T inv = T(1) / divisor;
  return make_result<T>("huber", {1}, {acc * inv}, {pred, target}, [delta, inv](TensorNode<T>& n) {
    T* gp = input_grad(n, 0);
    T* gt = input_grad(n, 1);
    const T* p = input_data(n, 0);
    const T* t = input_data(n, 1);
    const T g = n.grad[0] * inv;
    for (std::size_t i = 0; i < n.inputs[0]->data.size(); ++i) {
      const T r = p[i] - t[i];
      const T d = std::abs(r) <= delta ? r : (r > 0 ? delta : -delta);
      if (gp) gp[i] += g * d;
      if (gt) gt[i] -= g * d;
    }
  });
}

/// Mean Huber loss over all elements.
template <typename T>
BasicTensor<T> huber(const BasicTensor<T>& pred, const BasicTensor<T>& target, T delta = T(1)) {
  return huber_reduce(pred, target, delta, static_cast<T>(pred.size()));
}

template <typename T>
BasicTensor<T> mse_reduce(const BasicTensor<T>& pred, const BasicTensor<T>& target, T divisor) {
  if (pred.shape() != target.shape()) shape_error("mse", pred.shape(), target.shape());
  T acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T r = pred[i] - target[i];
    acc += r * r;
  }
  const T inv = T(1) / divisor;
  return make_result<T>("mse", {1}, {acc * inv}, {pred, target}, [inv](TensorNode<T>& n) {
    T* gp = input_grad(n, 0);
    T* gt = input_grad(n, 1);
    const T* p = input_data(n, 0);
    const T* t = input_data(n, 1);
    const T g = n.grad[0] * inv * T(2);
    for (std::size_t i = 0; i < n.inputs[0]->data.size(); ++i) {
      const T r = p[i] - t[i];
      if (gp) gp[i] += g * r;
      if (gt) gt[i] -= g * r;
    }
  });
}

template <typename T>
BasicTensor<T> mse(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  return mse_reduce(pred, target, static_cast<T>(pred.size()));
}

/// Mean negative log-likelihood of `labels` under softmax(logits), logits (N,K).
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<int>& labels) {
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                           std::to_string(N) + " rows");
  std::vector<T> prob(N * K);
  T loss = 0;
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K)
      throw ShapeError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    const T* row = logits.data().data() + i * K;
    const T mx = *std::max_element(row, row + K);
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - mx));
    for (std::size_t k = 0; k < K; ++k) prob[i * K + k] = static_cast<T>(std::exp(static_cast<double>(row[k] - mx)) / z);
    loss += static_cast<T>(std::log(z)) + mx - row[labels[i]];
  }
  return make_result<T>("cross_entropy", {1}, {loss / static_cast<T>(N)}, {logits},
                        [N, K, labels, prob = std::move(prob)](TensorNode<T>& n) {
    T* g = input_grad(n, 0);
    if (!g) return;
    const T s = n.grad[0] / static_cast<T>(N);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t k = 0; k < K; ++k)
        g[i * K + k] += s * (prob[i * K + k] - (static_cast<int>(k) == labels[i] ? T(1) : T(0)));
  });
}

/// Cross-entropy against per-row target distributions `targets` (N,K),
/// averaged over rows.
template <typename T>
BasicTensor<T> soft_cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& targets) {
  detail::require_rank("soft_cross_entropy", logits, 2);
  if (logits.shape() != targets.shape()) shape_error("soft_cross_entropy", logits.shape(), targets.shape());
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::vector<T> prob(N * K);
  T loss = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const T* row = logits.data().data() + i * K;
    const T mx = *std::max_element(row, row + K);
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k] - mx));
    const T lz = static_cast<T>(std::log(z)) + mx;
    for (std::size_t k = 0; k < K; ++k) {
      prob[i * K + k] = static_cast<T>(std::exp(static_cast<double>(row[k] - mx)) / z);
      loss += targets[i * K + k] * (lz - row[k]);
    }
  }
  return make_result<T>("soft_cross_entropy", {1}, {loss / static_cast<T>(N)}, {logits},
                        [N, K, prob = std::move(prob), tgt = targets.vec()](TensorNode<T>& n) {
    T* g = input_grad(n, 0);
    if (!g) return;
    const T s = n.grad[0] / static_cast<T>(N);
    for (std::size_t i = 0; i < N; ++i) {
      T mass = 0;
      for (std::size_t k = 0; k < K; ++k) mass += tgt[i * K + k];
      for (std::size_t k = 0; k < K; ++k) g[i * K + k] += s * (mass * prob[i * K + k] - tgt[i * K + k]);
    }
  });
}

}  // namespace soekit

#endif  // SOEKIT_LOSS_HPP
