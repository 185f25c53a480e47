// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_OPTIM_HPP
#define SOEKIT_OPTIM_HPP

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "soekit/tensor.hpp"

namespace soekit {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, BasicTensor<T>>>;

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are float, matching parameters.
template <typename T>
class Adam {
 public:
  Adam(NamedTensors<T> params, AdamOptions options = {}) : params_(std::move(params)), options_(options) {
    for (const auto& [name, p] : params_) {
      first_.emplace_back(p.size(), T(0));
      second_.emplace_back(p.size(), T(0));
    }
  }

  /// Applies one update, clears gradients and bumps the step counter.
  void step() {
    for (const auto& [name, p] : params_)
      if (!p.has_grad()) throw Error("adam: parameter '" + name + "' has no gradient");
    ++step_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    const T b1 = static_cast<T>(options_.beta1), b2 = static_cast<T>(options_.beta2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k].second;
      auto data = p.data();
      auto grad = p.grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        const T g = grad[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        const double mhat = m[i] / c1, vhat = v[i] / c2;
        data[i] -= static_cast<T>(options_.lr * mhat / (std::sqrt(vhat) + options_.eps));
      }
      p.zero_grad();
    }
  }

  long step_count() const { return step_; }
  const AdamOptions& options() const { return options_; }
  const NamedTensors<T>& params() const { return params_; }

  /// Moment buffers exposed for checkpointing.
  std::vector<std::vector<T>>& first_moments() { return first_; }
  std::vector<std::vector<T>>& second_moments() { return second_; }
  const std::vector<std::vector<T>>& first_moments() const { return first_; }
  const std::vector<std::vector<T>>& second_moments() const { return second_; }
  void set_step_count(long s) { step_ = s; }

 private:
  NamedTensors<T> params_;
  AdamOptions options_;
  std::vector<std::vector<T>> first_, second_;
  long step_ = 0;
};

/// Plain gradient descent, theta <- theta - lr * grad.
template <typename T>
class Sgd {
 public:
  Sgd(NamedTensors<T> params, double lr) : params_(std::move(params)), lr_(lr) {}

  void step() {
    for (const auto& [name, p] : params_)
      if (!p.has_grad()) throw Error("sgd: parameter '" + name + "' has no gradient");
    for (auto& [name, p] : params_) {
      auto data = p.data();
      auto grad = p.grad();
      for (std::size_t i = 0; i < data.size(); ++i) data[i] -= static_cast<T>(lr_ * grad[i]);
      p.zero_grad();
    }
    ++step_;
  }

  long step_count() const { return step_; }

 private:
  NamedTensors<T> params_;
  double lr_;
  long step_ = 0;
};

}  // namespace soekit

#endif  // SOEKIT_OPTIM_HPP
