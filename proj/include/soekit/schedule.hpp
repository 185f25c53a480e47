// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_SCHEDULE_HPP
#define SOEKIT_SCHEDULE_HPP

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "soekit/ops.hpp"

namespace soekit {

struct ScheduleParams {
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

/// Variance schedule. Index t runs 1..T; t = 0 denotes clean data
/// (alpha = 1, sigma = 0) so DDIM can step all the way down.
///
/// beta_bar(t) = 1 - prod_{s<=t} (1 - beta_s) is the cumulative noise level,
/// alpha(t) = sqrt(1 - beta_bar(t)) and sigma(t) = sqrt(beta_bar(t)).
class NoiseSchedule {
 public:
  static NoiseSchedule make(const ScheduleParams& p) { return make(p.timesteps, p.beta_start, p.beta_end); }

  static NoiseSchedule make(int timesteps, double beta_start, double beta_end) {
    if (timesteps < 1) throw Error("schedule: T must be >= 1, got " + std::to_string(timesteps));
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
      throw Error("schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.params_ = {timesteps, beta_start, beta_end};
    s.beta_.resize(timesteps);
    s.beta_bar_.resize(timesteps);
    s.alpha_.resize(timesteps);
    s.sigma_.resize(timesteps);
    double keep = 1.0;
    for (int i = 0; i < timesteps; ++i) {
      const double frac = timesteps == 1 ? 0.0 : static_cast<double>(i) / (timesteps - 1);
      s.beta_[i] = beta_start + (beta_end - beta_start) * frac;
      keep *= 1.0 - s.beta_[i];
      s.beta_bar_[i] = 1.0 - keep;
      s.alpha_[i] = std::sqrt(keep);
      s.sigma_[i] = std::sqrt(s.beta_bar_[i]);
    }
    return s;
  }

  int timesteps() const { return params_.timesteps; }
  const ScheduleParams& params() const { return params_; }

  double beta(int t) const { return beta_.at(check(t) - 1); }
  double beta_bar(int t) const { return t == 0 ? 0.0 : beta_bar_.at(check(t) - 1); }
  double alpha(int t) const { return t == 0 ? 1.0 : alpha_.at(check(t) - 1); }
  double sigma(int t) const { return t == 0 ? 0.0 : sigma_.at(check(t) - 1); }

 private:
  int check(int t) const {
    if (t < 0 || t > params_.timesteps)
      throw Error("schedule: timestep " + std::to_string(t) + " outside [1, " + std::to_string(params_.timesteps) + "]");
    return t;
  }

  ScheduleParams params_;
  std::vector<double> beta_, beta_bar_, alpha_, sigma_;
};

namespace detail {
template <typename T>
void check_timestep(const NoiseSchedule& s, int t, int lo = 1) {
  if (t < lo || t > s.timesteps())
    throw Error("schedule: timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                std::to_string(s.timesteps()) + "]");
}

// Per-sample coefficient laid out as (N,1,...,1) for broadcasting over x.
template <typename T>
BasicTensor<T> per_sample(const Shape& like, const std::vector<double>& values) {
  Shape s(like.size(), 1);
  s[0] = values.size();
  std::vector<T> v(values.begin(), values.end());
  return BasicTensor<T>(s, std::move(v));
}
}  // namespace detail

/// alpha * z0 + sigma * eps with explicit coefficients.
template <typename T>
BasicTensor<T> noise_mix(const BasicTensor<T>& z0, const BasicTensor<T>& eps, double alpha, double sigma) {
  if (z0.shape() != eps.shape()) shape_error("add_noise", z0.shape(), eps.shape());
  return add(scale(z0, static_cast<T>(alpha)), scale(eps, static_cast<T>(sigma)));
}

/// Forward noising of a whole tensor at one timestep.
template <typename T>
BasicTensor<T> add_noise(const BasicTensor<T>& z0, const BasicTensor<T>& eps, int t, const NoiseSchedule& s) {
  detail::check_timestep<T>(s, t);
  return noise_mix(z0, eps, s.alpha(t), s.sigma(t));
}

/// Forward noising with one timestep per leading-axis sample.
template <typename T>
BasicTensor<T> add_noise(const BasicTensor<T>& z0, const BasicTensor<T>& eps, std::span<const int> ts,
                         const NoiseSchedule& s) {
  if (z0.shape() != eps.shape()) shape_error("add_noise", z0.shape(), eps.shape());
  if (ts.size() != z0.dim(0)) throw ShapeError("add_noise: one timestep per sample required");
  std::vector<double> a, b;
  for (int t : ts) {
    detail::check_timestep<T>(s, t);
    a.push_back(s.alpha(t));
    b.push_back(s.sigma(t));
  }
  return add(mul(z0, detail::per_sample<T>(z0.shape(), a)), mul(eps, detail::per_sample<T>(z0.shape(), b)));
}

/// Clean-latent estimate (z_t - sigma_t * eps_pred) / alpha_t.
template <typename T>
BasicTensor<T> predict_z0(const BasicTensor<T>& z_t, const BasicTensor<T>& eps_pred, int t, const NoiseSchedule& s) {
  if (z_t.shape() != eps_pred.shape()) shape_error("predict_z0", z_t.shape(), eps_pred.shape());
  detail::check_timestep<T>(s, t);
  const double a = s.alpha(t);
  if (a < 1e-8) throw Error("predict_z0: alpha_t below 1e-8 at t=" + std::to_string(t));
  return scale(sub(z_t, scale(eps_pred, static_cast<T>(s.sigma(t)))), static_cast<T>(1.0 / a));
}

template <typename T>
BasicTensor<T> predict_z0(const BasicTensor<T>& z_t, const BasicTensor<T>& eps_pred, std::span<const int> ts,
                          const NoiseSchedule& s) {
  if (z_t.shape() != eps_pred.shape()) shape_error("predict_z0", z_t.shape(), eps_pred.shape());
  if (ts.size() != z_t.dim(0)) throw ShapeError("predict_z0: one timestep per sample required");
  std::vector<double> sig, inv;
  for (int t : ts) {
    detail::check_timestep<T>(s, t);
    if (s.alpha(t) < 1e-8) throw Error("predict_z0: alpha_t below 1e-8 at t=" + std::to_string(t));
    sig.push_back(s.sigma(t));
    inv.push_back(1.0 / s.alpha(t));
  }
  const auto& shape = z_t.shape();
  return mul(sub(z_t, mul(eps_pred, detail::per_sample<T>(shape, sig))), detail::per_sample<T>(shape, inv));
}

/// Deterministic DDIM update from t to t_prev (t_prev = 0 returns the clean
/// estimate itself).
template <typename T>
BasicTensor<T> ddim_step(const BasicTensor<T>& z_t, const BasicTensor<T>& eps_pred, int t, int t_prev,
                         const NoiseSchedule& s) {
  if (t_prev >= t) throw Error("ddim_step: t_prev (" + std::to_string(t_prev) + ") must be < t (" + std::to_string(t) + ")");
  detail::check_timestep<T>(s, t_prev, 0);
  auto z0 = predict_z0(z_t, eps_pred, t, s);
  if (t_prev == 0) return z0;
  return noise_mix(z0, eps_pred, s.alpha(t_prev), s.sigma(t_prev));
}

/// Descending timesteps for an n-step DDIM chain, ending above 0:
/// round(T*k/n) for k = n..1.
inline std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw Error("ddim_timesteps: steps must be in [1, T]");
  std::vector<int> ts;
  for (int k = steps; k >= 1; --k) ts.push_back(static_cast<int>(std::lround(static_cast<double>(T) * k / steps)));
  return ts;
}

}  // namespace soekit

#endif  // SOEKIT_SCHEDULE_HPP
