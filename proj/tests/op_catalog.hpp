// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0
//
// One gradient check per differentiable op. Shared by the unit tests and the
// acceptance binary.

#ifndef SOEKIT_TESTS_OP_CATALOG_HPP
#define SOEKIT_TESTS_OP_CATALOG_HPP

#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "soekit/distill.hpp"
#include "soekit/lora.hpp"
#include "soekit/loss.hpp"
#include "soekit/nets.hpp"
#include "soekit/ops.hpp"
#include "soekit/schedule.hpp"

namespace soekit::testing {

struct OpCase {
  std::string name;
  std::function<GradCheck()> run;
};

// sum(y * R) for a fixed random R, so no gradient entry cancels by symmetry.
inline Td weighted_sum(const Td& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, Td::randn(y.shape(), rng)));
}

// Full objective on a tiny double model: denoise + distill + masked VAE
// reconstruction, differentiated w.r.t. the adapter factors and the VAE.
inline GradCheck composite_total_loss_check() {
  UnetConfig uc;
  uc.base_width = 8;
  uc.groups = 4;
  uc.cond_dim = 8;
  uc.temb_dim = 16;
  Unet<double> unet(uc, 3);
  LoraConfig lc;
  lc.blocks = {"mid", "down.1+up.0"};
  auto set = attach(unet, lc, 4);
  Vae<double> vae(VaeConfig{4, 4, 4}, 5);
  Rng rng(31);
  std::vector<Td> leaves;
  for (auto& [t, a] : set.adapters()) {
    for (auto& v : a.B.data()) v = rng.normal() * 0.1;
    leaves.push_back(a.A);
    leaves.push_back(a.B);
  }
  vae.registry().set_trainable(true);
  for (const auto& [n, p] : vae.registry().params()) leaves.push_back(p);

  auto box = [](std::size_t x0, std::size_t y0, std::size_t k) {
    std::vector<double> m(32 * 32, 0.0);
    for (std::size_t y = y0; y < y0 + k; ++y)
      for (std::size_t x = x0; x < x0 + k; ++x) m[y * 32 + x] = 1.0;
    return Td({1, 1, 32, 32}, m);
  };
  const auto m = concat<double>({box(3, 5, 6), box(20, 18, 7)}, 0);
  const auto mp = concat<double>({box(4, 4, 12), box(10, 12, 14)}, 0);
  std::vector<double> px(2 * 3 * 32 * 32);
  for (auto& v : px) v = rng.uniform();
  const Td x({2, 3, 32, 32}, px);
  const auto zp = Td::randn({2, 4, 8, 8}, rng);
  const auto eps = Td::randn({2, 4, 8, 8}, rng), eps_t = Td::randn({2, 4, 8, 8}, rng);
  const auto ctx = Td::randn({2, 2, 8}, rng);
  const std::vector<int> ts{40, 650};
  const auto sched = NoiseSchedule::make(1000, 1e-4, 0.02);
  TrainConfig cfg;
  cfg.distill_weight = 0.5;  // large enough that the distill term shows in the gradient
  Td z;
  {
    NoGradGuard g;
    z = vae.encode(x);  // latents are inputs to the diffusion losses, as in training
  }

  return grad_check(
      leaves,
      [&] {
        Td z0p;
        {
          NoGradGuard g;
          const auto zp_t = add_noise(zp, eps_t, std::span<const int>(ts), sched);
          z0p = predict_z0(zp_t, unet.forward(zp_t, ts, ctx, mp), std::span<const int>(ts), sched);
        }
        const auto z_t = add_noise(z, eps, std::span<const int>(ts), sched);
        const auto eps_pred = unet.forward(z_t, ts, ctx, m, &set);
        const auto m_lat = max_pool2d(m, 4), mp_lat = max_pool2d(mp, 4);
        BasicLossParts<double> parts;
        parts.denoise = denoise_loss(eps, eps_pred, m_lat);
        parts.distill = distill_loss(predict_z0(z_t, eps_pred, std::span<const int>(ts), sched), m_lat, z0p, mp_lat);
        parts.vae = masked_recon_loss(x, vae.decode(vae.encode(x)), m);
        return total_loss(parts, cfg);
      },
      1e-5, 4);
}

inline std::vector<OpCase> op_catalog() {
  std::vector<OpCase> c;
  auto unary = [&](std::string name, Shape shape, std::function<Td(const Td&)> op, double stddev = 1.0) {
    c.push_back({name, [=] {
                   Rng rng(std::hash<std::string>{}(name));
                   auto x = Td::randn(shape, rng, stddev, true);
                   return grad_check({x}, [&] { return weighted_sum(op(x), 99); });
                 }});
  };
  auto binary = [&](std::string name, Shape sa, Shape sb, std::function<Td(const Td&, const Td&)> op) {
    c.push_back({name, [=] {
                   Rng rng(std::hash<std::string>{}(name));
                   auto a = Td::randn(sa, rng, 1.0, true);
                   auto b = Td::randn(sb, rng, 1.0, true);
                   return grad_check({a, b}, [&] { return weighted_sum(op(a, b), 98); });
                 }});
  };

  binary("add", {2, 3, 4}, {1, 3, 1}, [](const Td& a, const Td& b) { return add(a, b); });
  binary("sub", {2, 3, 4}, {2, 1, 4}, [](const Td& a, const Td& b) { return sub(a, b); });
  binary("mul", {2, 3, 4}, {2, 3, 1}, [](const Td& a, const Td& b) { return mul(a, b); });
  c.push_back({"mask_mul", [] {
                 Rng rng(4);
                 auto x = Td::randn({2, 3, 4, 4}, rng, 1.0, true);
                 std::vector<double> m(32);
                 for (auto& v : m) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
                 Td mask({2, 1, 4, 4}, m);
                 return grad_check({x}, [&] { return weighted_sum(mask_mul(x, mask), 5); });
               }});
  unary("scale", {3, 4}, [](const Td& x) { return scale(x, 2.5); });
  unary("add_scalar", {3, 4}, [](const Td& x) { return add_scalar(x, -0.7); });
  unary("silu", {3, 5}, [](const Td& x) { return silu(x); }, 2.0);
  unary("sigmoid", {3, 5}, [](const Td& x) { return sigmoid(x); }, 2.0);
  unary("sum", {3, 5}, [](const Td& x) { return sum(mul(x, x)); });
  unary("mean", {3, 5}, [](const Td& x) { return mean(mul(x, x)); });
  unary("mean_hw", {2, 3, 4, 5}, [](const Td& x) { return mean_hw(x); });
  unary("reshape", {2, 6}, [](const Td& x) { return reshape(x, {3, 4}); });
  unary("permute", {2, 3, 4, 5}, [](const Td& x) { return permute(x, {0, 2, 3, 1}); });
  unary("transpose", {3, 5}, [](const Td& x) { return transpose(x); });
  binary("concat", {2, 3, 4}, {2, 2, 4}, [](const Td& a, const Td& b) { return concat<double>({a, b, a}, 1); });
  unary("slice", {4, 3, 2}, [](const Td& x) { return slice(x, 0, 1, 3); });
  unary("crop", {2, 3, 6, 7}, [](const Td& x) { return crop(x, 1, 2, 4, 3); });
  binary("matmul", {3, 4}, {4, 5}, [](const Td& a, const Td& b) { return matmul(a, b); });
  binary("matmul_batched", {2, 3, 4}, {2, 4, 5}, [](const Td& a, const Td& b) { return matmul(a, b); });
  c.push_back({"linear", [] {
                 Rng rng(6);
                 auto x = Td::randn({4, 5}, rng, 1.0, true);
                 auto w = Td::randn({3, 5}, rng, 1.0, true);
                 auto b = Td::randn({3}, rng, 1.0, true);
                 return grad_check({x, w, b}, [&] { return weighted_sum(linear(x, w, b), 7); });
               }});
  for (int stride : {1, 2}) {
    c.push_back({"conv2d_s" + std::to_string(stride), [stride] {
                   Rng rng(8 + stride);
                   auto x = Td::randn({2, 3, 7, 6}, rng, 1.0, true);
                   auto w = Td::randn({4, 3, 3, 3}, rng, 1.0, true);
                   auto b = Td::randn({4}, rng, 1.0, true);
                   return grad_check({x, w, b}, [&] { return weighted_sum(conv2d(x, w, b, stride, 1), 9); });
                 }});
  }
  c.push_back({"conv_transpose2d", [] {
                 Rng rng(10);
                 auto x = Td::randn({2, 3, 4, 3}, rng, 1.0, true);
                 auto w = Td::randn({3, 2, 4, 4}, rng, 1.0, true);
                 auto b = Td::randn({2}, rng, 1.0, true);
                 return grad_check({x, w, b}, [&] { return weighted_sum(conv_transpose2d(x, w, b, 2, 1), 11); });
               }});
  unary("max_pool2d", {2, 3, 8, 8}, [](const Td& x) { return max_pool2d(x, 2); });
  c.push_back({"group_norm", [] {
                 Rng rng(12);
                 auto x = Td::randn({2, 4, 3, 3}, rng, 1.0, true);
                 auto g = Td::randn({4}, rng, 1.0, true);
                 auto b = Td::randn({4}, rng, 1.0, true);
                 return grad_check({x, g, b}, [&] { return weighted_sum(group_norm(x, 2, g, b), 13); });
               }});
  unary("softmax", {3, 5}, [](const Td& x) { return softmax(x); });
  binary("attention_weights", {2, 4, 3}, {2, 5, 3}, [](const Td& q, const Td& k) { return attention_weights(q, k); });
  c.push_back({"attention", [] {
                 Rng rng(14);
                 auto q = Td::randn({2, 4, 3}, rng, 1.0, true);
                 auto k = Td::randn({2, 5, 3}, rng, 1.0, true);
                 auto v = Td::randn({2, 5, 6}, rng, 1.0, true);
                 return grad_check({q, k, v}, [&] { return weighted_sum(attention(q, k, v), 15); });
               }});
  unary("resize_nearest_up", {1, 2, 3, 4}, [](const Td& x) { return resize_nearest(x, 7, 8); });
  unary("resize_nearest_down", {1, 2, 8, 6}, [](const Td& x) { return resize_nearest(x, 3, 4); });
  unary("resize_bilinear_up", {1, 2, 3, 4}, [](const Td& x) { return resize_bilinear(x, 7, 8); });
  unary("resize_bilinear_down", {1, 2, 9, 7}, [](const Td& x) { return resize_bilinear(x, 4, 3); });
  unary("embedding", {5, 3}, [](const Td& t) { return embedding(t, {4, 0, 4, 2}); });
  binary("huber", {4, 6}, {4, 6}, [](const Td& a, const Td& b) { return huber(scale(a, 2.0), b, 1.0); });
  binary("huber_reduce", {4, 6}, {4, 6}, [](const Td& a, const Td& b) { return huber_reduce(a, b, 0.5, 7.0); });
  binary("mse", {4, 6}, {4, 6}, [](const Td& a, const Td& b) { return mse(a, b); });
  binary("mse_reduce", {4, 6}, {4, 6}, [](const Td& a, const Td& b) { return mse_reduce(a, b, 5.0); });
  unary("cross_entropy", {4, 5}, [](const Td& x) { return cross_entropy(x, {0, 3, 4, 1}); });
  c.push_back({"soft_cross_entropy", [] {
                 Rng rng(16);
                 auto x = Td::randn({3, 4}, rng, 1.0, true);
                 auto t = softmax(Td::randn({3, 4}, rng));
                 return grad_check({x}, [&] { return soft_cross_entropy(x, t); });
               }});
  c.push_back({"lora_delta", [] {
                 Rng rng(17);
                 LoraAdapter<double> a;
                 a.A = Td::randn({2, 5}, rng, 1.0, true);
                 a.B = Td::randn({3, 2}, rng, 1.0, true);
                 a.alpha = 0.7;
                 auto x = Td::randn({4, 5}, rng, 1.0, true);
                 auto w0 = Td::randn({3, 5}, rng, 1.0, true);
                 return grad_check({x, w0, a.A, a.B}, [&] { return weighted_sum(adapted_matmul(x, w0, a), 18); });
               }});
  c.push_back({"add_noise_predict_z0", [] {
                 Rng rng(19);
                 const auto s = NoiseSchedule::make(1000, 1e-4, 0.02);
                 auto z = Td::randn({2, 3, 2, 2}, rng, 1.0, true);
                 auto e = Td::randn({2, 3, 2, 2}, rng, 1.0, true);
                 auto ep = Td::randn({2, 3, 2, 2}, rng, 1.0, true);
                 const std::vector<int> ts{10, 700};
                 return grad_check({z, e, ep}, [&] {
                   return weighted_sum(predict_z0(add_noise(z, e, std::span<const int>(ts), s), ep,
                                                  std::span<const int>(ts), s),
                                       20);
                 });
               }});
  c.push_back({"composite_total_loss", composite_total_loss_check});
  return c;
}

}  // namespace soekit::testing

#endif  // SOEKIT_TESTS_OP_CATALOG_HPP
