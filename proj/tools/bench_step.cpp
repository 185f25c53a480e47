// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Rough per-step timing of the denoiser and autoencoder at desk scale.

#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "soekit/loss.hpp"
#include "soekit/nets.hpp"

using namespace soekit;

int main(int argc, char** argv) {
  const std::size_t N = argc > 1 ? std::atoi(argv[1]) : 8;
  const int width = argc > 2 ? std::atoi(argv[2]) : 32;
  UnetConfig ucfg;
  ucfg.base_width = width;
  Unet<float> unet(ucfg, 1);
  Vae<float> vae(VaeConfig{}, 1);
  ConditionEmbedding<float> cond(CondConfig{}, 1);
  auto lora = attach(unet, LoraConfig{}, 1);
  std::printf("unet params %zu, lora params %zu, vae params %zu\n", unet.registry().parameter_count(),
              lora.parameter_count(), vae.registry().parameter_count());
  Rng rng(7);
  auto z = Tensor::randn({N, 4, 16, 16}, rng);
  auto x = Tensor::full({N, 3, 64, 64}, 0.5f);
  auto m = Tensor::zeros({N, 1, 64, 64});
  std::vector<int> ts(N, 500), labels(N, 1), colors(N, 2);
  std::vector<PromptStyle> styles(N, PromptStyle::ColorLabel);
  using clk = std::chrono::steady_clock;
  auto ms = [](auto a, auto b) { return std::chrono::duration<double, std::milli>(b - a).count(); };
  for (int rep = 0; rep < 3; ++rep) {
    auto t0 = clk::now();
    auto ctx = cond(labels, colors, styles);
    auto eps = unet.forward(z, ts, ctx, m, &lora);
    auto t1 = clk::now();
    auto loss = mean(mul(eps, eps));
    backward(loss);
    auto t2 = clk::now();
    {
      NoGradGuard g;
      unet.forward(z, ts, ctx, m, nullptr);
    }
    auto t3 = clk::now();
    auto rec = vae.decode(vae.encode(x));
    backward(mean(rec));
    auto t4 = clk::now();
    NoGradGuard g;
    vae.encode(x);
    auto t5 = clk::now();
    std::printf("unet fwd %.1f bwd %.1f nograd %.1f | vae fwd+bwd %.1f enc %.1f ms\n", ms(t0, t1), ms(t1, t2),
                ms(t2, t3), ms(t3, t4), ms(t4, t5));
  }
}
