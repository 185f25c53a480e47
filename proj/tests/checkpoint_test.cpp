// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "soekit/checkpoint.hpp"
#include "soekit/distill.hpp"
#include "soekit/metrics.hpp"

using namespace soekit;

namespace {

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.vae_width = 4;
  mc.unet_width = 8;
  mc.groups = 4;
  mc.cond_dim = 8;
  mc.temb_dim = 16;
  return mc;
}

// Little-endian reader for the documented layout.
struct Reader {
  const std::vector<char>& b;
  std::size_t pos = 0;
  template <typename U>
  U get() {
    U v;
    std::memcpy(&v, b.data() + pos, sizeof(U));
    pos += sizeof(U);
    return v;
  }
  std::string str(std::size_t n) {
    std::string s(b.data() + pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

TEST(Checkpoint, ByteLayout) {
  Checkpoint ck;
  ck.put("w", {2, 3}, {1, 2, 3, 4, 5, 6});
  ck.put("bias", {1}, {-0.5f});
  ck.meta["k"] = 1;
  const auto bytes = ck.serialize();
  Reader r{bytes};
  EXPECT_EQ(r.str(4), "SOEK");
  EXPECT_EQ(r.get<std::uint32_t>(), 1u);
  EXPECT_EQ(r.get<std::uint32_t>(), 2u);
  EXPECT_EQ(r.get<std::uint16_t>(), 1u);
  EXPECT_EQ(r.str(1), "w");
  EXPECT_EQ(r.get<std::uint8_t>(), 0u);
  EXPECT_EQ(r.get<std::uint8_t>(), 2u);
  EXPECT_EQ(r.get<std::uint32_t>(), 2u);
  EXPECT_EQ(r.get<std::uint32_t>(), 3u);
  for (float v : {1.f, 2.f, 3.f, 4.f, 5.f, 6.f}) EXPECT_EQ(r.get<float>(), v);
  EXPECT_EQ(r.get<std::uint16_t>(), 4u);
  EXPECT_EQ(r.str(4), "bias");
  r.pos += 2 + 4;
  EXPECT_EQ(r.get<float>(), -0.5f);
  const auto jlen = r.get<std::uint32_t>();
  EXPECT_EQ(r.str(jlen), "{\"k\":1}");
  EXPECT_EQ(r.pos, bytes.size());
}

TEST(Checkpoint, RejectsCorruptInput) {
  Checkpoint ck;
  ck.put("a", {2}, {1, 2});
  auto bytes = ck.serialize();
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(Checkpoint::deserialize(bad), Error);
  bad = bytes;
  bad[4] = 9;  // version
  EXPECT_THROW(Checkpoint::deserialize(bad), Error);
  bad = bytes;
  bad.resize(bytes.size() - 3);
  EXPECT_THROW(Checkpoint::deserialize(bad), Error);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(Checkpoint::deserialize(bad), Error);
  bad = bytes;
  bad[4 + 4 + 4 + 2 + 1] = 3;  // dtype of the first array
  EXPECT_THROW(Checkpoint::deserialize(bad), Error);
  EXPECT_THROW(Checkpoint::load("/nonexistent/soekit.ckpt"), Error);
}

TEST(Checkpoint, RestoreChecksNamesAndShapes) {
  Checkpoint ck;
  ck.put("a", {2}, {1, 2});
  auto t = Tensor::zeros({3});
  NamedTensors<float> dst{{"a", t}};
  EXPECT_THROW(ck.restore(dst), Error);
  NamedTensors<float> missing{{"b", Tensor::zeros({2})}};
  EXPECT_THROW(ck.restore(missing), Error);
}

TEST(Checkpoint, ModelSaveLoadSaveIsByteIdentical) {
  SoeModel m(tiny_model(), ScheduleParams{1000, 2e-4, 0.03}, 4);
  m.freeze_all();
  m.role = "teacher";
  const auto path = std::filesystem::temp_directory_path() / "soekit_ckpt_test.ckpt";
  model_checkpoint(m, {{"note", "x"}}).save(path);
  const auto loaded = model_from_checkpoint(Checkpoint::load(path));
  EXPECT_EQ(model_checkpoint(loaded, {{"note", "x"}}).serialize(), Checkpoint::load(path).serialize());
  EXPECT_EQ(loaded.config, m.config);
  EXPECT_EQ(loaded.schedule.beta_end, 0.03);
  EXPECT_TRUE(loaded.frozen);
  EXPECT_EQ(loaded.role, "teacher");
  std::filesystem::remove(path);
}

TEST(Checkpoint, LoadedModelReproducesOutputs) {
  SoeModel m(tiny_model(), ScheduleParams{}, 4);
  LoraConfig lc;
  m.lora = attach(m.unet, lc, 2);
  Rng rng(3);
  for (auto& [t, a] : m.lora->adapters())
    for (auto& v : a.B.data()) v = static_cast<float>(rng.normal() * 0.1);
  const auto loaded = model_from_checkpoint(Checkpoint::deserialize(model_checkpoint(m).serialize()));
  ASSERT_TRUE(loaded.lora.has_value());
  auto z = Tensor::randn({1, 4, 16, 16}, rng);
  const auto mask = bbox_masks({BBox{10, 12, 7, 7}}, 64, 64);
  const std::vector<int> ts{321};
  NoGradGuard g;
  const auto ctx = m.cond({1}, {2}, {PromptStyle::ColorLabel});
  EXPECT_EQ(m.unet.forward(z, ts, ctx, mask, m.adapters()).vec(),
            loaded.unet.forward(z, ts, loaded.cond({1}, {2}, {PromptStyle::ColorLabel}), mask, loaded.adapters()).vec());
}

TEST(Checkpoint, MergedFlagRoundTrips) {
  SoeModel m(tiny_model(), ScheduleParams{}, 4);
  m.lora = attach(m.unet, LoraConfig{}, 2);
  const auto merged = m.merged();
  const auto back = model_from_checkpoint(Checkpoint::deserialize(model_checkpoint(merged).serialize()));
  EXPECT_TRUE(back.unet.merged());
  EXPECT_FALSE(back.lora.has_value());
}

TEST(Checkpoint, AdamStateRoundTrips) {
  auto w = Tensor::full({3}, 1.f, true);
  Adam<float> a({{"w", w}});
  for (int s = 0; s < 3; ++s) {
    backward(sum(mul(w, w)));
    a.step();
  }
  Checkpoint ck;
  save_adam(ck, a);
  auto w2 = w.clone();
  w2.set_requires_grad(true);
  Adam<float> b({{"w", w2}});
  load_adam(Checkpoint::deserialize(ck.serialize()), b);
  EXPECT_EQ(b.step_count(), 3);
  EXPECT_EQ(b.first_moments()[0], a.first_moments()[0]);
  EXPECT_EQ(b.second_moments()[0], a.second_moments()[0]);
  backward(sum(mul(w, w)));
  a.step();
  backward(sum(mul(w2, w2)));
  b.step();
  EXPECT_EQ(w.vec(), w2.vec());
}

TEST(Checkpoint, ProbeRoundTrips) {
  ProbeClassifier p(5);
  p.set_trained(true);
  const auto back = ProbeClassifier::from_checkpoint(Checkpoint::deserialize(p.checkpoint().serialize()));
  EXPECT_TRUE(back.trained());
  Rng rng(1);
  auto x = Tensor::randn({2, 3, 32, 32}, rng);
  NoGradGuard g;
  EXPECT_EQ(p.forward(x).features.vec(), back.forward(x).features.vec());
  SoeModel m(tiny_model(), ScheduleParams{}, 4);
  EXPECT_THROW(ProbeClassifier::from_checkpoint(model_checkpoint(m)), Error);
}
