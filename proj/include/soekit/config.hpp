// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_CONFIG_HPP
#define SOEKIT_CONFIG_HPP

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"
#include "soekit/data.hpp"
#include "soekit/distill.hpp"
#include "soekit/lora.hpp"
#include "soekit/metrics.hpp"
#include "soekit/schedule.hpp"

namespace soekit {

/// Whole-pipeline configuration; JSON sections data, schedule, model, lora,
/// train, eval. Every field has a default and unknown keys are rejected.
struct RunConfig {
  DataConfig data;
  ScheduleParams schedule;
  ModelConfig model;
  LoraConfig lora;
  TrainConfig train;
  EvalConfig eval;
  std::uint64_t seed = 0;
};

namespace detail {

// Calls f(section, key, field&) for every configurable field, in document order.
template <class Config, class F>
void visit_config(Config& c, F&& f) {
  f("data", "image_side", c.data.image_side);
  f("data", "latent_factor", c.data.latent_factor);
  f("data", "count_train_small", c.data.count_train_small);
  f("data", "count_train_generic", c.data.count_train_generic);
  f("data", "count_val_small", c.data.count_val_small);

  f("schedule", "timesteps", c.schedule.timesteps);
  f("schedule", "beta_start", c.schedule.beta_start);
  f("schedule", "beta_end", c.schedule.beta_end);

  f("model", "image_side", c.model.image_side);
  f("model", "latent_channels", c.model.latent_channels);
  f("model", "latent_factor", c.model.latent_factor);
  f("model", "vae_width", c.model.vae_width);
  f("model", "unet_width", c.model.unet_width);
  f("model", "unet_depth", c.model.unet_depth);
  f("model", "cond_dim", c.model.cond_dim);
  f("model", "temb_dim", c.model.temb_dim);
  f("model", "groups", c.model.groups);

  f("lora", "enabled", c.lora.enabled);
  f("lora", "rank", c.lora.rank);
  f("lora", "alpha", c.lora.alpha);
  f("lora", "init_std", c.lora.init_std);
  f("lora", "blocks", c.lora.blocks);

  f("train", "seed", c.seed);
  f("train", "distill_weight", c.train.distill_weight);
  f("train", "lambda", c.train.lambda);
  f("train", "crop_size", c.train.crop_size);
  f("train", "lr", c.train.lr);
  f("train", "batch_size", c.train.batch_size);
  f("train", "steps", c.train.steps);
  f("train", "distill_loss", c.train.distill_loss);
  f("train", "huber_delta", c.train.huber_delta);
  f("train", "use_solora", c.train.use_solora);
  f("train", "use_csd", c.train.use_csd);
  f("train", "use_vae_tuning", c.train.use_vae_tuning);
  f("train", "unmasked_vae_loss", c.train.unmasked_vae_loss);
  f("train", "color_label_fraction", c.train.color_label_fraction);
  f("train", "log_every", c.train.log_every);
  f("train", "pretrain_vae_steps", c.train.pretrain_vae_steps);
  f("train", "pretrain_steps", c.train.pretrain_steps);
  f("train", "pretrain_lr", c.train.pretrain_lr);
  f("train", "pretrain_batch_size", c.train.pretrain_batch_size);

  f("eval", "ddim_steps", c.eval.ddim_steps);
  f("eval", "batch_size", c.eval.batch_size);
  f("eval", "styles", c.eval.styles);
  f("eval", "max_samples", c.eval.max_samples);
  f("eval", "probe_seed", c.eval.probe_seed);
  f("eval", "probe_steps", c.eval.probe.steps);
  f("eval", "probe_batch_size", c.eval.probe.batch_size);
  f("eval", "probe_lr", c.eval.probe.lr);
  f("eval", "probe_background_fraction", c.eval.probe.background_fraction);
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& cfg) {
  RunConfig c = cfg;
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  detail::visit_config(c, [&](const char* sec, const char* key, auto& v) { j[sec][key] = v; });
  return j;
}

inline void validate(const RunConfig& c) {
  if (c.data.image_side != c.model.image_side || c.data.latent_factor != c.model.latent_factor)
    throw Error("config: data and model disagree on image_side/latent_factor");
  if (c.model.image_side < 8 || c.model.latent_factor < 1) throw Error("config: image side and latent factor too small");
  if (c.model.image_side % (c.model.latent_factor << c.model.unet_depth))
    throw Error("config: image side must be divisible by latent_factor * 2^unet_depth");
  if (c.model.unet_width % c.model.groups || c.model.vae_width < 1 || c.model.cond_dim < 2 || c.model.temb_dim < 2)
    throw Error("config: unet_width must be a multiple of groups; widths must be positive");
  NoiseSchedule::make(c.schedule);
  if (c.lora.rank < 1) throw Error("config: lora.rank must be >= 1");
  if (c.lora.enabled && c.lora.blocks.empty()) throw Error("config: lora enabled with no blocks selected");
  detail::validate_train_config(c.train, c.model);
  if (c.train.pretrain_steps < 0 || c.train.pretrain_vae_steps < 0 || c.train.pretrain_batch_size < 1 ||
      !(c.train.pretrain_lr > 0))
    throw Error("config: pretraining steps must be >= 0, batch size >= 1 and lr positive");
  if (c.eval.ddim_steps < 1 || c.eval.ddim_steps > c.schedule.timesteps)
    throw Error("config: eval.ddim_steps must be in [1, schedule.timesteps]");
  if (c.eval.batch_size < 1) throw Error("config: eval.batch_size must be >= 1");
  for (const auto& s : c.eval.styles) parse_style(s);
  if (c.train.color_label_fraction < 0 || c.train.color_label_fraction > 1)
    throw Error("config: train.color_label_fraction must be in [0, 1]");
}

/// Applies a (possibly partial) JSON document on top of `base`.
inline RunConfig apply_json(RunConfig base, const nlohmann::json& j) {
  if (!j.is_object()) throw Error("config: top level must be a JSON object");
  std::map<std::string, std::map<std::string, bool>> known;
  detail::visit_config(base, [&](const char* sec, const char* key, auto&) { known[sec][key] = true; });
  for (const auto& [sec, body] : j.items()) {
    if (!known.count(sec)) throw Error("config: unknown section '" + sec + "'");
    if (!body.is_object()) throw Error("config: section '" + sec + "' must be an object");
    for (const auto& [key, v] : body.items())
      if (!known[sec].count(key)) throw Error("config: unknown key '" + sec + "." + key + "'");
  }
  detail::visit_config(base, [&](const char* sec, const char* key, auto& field) {
    if (!j.contains(sec) || !j[sec].contains(key)) return;
    try {
      using F = std::decay_t<decltype(field)>;
      field = j[sec][key].template get<F>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("config: bad value for '") + sec + "." + key + "': " + e.what());
    }
  });
  validate(base);
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw Error("config " + path.string() + ": " + e.what());
  }
  return apply_json(RunConfig{}, j);
}

}  // namespace soekit

#endif  // SOEKIT_CONFIG_HPP
