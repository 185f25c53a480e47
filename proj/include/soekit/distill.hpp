// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_DISTILL_HPP
#define SOEKIT_DISTILL_HPP

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "soekit/checkpoint.hpp"
#include "soekit/data.hpp"
#include "soekit/image.hpp"
#include "soekit/lora.hpp"
#include "soekit/loss.hpp"
#include "soekit/nets.hpp"
#include "soekit/schedule.hpp"

namespace soekit {

// ---------------------------------------------------------------------------
// Model bundle

struct ModelConfig {
  int image_side = 64;
  int latent_channels = 4;
  int latent_factor = 4;
  int vae_width = 16;
  int unet_width = 32;
  int unet_depth = 2;
  int cond_dim = 32;
  int temb_dim = 64;
  int groups = 8;

  VaeConfig vae() const { return {latent_channels, latent_factor, vae_width}; }
  UnetConfig unet() const {
    return {latent_channels, latent_factor, unet_width, unet_depth, cond_dim, temb_dim, groups};
  }
  CondConfig cond() const { return {cond_dim}; }
  int latent_side() const { return image_side / latent_factor; }
  bool operator==(const ModelConfig&) const = default;
};

/// VAE + denoiser + condition table, optionally with attached adapters.
struct SoeModel {
  ModelConfig config;
  ScheduleParams schedule;
  Vae<float> vae;
  Unet<float> unet;
  ConditionEmbedding<float> cond;
  std::optional<LoraAdapterSet<float>> lora;
  std::string role = "base";
  bool frozen = false;

  SoeModel(const ModelConfig& cfg, const ScheduleParams& sched, std::uint64_t seed)
      : config(cfg), schedule(sched), vae(cfg.vae(), seed), unet(cfg.unet(), seed), cond(cfg.cond(), seed) {}

  SoeModel clone() const {
    SoeModel out(config, schedule, 0, vae.clone(), unet.clone(), cond.clone());
    if (lora) {
      LoraAdapterSet<float> copy(lora->config());
      for (const auto& [target, a] : lora->adapters()) {
        auto b = a;
        b.A = a.A.clone();
        b.B = a.B.clone();
        copy.adapters().emplace(target, std::move(b));
      }
      out.lora = std::move(copy);
    }
    out.role = role;
    out.frozen = frozen;
    return out;
  }

  NoiseSchedule noise_schedule() const { return NoiseSchedule::make(schedule); }
  const LoraAdapterSet<float>* adapters() const { return lora ? &*lora : nullptr; }

  void freeze_all() {
    vae.freeze();
    unet.freeze();
    cond.freeze();
    if (lora) lora->set_trainable(false);
    frozen = true;
  }

  /// Every stored array: VAE, U-Net, condition table, then adapters.
  NamedTensors<float> arrays() const {
    NamedTensors<float> out = vae.registry().all();
    for (const auto& r : {unet.registry().all(), cond.registry().all()}) out.insert(out.end(), r.begin(), r.end());
    if (lora) {
      auto l = lora->named_parameters();
      out.insert(out.end(), l.begin(), l.end());
    }
    return out;
  }

  /// Returns the model with adapters folded into the U-Net weights.
  SoeModel merged() const {
    if (!lora) throw Error("merge: model has no adapters");
    SoeModel out(config, schedule, 0, vae.clone(), merge(unet, *lora), cond.clone());
    out.role = role;
    out.frozen = frozen;
    return out;
  }

 private:
  SoeModel(const ModelConfig& cfg, const ScheduleParams& sched, int, Vae<float> v, Unet<float> u,
           ConditionEmbedding<float> c)
      : config(cfg), schedule(sched), vae(std::move(v)), unet(std::move(u)), cond(std::move(c)) {}
};

inline nlohmann::ordered_json model_config_json(const ModelConfig& m) {
  return {{"image_side", m.image_side},   {"latent_channels", m.latent_channels}, {"latent_factor", m.latent_factor},
          {"vae_width", m.vae_width},     {"unet_width", m.unet_width},           {"unet_depth", m.unet_depth},
          {"cond_dim", m.cond_dim},       {"temb_dim", m.temb_dim},               {"groups", m.groups}};
}

inline nlohmann::ordered_json schedule_json(const ScheduleParams& s) {
  return {{"timesteps", s.timesteps}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline nlohmann::ordered_json lora_config_json(const LoraConfig& c) {
  return {{"enabled", c.enabled}, {"rank", c.rank}, {"alpha", c.alpha}, {"init_std", c.init_std}, {"blocks", c.blocks}};
}

/// Checkpoint of the model. `extra` lands under meta["config"].
inline Checkpoint model_checkpoint(const SoeModel& m, const nlohmann::ordered_json& extra = nullptr) {
  Checkpoint ck;
  ck.meta["format"] = "soekit";
  ck.meta["role"] = m.role;
  ck.meta["frozen"] = m.frozen;
  ck.meta["merged"] = m.unet.merged();
  ck.meta["schedule"] = schedule_json(m.schedule);
  ck.meta["model"] = model_config_json(m.config);
  ck.meta["lora"] = m.lora ? lora_config_json(m.lora->config()) : nlohmann::ordered_json(nullptr);
  ck.meta["config"] = extra;
  ck.put_all(m.arrays());
  return ck;
}

inline SoeModel model_from_checkpoint(const Checkpoint& ck) {
  const auto& meta = ck.meta;
  if (!meta.contains("model") || !meta.contains("schedule"))
    throw Error("checkpoint is not a soekit model (missing model/schedule header)");
  try {
    const auto& j = meta.at("model");
    ModelConfig mc;
    mc.image_side = j.at("image_side");
    mc.latent_channels = j.at("latent_channels");
    mc.latent_factor = j.at("latent_factor");
    mc.vae_width = j.at("vae_width");
    mc.unet_width = j.at("unet_width");
    mc.unet_depth = j.at("unet_depth");
    mc.cond_dim = j.at("cond_dim");
    mc.temb_dim = j.at("temb_dim");
    mc.groups = j.at("groups");
    const auto& s = meta.at("schedule");
    ScheduleParams sp{s.at("timesteps"), s.at("beta_start"), s.at("beta_end")};
    SoeModel m(mc, sp, 0);
    m.role = meta.value("role", "base");
    m.frozen = meta.value("frozen", false);
    m.unet.set_merged(meta.value("merged", false));
    if (meta.contains("lora") && !meta.at("lora").is_null()) {
      const auto& l = meta.at("lora");
      LoraConfig lc;
      lc.enabled = l.at("enabled");
      lc.rank = l.at("rank");
      lc.alpha = l.at("alpha");
      lc.init_std = l.at("init_std");
      lc.blocks = l.at("blocks").get<std::vector<std::string>>();
      m.lora = attach(m.unet, lc, 0);
    }
    ck.restore(m.arrays());
    if (m.frozen) m.freeze_all();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint header: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Teacher view

struct CropWindow {
  int x0 = 0, y0 = 0, side = 0;
};

/// s x s window centred on the bbox centre, shifted (never shrunk) to stay
/// inside the image.
inline CropWindow crop_window(const BBox& b, int width, int height, int s) {
  if (s < 1 || s > width || s > height)
    throw Error("crop_resize_pair: crop size " + std::to_string(s) + " does not fit a " + std::to_string(width) + "x" +
                std::to_string(height) + " image");
  if (b.w > s || b.h > s)
    throw Error("crop_resize_pair: mask bbox " + std::to_string(b.w) + "x" + std::to_string(b.h) +
                " larger than crop size " + std::to_string(s));
  auto place = [s](int lo, int len, int limit) {
    const int start = static_cast<int>(detail::floor_div(2 * lo + len - s, 2));
    return std::clamp(start, 0, limit - s);
  };
  return {place(b.x, b.w, width), place(b.y, b.h, height), s};
}

struct CropPair {
  Tensor image;  // (1,C,H,W)
  Tensor mask;   // (1,1,H,W), binary
  CropWindow window;
};

/// Teacher view of one sample: crop around the mask, then scale back to the
/// original size (bilinear for the image, nearest for the mask).
inline CropPair crop_resize_pair(const Tensor& x, const Tensor& m, int s) {
  if (x.ndim() != 4 || x.dim(0) != 1 || m.ndim() != 4 || m.dim(0) != 1 || m.dim(1) != 1 || x.dim(2) != m.dim(2) ||
      x.dim(3) != m.dim(3))
    shape_error("crop_resize_pair", x.shape(), m.shape());
  const std::size_t H = x.dim(2), W = x.dim(3);
  const BBox b = mask_bbox(m);
  if (b.w == 0) throw Error("crop_resize_pair: empty mask");
  const CropWindow win = crop_window(b, static_cast<int>(W), static_cast<int>(H), s);
  CropPair out;
  out.window = win;
  out.image = resize_bilinear(crop(x, win.y0, win.x0, s, s), H, W);
  out.mask = resize_nearest(crop(m, win.y0, win.x0, s, s), H, W);
  return out;
}

// ---------------------------------------------------------------------------
// Losses

inline void require_nonempty_masks(const char* op, const Tensor& m) {
  const std::size_t N = m.dim(0), per = m.size() / N;
  for (std::size_t n = 0; n < N; ++n) {
    bool any = false;
    for (std::size_t i = 0; i < per && !any; ++i) any = m[n * per + i] != 0.f;
    if (!any)
      throw Error(std::string(op) + ": empty mask for sample " + std::to_string(n) + " (degenerate sample)");
  }
}

/// Masked Huber between true and predicted noise, averaged over masked
/// latent elements only. m_latent is (N,1,h,w).
template <typename T>
BasicTensor<T> denoise_loss(const BasicTensor<T>& eps, const BasicTensor<T>& eps_pred, const BasicTensor<T>& m_latent,
                            T delta = T(1)) {
  if (eps.shape() != eps_pred.shape()) shape_error("denoise_loss", eps.shape(), eps_pred.shape());
  if (m_latent.ndim() != 4 || m_latent.dim(0) != eps.dim(0) || m_latent.dim(1) != 1 || m_latent.dim(2) != eps.dim(2) ||
      m_latent.dim(3) != eps.dim(3))
    shape_error("denoise_loss", eps.shape(), m_latent.shape());
  double count = 0;
  for (auto v : m_latent.data()) count += v;
  if (count == 0) throw Error("denoise_loss: empty mask at latent resolution (degenerate sample)");
  return huber_reduce(mask_mul(eps, m_latent), mask_mul(eps_pred, m_latent), delta,
                      static_cast<T>(count * eps.dim(1)));
}

enum class DistillLossType { Huber, Mse };

inline DistillLossType parse_distill_loss(std::string_view s) {
  if (s == "huber") return DistillLossType::Huber;
  if (s == "mse") return DistillLossType::Mse;
  throw Error("unknown distillation loss '" + std::string(s) + "' (expected huber or mse)");
}

inline constexpr std::size_t kDistillSide = 8;

/// Crops every sample's masked latent to its latent bbox and resizes the
/// crop to side x side. z (N,C,h,w), m_latent (N,1,h,w).
template <typename T>
BasicTensor<T> masked_latent_crops(const BasicTensor<T>& z, const BasicTensor<T>& m_latent, std::size_t side) {
  const auto masked = mask_mul(z, m_latent);
  std::vector<BasicTensor<T>> crops;
  for (std::size_t n = 0; n < z.dim(0); ++n) {
    const BBox b = mask_bbox(m_latent, n);
    if (b.w == 0) throw Error("distill_loss: empty mask bbox for sample " + std::to_string(n) + " (degenerate sample)");
    auto one = slice(masked, 0, n, n + 1);
    crops.push_back(resize_bilinear(crop(one, b.y, b.x, b.h, b.w), side, side));
  }
  return concat(crops, 0);
}

/// Aligns the student's clean-latent estimate with the teacher's on the
/// teacher's zoomed view. The teacher side is detached.
template <typename T>
BasicTensor<T> distill_loss(const BasicTensor<T>& z0_hat, const BasicTensor<T>& m_latent,
                            const BasicTensor<T>& z0p_hat, const BasicTensor<T>& mp_latent,
                            DistillLossType type = DistillLossType::Huber, T delta = T(1)) {
  if (z0_hat.shape() != z0p_hat.shape()) shape_error("distill_loss", z0_hat.shape(), z0p_hat.shape());
  auto s = masked_latent_crops(z0_hat, m_latent, kDistillSide);
  auto t = masked_latent_crops(z0p_hat.detach(), mp_latent, kDistillSide);
  return type == DistillLossType::Huber ? huber(s, t, delta) : mse(s, t);
}

/// Huber between x and its reconstruction restricted to the mask, averaged
/// over masked elements. m is (N,1,H,W).
template <typename T>
BasicTensor<T> masked_recon_loss(const BasicTensor<T>& x, const BasicTensor<T>& x_rec, const BasicTensor<T>& m,
                                 T delta = T(1)) {
  if (x.shape() != x_rec.shape()) shape_error("vae_recon_loss", x.shape(), x_rec.shape());
  double count = 0;
  for (auto v : m.data()) count += v;
  if (count == 0) throw Error("vae_recon_loss: empty mask");
  return huber_reduce(mask_mul(x, m), mask_mul(x_rec, m), delta, static_cast<T>(count * x.dim(1)));
}

template <typename T>
BasicTensor<T> vae_recon_loss(const BasicTensor<T>& x, const BasicTensor<T>& m, const Vae<T>& vae, T delta = T(1)) {
  return masked_recon_loss(x, vae.decode(vae.encode(x)), m, delta);
}

struct TrainConfig {
  double distill_weight = 0.01;
  double lambda = 1.0;
  int crop_size = 32;
  double lr = 1e-3;
  int batch_size = 8;
  int steps = 2000;
  std::string distill_loss = "huber";
  double huber_delta = 1.0;
  bool use_solora = true;
  bool use_csd = true;
  bool use_vae_tuning = true;
  bool unmasked_vae_loss = false;
  double color_label_fraction = 0.5;  // share of prompts using the colour+label style
  int log_every = 1;
  // Teacher creation.
  int pretrain_vae_steps = 1500;
  int pretrain_steps = 3000;
  double pretrain_lr = 1e-3;
  int pretrain_batch_size = 8;
};

template <typename T>
struct BasicLossParts {
  BasicTensor<T> denoise, distill, vae;  // undefined when inactive
};
using LossParts = BasicLossParts<float>;

/// L_denoise + distill_weight * L_distill + lambda * L_vae over active parts.
template <typename T>
BasicTensor<T> total_loss(const BasicLossParts<T>& p, const TrainConfig& cfg) {
  if (!p.denoise.defined()) throw Error("total_loss: denoising loss is required");
  BasicTensor<T> total = p.denoise;
  if (cfg.use_csd && p.distill.defined()) total = add(total, scale(p.distill, static_cast<T>(cfg.distill_weight)));
  if (cfg.use_vae_tuning && p.vae.defined()) total = add(total, scale(p.vae, static_cast<T>(cfg.lambda)));
  return total;
}

// ---------------------------------------------------------------------------
// Training

struct LossReport {
  long step = 0;
  double denoise = 0, distill = 0, vae = 0, total = 0, wall_ms = 0;
};

class LossLog {
 public:
  // timing=false writes wall_ms as 0 so the file is reproducible byte for byte.
  explicit LossLog(const std::filesystem::path& path, bool timing = true)
      : out_(path, std::ios::binary), timing_(timing) {
    if (!out_) throw Error("cannot write loss log " + path.string());
    out_ << "step,L_denoise,L_distill,L_vae,L_total,wall_ms\n";
  }
  void write(const LossReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%ld,%.8g,%.8g,%.8g,%.8g,%.3f\n", r.step, r.denoise, r.distill, r.vae, r.total,
                  timing_ ? r.wall_ms : 0.0);
    out_ << buf;
    out_.flush();
  }

 private:
  std::ofstream out_;
  bool timing_;
};

/// Prompt drawn for one training sample.
inline PromptStyle draw_style(Rng& rng, double color_label_fraction) {
  return rng.uniform() < color_label_fraction ? PromptStyle::ColorLabel : PromptStyle::LabelOnly;
}

struct Batch {
  Tensor x, m;    // (N,3,H,W), (N,1,H,W)
  Tensor xp, mp;  // teacher views
  Tensor z, zp;   // clean latents (detached)
  std::vector<int> labels, colors;
  std::vector<PromptStyle> styles;
};

namespace detail {
inline Tensor stack(const std::vector<Tensor>& parts) { return concat(parts, 0); }

inline void validate_train_config(const TrainConfig& c, const ModelConfig& m) {
  if (c.batch_size < 1 || c.steps < 0) throw Error("train: batch_size must be >= 1 and steps >= 0");
  if (!(c.lr > 0)) throw Error("train: lr must be positive");
  if (!(c.huber_delta > 0)) throw Error("train: huber_delta must be positive");
  if (c.distill_weight < 0 || c.lambda < 0) throw Error("train: loss weights must be non-negative");
  if (c.crop_size < 1 || c.crop_size >= m.image_side)
    throw Error("train: crop_size must be in [1, image side)");
  parse_distill_loss(c.distill_loss);
  if (c.use_csd && !c.use_solora) throw Error("train: use_csd requires use_solora (nothing to distil into)");
  if (!c.use_solora && !c.use_vae_tuning) throw Error("train: no trainable parameters (enable use_solora or use_vae_tuning)");
}
}  // namespace detail

/// One training context: frozen teacher, student = teacher copy + adapters.
class Trainer {
 public:
  Trainer(const SoeModel& teacher, const TrainConfig& cfg, const LoraConfig& lora_cfg,
          std::vector<SoeSample> data, std::uint64_t seed)
      : cfg_(cfg), seed_(seed), teacher_(teacher.clone()), student_(teacher.clone()),
        schedule_(teacher.noise_schedule()), data_(std::move(data)) {
    if (!teacher.frozen) throw Error("teacher not frozen");
    if (teacher.lora) throw Error("train: teacher must not carry adapters");
    detail::validate_train_config(cfg, teacher.config);
    if (data_.empty()) throw Error("train: empty dataset");
    int max_side = 0;
    for (const auto& smp : data_) max_side = std::max({max_side, smp.bbox.w, smp.bbox.h});
    if (cfg.crop_size < 2 * max_side)
      throw Error("train: crop_size " + std::to_string(cfg.crop_size) + " below twice the largest mask side (" +
                  std::to_string(max_side) + ")");
    teacher_.freeze_all();
    student_.freeze_all();
    student_.frozen = false;
    student_.role = "student";
    NamedTensors<float> trainable;
    if (cfg.use_solora) {
      if (!lora_cfg.enabled) throw Error("train: use_solora set but lora.enabled is false");
      student_.lora = attach(student_.unet, lora_cfg, seed);
      auto l = student_.lora->named_parameters();
      trainable.insert(trainable.end(), l.begin(), l.end());
    }
    if (cfg.use_vae_tuning) {
      student_.vae.registry().set_trainable(true);
      auto v = student_.vae.registry().params();
      trainable.insert(trainable.end(), v.begin(), v.end());
    }
    AdamOptions opts;
    opts.lr = cfg.lr;
    opt_.emplace(trainable, opts);
    cache_.resize(data_.size());
  }

  const SoeModel& student() const { return student_; }
  const SoeModel& teacher() const { return teacher_; }
  Adam<float>& optimizer() { return *opt_; }
  long steps_done() const { return opt_->step_count(); }

  /// Batch indices for a step: uniform with replacement, from the batch stream.
  std::vector<std::size_t> draw_batch(long step) const {
    Rng rng = Rng(seed_).substream(streams::kBatch).substream(static_cast<std::uint64_t>(step));
    std::vector<std::size_t> idx(cfg_.batch_size);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data_.size()) - 1));
    return idx;
  }

  LossReport step() {
    const long s = opt_->step_count();
    return step(draw_batch(s), s);
  }

  /// One optimisation step on the given samples.
  LossReport step(const std::vector<std::size_t>& idx, long step_index) {
    const auto t0 = std::chrono::steady_clock::now();
    Batch b = assemble(idx, step_index);
    const std::size_t N = idx.size(), f = student_.config.latent_factor;

    Rng rng = Rng(seed_).substream(streams::kNoise).substream(static_cast<std::uint64_t>(step_index));
    std::vector<int> ts(N);
    for (auto& t : ts) t = static_cast<int>(rng.uniform_int(1, schedule_.timesteps()));
    Rng rs = rng.substream(1), rt = rng.substream(2);
    auto eps = Tensor::randn(b.z.shape(), rs);
    auto eps_t = Tensor::randn(b.z.shape(), rt);

    LossParts parts;
    Tensor ctx;
    {
      NoGradGuard g;
      ctx = student_.cond(b.labels, b.colors, b.styles);
    }
    const auto z_t = add_noise(b.z, eps, std::span<const int>(ts), schedule_);
    const auto m_lat = max_pool2d(b.m, f);
    const float delta = static_cast<float>(cfg_.huber_delta);
    const auto eps_pred = student_.unet.forward(z_t, ts, ctx, b.m, student_.adapters());
    parts.denoise = denoise_loss(eps, eps_pred, m_lat, delta);

    if (cfg_.use_csd) {
      Tensor z0p;
      {
        NoGradGuard g;
        const auto zp_t = add_noise(b.zp, eps_t, std::span<const int>(ts), schedule_);
        const auto eps_teacher = teacher_.unet.forward(zp_t, ts, ctx, b.mp, nullptr);
        z0p = predict_z0(zp_t, eps_teacher, std::span<const int>(ts), schedule_);
      }
      const auto z0 = predict_z0(z_t, eps_pred, std::span<const int>(ts), schedule_);
      parts.distill = distill_loss(z0, m_lat, z0p, max_pool2d(b.mp, f), parse_distill_loss(cfg_.distill_loss), delta);
    }
    if (cfg_.use_vae_tuning) {
      const auto rec = student_.vae.decode(student_.vae.encode(b.x));
      parts.vae = cfg_.unmasked_vae_loss ? huber(rec, b.x, delta) : masked_recon_loss(b.x, rec, b.m, delta);
    }
    const auto total = total_loss(parts, cfg_);
    backward(total);
    opt_->step();

    LossReport r;
    r.step = step_index + 1;
    r.denoise = parts.denoise.item();
    r.distill = parts.distill.defined() ? parts.distill.item() : 0.0;
    r.vae = parts.vae.defined() ? parts.vae.item() : 0.0;
    r.total = total.item();
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }

  /// Runs the remaining configured steps.
  void run(const std::function<void(const LossReport&)>& on_step = {}) {
    while (opt_->step_count() < cfg_.steps) {
      auto r = step();
      if (on_step) on_step(r);
    }
  }

  Checkpoint checkpoint(const nlohmann::ordered_json& config_echo = nullptr) const {
    Checkpoint ck = model_checkpoint(student_, config_echo);
    save_adam(ck, *opt_);
    return ck;
  }

  void resume(const Checkpoint& ck) {
    ck.restore(student_.arrays());
    load_adam(ck, *opt_);
  }

 private:
  struct Cached {
    Tensor x, m, xp, mp;
    Tensor z, zp;
  };

  Cached& cached(std::size_t i) {
    auto& c = cache_[i];
    if (!c.x.defined()) {
      const auto& s = data_[i];
      c.x = image_tensor(s.image);
      c.m = bbox_masks({s.bbox}, s.image.height, s.image.width);
      if (cfg_.use_csd) {
        auto view = crop_resize_pair(c.x, c.m, cfg_.crop_size);
        c.xp = view.image;
        c.mp = view.mask;
      }
    }
    return c;
  }

  Batch assemble(const std::vector<std::size_t>& idx, long step_index) {
    Batch b;
    Rng rng = Rng(seed_).substream(streams::kBatch).substream(static_cast<std::uint64_t>(step_index)).substream(7);
    std::vector<Tensor> xs, ms, xps, mps, zs, zps;
    NoGradGuard g;
    for (auto i : idx) {
      auto& c = cached(i);
      if (!cfg_.use_vae_tuning && !c.z.defined()) {
        c.z = student_.vae.encode(c.x);
        if (cfg_.use_csd) c.zp = student_.vae.encode(c.xp);
      }
      xs.push_back(c.x);
      ms.push_back(c.m);
      if (cfg_.use_csd) {
        xps.push_back(c.xp);
        mps.push_back(c.mp);
      }
      if (!cfg_.use_vae_tuning) {
        zs.push_back(c.z);
        if (cfg_.use_csd) zps.push_back(c.zp);
      }
      b.labels.push_back(data_[i].label);
      b.colors.push_back(data_[i].color);
      b.styles.push_back(draw_style(rng, cfg_.color_label_fraction));
    }
    b.x = detail::stack(xs);
    b.m = detail::stack(ms);
    if (cfg_.use_csd) {
      b.xp = detail::stack(xps);
      b.mp = detail::stack(mps);
    }
    if (cfg_.use_vae_tuning) {
      // Latents come from the VAE being tuned, but diffusion losses do not
      // backpropagate into it.
      b.z = student_.vae.encode(b.x);
      if (cfg_.use_csd) b.zp = student_.vae.encode(b.xp);
    } else {
      b.z = detail::stack(zs);
      if (cfg_.use_csd) b.zp = detail::stack(zps);
    }
    return b;
  }

  TrainConfig cfg_;
  std::uint64_t seed_;
  SoeModel teacher_, student_;
  NoiseSchedule schedule_;
  std::vector<SoeSample> data_;
  std::optional<Adam<float>> opt_;
  std::vector<Cached> cache_;
};

// ---------------------------------------------------------------------------
// Teacher creation

struct PretrainLog {
  std::vector<double> vae_loss, unet_loss;
};

/// Rescales latents to unit standard deviation over the given images.
inline void fit_latent_scale(Vae<float>& vae, const std::vector<SoeSample>& data, std::size_t max_samples = 256) {
  NoGradGuard g;
  vae.set_latent_scale(1.f);
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < std::min(max_samples, data.size()); ++i) {
    const auto z = vae.encode(image_tensor(data[i].image));
    for (auto v : z.data()) sum += v, sq += static_cast<double>(v) * v, ++n;
  }
  const double mean = sum / n, var = sq / n - mean * mean;
  vae.set_latent_scale(static_cast<float>(1.0 / std::sqrt(std::max(var, 1e-12))));
}

/// Trains the autoencoder, then the base denoiser and condition table with
/// the masked denoising loss, on generic-size objects. Returns a frozen
/// teacher.
inline SoeModel pretrain_teacher(const std::vector<SoeSample>& data, const ModelConfig& mcfg,
                                 const ScheduleParams& sched, const TrainConfig& cfg, std::uint64_t seed,
                                 PretrainLog* log = nullptr,
                                 const std::function<void(const char*, long, double)>& on_step = {}) {
  if (data.empty()) throw Error("pretrain_teacher: empty dataset");
  if (cfg.pretrain_batch_size < 1) throw Error("pretrain_teacher: batch size must be >= 1");
  for (const auto& s : data)
    if (s.image.height != static_cast<std::size_t>(mcfg.image_side) ||
        s.image.width != static_cast<std::size_t>(mcfg.image_side))
      throw Error("pretrain_teacher: sample " + s.id + " does not match model image side " +
                  std::to_string(mcfg.image_side));
  SoeModel model(mcfg, sched, seed);
  const auto schedule = model.noise_schedule();
  const std::size_t B = cfg.pretrain_batch_size, H = mcfg.image_side;
  const float delta = static_cast<float>(cfg.huber_delta);
  std::vector<Tensor> images(data.size()), masks(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    images[i] = image_tensor(data[i].image);
    masks[i] = bbox_masks({data[i].bbox}, H, H);
  }
  auto draw = [&](Rng& rng) {
    std::vector<std::size_t> idx(B);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1));
    return idx;
  };
  AdamOptions opts;
  opts.lr = cfg.pretrain_lr;

  // 1. Autoencoder: Huber over the whole image plus the masked object region.
  model.vae.registry().set_trainable(true);
  {
    Adam<float> opt(model.vae.registry().params(), opts);
    for (long s = 0; s < cfg.pretrain_vae_steps; ++s) {
      Rng rng = Rng(seed).substream(streams::kBatch).substream(1000003).substream(s);
      std::vector<Tensor> xs, ms;
      for (auto i : draw(rng)) xs.push_back(images[i]), ms.push_back(masks[i]);
      const auto x = concat(xs, 0), m = concat(ms, 0);
      const auto rec = model.vae.decode(model.vae.encode(x));
      const auto loss = add(huber(rec, x, delta), masked_recon_loss(x, rec, m, delta));
      backward(loss);
      opt.step();
      if (log) log->vae_loss.push_back(loss.item());
      if (on_step) on_step("vae", s + 1, loss.item());
    }
  }
  model.vae.freeze();
  fit_latent_scale(model.vae, data);

  std::vector<Tensor> latents(data.size());
  {
    NoGradGuard g;
    for (std::size_t i = 0; i < data.size(); ++i) latents[i] = model.vae.encode(images[i]);
  }

  // 2. Denoiser and condition table.
  model.unet.registry().set_trainable(true);
  model.cond.registry().set_trainable(true);
  NamedTensors<float> params = model.unet.registry().params();
  for (const auto& p : model.cond.registry().params()) params.push_back(p);
  Adam<float> opt(params, opts);
  const std::size_t f = mcfg.latent_factor;
  for (long s = 0; s < cfg.pretrain_steps; ++s) {
    Rng rng = Rng(seed).substream(streams::kBatch).substream(2000003).substream(s);
    const auto idx = draw(rng);
    std::vector<Tensor> zs, ms;
    std::vector<int> labels, colors, ts;
    std::vector<PromptStyle> styles;
    for (auto i : idx) {
      zs.push_back(latents[i]);
      ms.push_back(masks[i]);
      labels.push_back(data[i].label);
      colors.push_back(data[i].color);
      styles.push_back(draw_style(rng, cfg.color_label_fraction));
      ts.push_back(static_cast<int>(rng.uniform_int(1, schedule.timesteps())));
    }
    const auto z = concat(zs, 0), m = concat(ms, 0);
    Rng noise = Rng(seed).substream(streams::kNoise).substream(2000003).substream(s);
    const auto eps = Tensor::randn(z.shape(), noise);
    const auto z_t = add_noise(z, eps, std::span<const int>(ts), schedule);
    const auto ctx = model.cond(labels, colors, styles);
    const auto eps_pred = model.unet.forward(z_t, ts, ctx, m);
    const auto loss = denoise_loss(eps, eps_pred, max_pool2d(m, f), delta);
    backward(loss);
    opt.step();
    if (log) log->unet_loss.push_back(loss.item());
    if (on_step) on_step("unet", s + 1, loss.item());
  }
  model.role = "teacher";
  model.freeze_all();
  return model;
}

// ---------------------------------------------------------------------------
// Editing

struct EditRequest {
  const Image* image = nullptr;
  BBox bbox;
  int label = 0;
  int color = 0;
  PromptStyle style = PromptStyle::ColorLabel;
  std::uint64_t noise_tag = 0;  // selects the noise substream, so results do not depend on batching
};

/// Inpaints each request's bbox with DDIM. The known region is re-noised
/// from the source latent and composited in after every step, and pixels
/// outside the mask are pasted back from the source after decoding.
inline std::vector<Image> edit_batch(const SoeModel& model, const std::vector<EditRequest>& reqs, int steps,
                                     std::uint64_t seed) {
  if (reqs.empty()) return {};
  if (steps < 1) throw Error("edit: steps must be >= 1");
  const auto sched = model.noise_schedule();
  if (steps > sched.timesteps()) throw Error("edit: steps exceeds schedule length");
  const std::size_t H = model.config.image_side, f = model.config.latent_factor;
  std::vector<const Image*> imgs;
  std::vector<BBox> boxes;
  std::vector<int> labels, colors;
  std::vector<PromptStyle> styles;
  for (const auto& r : reqs) {
    if (!r.image) throw Error("edit: missing image");
    if (r.image->height != H || r.image->width != H)
      throw Error("edit: image is " + std::to_string(r.image->width) + "x" + std::to_string(r.image->height) +
                  ", model expects " + std::to_string(H) + "x" + std::to_string(H));
    if (!r.bbox.inside(static_cast<int>(H), static_cast<int>(H)))
      throw Error("edit: bbox " + r.bbox.str() + " outside image");
    if (r.label < 0 || r.label >= kNumLabels || r.color < 0 || r.color >= kNumColors)
      throw Error("edit: label/color id out of range");
    imgs.push_back(r.image);
    boxes.push_back(r.bbox);
    labels.push_back(r.label);
    colors.push_back(r.color);
    styles.push_back(r.style);
  }
  NoGradGuard g;
  const auto x = image_batch(imgs);
  const auto m = bbox_masks(boxes, H, H);
  const auto m_lat = max_pool2d(m, f);
  const auto keep = add_scalar(scale(m_lat, -1.f), 1.f);
  const auto z0 = model.vae.encode(x);
  std::vector<Tensor> noise;
  const Shape one{1, z0.dim(1), z0.dim(2), z0.dim(3)};
  for (const auto& r : reqs) {
    Rng rng = Rng(seed).substream(streams::kEval).substream(r.noise_tag);
    noise.push_back(Tensor::randn(one, rng));
  }
  const auto eps = concat(noise, 0);
  const auto ctx = model.cond(labels, colors, styles);
  const auto ts = ddim_timesteps(sched.timesteps(), steps);
  auto z = add_noise(z0, eps, ts.front(), sched);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k], t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
    const std::vector<int> tv(reqs.size(), t);
    const auto eps_pred = model.unet.forward(z, tv, ctx, m, model.adapters());
    z = ddim_step(z, eps_pred, t, t_prev, sched);
    const auto known = t_prev == 0 ? z0 : add_noise(z0, eps, t_prev, sched);
    z = add(mul(z, m_lat), mul(known, keep));
  }
  const auto dec = model.vae.decode(z);
  const auto out = add(mul(dec, m), mul(x, add_scalar(scale(m, -1.f), 1.f)));
  std::vector<Image> res;
  for (std::size_t n = 0; n < reqs.size(); ++n) {
    auto img = tensor_image(out, n);
    for (auto& p : img.data) p = quantize8(p);
    res.push_back(std::move(img));
  }
  return res;
}

inline Image edit(const SoeModel& model, const Image& image, const BBox& bbox, int label, int color,
                  PromptStyle style, int steps, std::uint64_t seed) {
  return edit_batch(model, {{&image, bbox, label, color, style, 0}}, steps, seed).front();
}

}  // namespace soekit

#endif  // SOEKIT_DISTILL_HPP
