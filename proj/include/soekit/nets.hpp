// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_NETS_HPP
#define SOEKIT_NETS_HPP

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "soekit/lora.hpp"
#include "soekit/ops.hpp"
#include "soekit/optim.hpp"
#include "soekit/rng.hpp"
#include "soekit/vocab.hpp"

namespace soekit {

/// Ordered list of named parameters plus non-trainable buffers.
template <typename T>
class ParamRegistry {
 public:
  BasicTensor<T> param(const std::string& name, BasicTensor<T> t) {
    t.set_requires_grad(true);
    params_.emplace_back(name, t);
    return t;
  }
  BasicTensor<T> buffer(const std::string& name, BasicTensor<T> t) {
    buffers_.emplace_back(name, t);
    return t;
  }

  const NamedTensors<T>& params() const { return params_; }
  const NamedTensors<T>& buffers() const { return buffers_; }

  /// Parameters followed by buffers; the checkpoint view.
  NamedTensors<T> all() const {
    NamedTensors<T> out = params_;
    out.insert(out.end(), buffers_.begin(), buffers_.end());
    return out;
  }

  void set_trainable(bool flag) {
    for (auto& [name, p] : params_) p.set_requires_grad(flag);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p.size();
    return n;
  }

  void copy_trainability_from(const ParamRegistry& other) {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].second.set_requires_grad(other.params_[i].second.requires_grad());
  }

  /// Copies values (not trainability) from a registry with identical layout.
  void copy_values_from(const ParamRegistry& other) {
    auto src = other.all();
    auto dst = all();
    if (src.size() != dst.size()) throw Error("registry: layout mismatch on copy");
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape())
        throw Error("registry: layout mismatch at '" + dst[i].first + "'");
      std::copy(src[i].second.data().begin(), src[i].second.data().end(), dst[i].second.data().begin());
    }
  }

 private:
  NamedTensors<T> params_;
  NamedTensors<T> buffers_;
};

namespace layers {

template <typename T>
BasicTensor<T> init_weight(const Shape& shape, std::size_t fan_in, Rng& rng) {
  return BasicTensor<T>::randn(shape, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

template <typename T>
struct Conv {
  BasicTensor<T> weight, bias;
  int stride = 1, pad = 0;

  Conv() = default;
  Conv(ParamRegistry<T>& reg, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, int stride_,
       int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    weight = reg.param(name + ".weight", init_weight<T>({cout, cin, k, k}, cin * k * k, rng));
    bias = reg.param(name + ".bias", BasicTensor<T>::zeros({cout}));
  }
  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
};

// Stride-2 upsampler: kernel 4, padding 1 doubles the spatial side.
template <typename T>
struct ConvUp {
  BasicTensor<T> weight, bias;

  ConvUp() = default;
  ConvUp(ParamRegistry<T>& reg, const std::string& name, std::size_t cin, std::size_t cout, Rng& rng) {
    weight = reg.param(name + ".weight", init_weight<T>({cin, cout, 4, 4}, cin * 4, rng));
    bias = reg.param(name + ".bias", BasicTensor<T>::zeros({cout}));
  }
  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return conv_transpose2d(x, weight, bias, 2, 1); }
};

template <typename T>
struct Norm {
  BasicTensor<T> gamma, beta;
  std::size_t groups = 8;

  Norm() = default;
  Norm(ParamRegistry<T>& reg, const std::string& name, std::size_t channels, std::size_t groups_)
      : groups(groups_) {
    gamma = reg.param(name + ".gamma", BasicTensor<T>::full({channels}, T(1)));
    beta = reg.param(name + ".beta", BasicTensor<T>::zeros({channels}));
  }
  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return group_norm(x, groups, gamma, beta); }
};

/// Dense layer that picks up a LoRA adapter registered under its target id.
template <typename T>
struct Dense {
  std::string target;
  std::string block;
  BasicTensor<T> weight, bias;

  Dense() = default;
  Dense(ParamRegistry<T>& reg, const std::string& name, std::string block_, std::size_t in, std::size_t out, Rng& rng)
      : target(name), block(std::move(block_)) {
    weight = reg.param(name + ".weight", init_weight<T>({out, in}, in, rng));
    bias = reg.param(name + ".bias", BasicTensor<T>::zeros({out}));
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x, const LoraAdapterSet<T>* lora) const {
    auto y = linear(x, weight, bias);
    if (lora)
      if (const auto* a = lora->find(target)) y = add(y, lora_delta(x, *a));
    return y;
  }
};

}  // namespace layers

/// Sinusoidal timestep features (N, dim): [sin(t f_i), cos(t f_i)].
template <typename T>
BasicTensor<T> timestep_embedding(std::span<const int> ts, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<T> v(ts.size() * dim, T(0));
  for (std::size_t n = 0; n < ts.size(); ++n)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      v[n * dim + i] = static_cast<T>(std::sin(ts[n] * freq));
      v[n * dim + half + i] = static_cast<T>(std::cos(ts[n] * freq));
    }
  return BasicTensor<T>({ts.size(), dim}, std::move(v));
}

// ---------------------------------------------------------------------------

struct VaeConfig {
  int latent_channels = 4;
  int factor = 4;  // power of two
  int width = 16;
};

/// Deterministic convolutional autoencoder. Latents are multiplied by a
/// stored scale (fit after training) so they have roughly unit variance.
template <typename T>
class Vae {
 public:
  using value_type = T;

  Vae(const VaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    int stages = 0;
    for (int f = cfg.factor; f > 1; f /= 2) {
      if (f % 2) throw Error("vae: latent factor must be a power of two");
      ++stages;
    }
    Rng rng = Rng(seed).substream(streams::kInit).substream(101);
    const std::size_t w = cfg.width, C = cfg.latent_channels;
    std::size_t c = w;
    enc_in_ = layers::Conv<T>(reg_, "vae.enc.in", 3, w, 3, 1, 1, rng);
    for (int s = 0; s < stages; ++s) {
      const std::size_t next = s + 1 == stages ? 2 * w : w;
      enc_down_.emplace_back(reg_, "vae.enc.down." + std::to_string(s), c, next, 3, 2, 1, rng);
      c = next;
    }
    enc_mid_ = layers::Conv<T>(reg_, "vae.enc.mid", c, c, 3, 1, 1, rng);
    enc_out_ = layers::Conv<T>(reg_, "vae.enc.out", c, C, 3, 1, 1, rng);
    dec_in_ = layers::Conv<T>(reg_, "vae.dec.in", C, c, 3, 1, 1, rng);
    dec_mid_ = layers::Conv<T>(reg_, "vae.dec.mid", c, c, 3, 1, 1, rng);
    for (int s = stages; s-- > 0;) {
      const std::size_t next = w;
      dec_up_.emplace_back(reg_, "vae.dec.up." + std::to_string(s), c, next, rng);
      c = next;
    }
    dec_out_ = layers::Conv<T>(reg_, "vae.dec.out", c, 3, 3, 1, 1, rng);
    latent_scale_ = reg_.buffer("vae.latent_scale", BasicTensor<T>::scalar(T(1)));
  }

  const VaeConfig& config() const { return cfg_; }

  /// (N,3,H,W) -> (N,C,H/f,W/f).
  BasicTensor<T> encode(const BasicTensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != 3) throw ShapeError("vae_encode: expected (N,3,H,W), got " + to_string(x.shape()));
    const std::size_t f = cfg_.factor;
    if (x.dim(2) % f || x.dim(3) % f)
      throw ShapeError("vae_encode: image " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                       " not divisible by latent factor " + std::to_string(f));
    auto h = silu(enc_in_(x));
    for (const auto& d : enc_down_) h = silu(d(h));
    h = silu(enc_mid_(h));
    return scale(enc_out_(h), latent_scale_[0]);
  }

  /// (N,C,h,w) -> (N,3,h*f,w*f) in [0,1].
  BasicTensor<T> decode(const BasicTensor<T>& z) const {
    if (z.ndim() != 4 || z.dim(1) != static_cast<std::size_t>(cfg_.latent_channels))
      throw ShapeError("vae_decode: expected (N," + std::to_string(cfg_.latent_channels) + ",h,w), got " +
                       to_string(z.shape()));
    auto h = silu(dec_in_(scale(z, T(1) / latent_scale_[0])));
    h = silu(dec_mid_(h));
    for (const auto& u : dec_up_) h = silu(u(h));
    return sigmoid(dec_out_(h));
  }

  void set_latent_scale(T s) { latent_scale_.data()[0] = s; }
  T latent_scale() const { return latent_scale_[0]; }

  ParamRegistry<T>& registry() { return reg_; }
  const ParamRegistry<T>& registry() const { return reg_; }
  void freeze() { reg_.set_trainable(false); }

  Vae clone() const {
    Vae out(cfg_, 0);
    out.reg_.copy_values_from(reg_);
    out.reg_.copy_trainability_from(reg_);
    return out;
  }

 private:
  VaeConfig cfg_;
  ParamRegistry<T> reg_;
  layers::Conv<T> enc_in_, enc_mid_, enc_out_, dec_in_, dec_mid_, dec_out_;
  std::vector<layers::Conv<T>> enc_down_;
  std::vector<layers::ConvUp<T>> dec_up_;
  BasicTensor<T> latent_scale_;
};

// ---------------------------------------------------------------------------

struct CondConfig {
  int dim = 32;
};

/// Trainable stand-in for a text encoder: a (colour, label) token pair.
/// Label-only prompts zero the colour token.
template <typename T>
class ConditionEmbedding {
 public:
  using value_type = T;

  ConditionEmbedding(const CondConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng = Rng(seed).substream(streams::kInit).substream(303);
    labels_ = reg_.param("cond.label", BasicTensor<T>::randn({std::size_t(kNumLabels), std::size_t(cfg.dim)}, rng));
    colors_ = reg_.param("cond.color", BasicTensor<T>::randn({std::size_t(kNumColors), std::size_t(cfg.dim)}, rng));
  }

  /// (N, 2, dim): token 0 colour, token 1 label.
  BasicTensor<T> operator()(const std::vector<int>& labels, const std::vector<int>& colors,
                            const std::vector<PromptStyle>& styles) const {
    const std::size_t N = labels.size(), d = cfg_.dim;
    if (colors.size() != N || styles.size() != N) throw ShapeError("condition: ragged label/color/style lists");
    std::vector<T> keep(N);
    for (std::size_t i = 0; i < N; ++i) keep[i] = styles[i] == PromptStyle::ColorLabel ? T(1) : T(0);
    auto color_tok = mul(embedding(colors_, colors), BasicTensor<T>({N, 1}, std::move(keep)));
    auto label_tok = embedding(labels_, labels);
    return concat<T>({reshape(color_tok, {N, 1, d}), reshape(label_tok, {N, 1, d})}, 1);
  }

  const CondConfig& config() const { return cfg_; }
  ParamRegistry<T>& registry() { return reg_; }
  const ParamRegistry<T>& registry() const { return reg_; }
  void freeze() { reg_.set_trainable(false); }

  ConditionEmbedding clone() const {
    ConditionEmbedding out(cfg_, 0);
    out.reg_.copy_values_from(reg_);
    out.reg_.copy_trainability_from(reg_);
    return out;
  }

 private:
  CondConfig cfg_;
  ParamRegistry<T> reg_;
  BasicTensor<T> labels_, colors_;
};

// ---------------------------------------------------------------------------

struct UnetConfig {
  int latent_channels = 4;
  int latent_factor = 4;
  int base_width = 32;
  int depth = 2;
  int cond_dim = 32;
  int temb_dim = 64;
  int groups = 8;
};

/// Mask-conditioned denoiser eps(z_t, t, c, m). The pixel mask is max-pooled
/// to latent resolution and concatenated to z_t as an extra channel; every
/// resolution carries a cross-attention layer onto the condition tokens.
template <typename T>
class Unet {
 public:
  using value_type = T;

  Unet(const UnetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.depth < 1) throw Error("unet: depth must be >= 1");
    Rng rng = Rng(seed).substream(streams::kInit).substream(202);
    const std::size_t W = cfg.base_width, D = cfg.depth;
    conv_in_ = layers::Conv<T>(reg_, "unet.conv_in", cfg.latent_channels + 1, W, 3, 1, 1, rng);
    temb1_ = layers::Dense<T>(reg_, "unet.temb.lin1", "", W, cfg.temb_dim, rng);
    temb2_ = layers::Dense<T>(reg_, "unet.temb.lin2", "", cfg.temb_dim, cfg.temb_dim, rng);

    std::vector<std::size_t> widths;
    std::size_t c = W;
    for (std::size_t i = 0; i < D; ++i) {
      const std::size_t ci = W << i;
      widths.push_back(ci);
      const std::string name = "down." + std::to_string(i), blk = pair_name(i);
      down_.push_back({make_res(name + ".res", blk, c, ci, rng), make_attn(name + ".attn", blk, ci, rng),
                       layers::Conv<T>(reg_, name + ".downsample", ci, ci, 3, 2, 1, rng)});
      c = ci;
    }
    mid_res_ = make_res("mid.res", "mid", c, c, rng);
    mid_attn_ = make_attn("mid.attn", "mid", c, rng);
    for (std::size_t j = 0; j < D; ++j) {
      const std::size_t i = D - 1 - j, ci = widths[i];
      const std::string name = "up." + std::to_string(j), blk = pair_name(i);
      up_.push_back({layers::ConvUp<T>(reg_, name + ".upsample", c, ci, rng),
                     make_res(name + ".res", blk, 2 * ci, ci, rng), make_attn(name + ".attn", blk, ci, rng)});
      c = ci;
    }
    out_norm_ = layers::Norm<T>(reg_, "unet.out.norm", c, cfg.groups);
    out_conv_ = layers::Conv<T>(reg_, "unet.out.conv", c, cfg.latent_channels, 3, 1, 1, rng);
  }

  const UnetConfig& config() const { return cfg_; }

  /// Block-group name pairing down level i with up level depth-1-i.
  std::string pair_name(std::size_t level) const {
    return "down." + std::to_string(level) + "+up." + std::to_string(cfg_.depth - 1 - level);
  }

  std::vector<std::string> block_names() const {
    std::vector<std::string> out{"mid"};
    for (int i = cfg_.depth; i-- > 0;) out.push_back(pair_name(i));
    return out;
  }
  bool has_block(const std::string& name) const {
    for (const auto& b : block_names())
      if (b == name) return true;
    return false;
  }

  std::vector<AdaptableWeight<T>> adaptable_weights() const {
    std::vector<AdaptableWeight<T>> out;
    auto res = [&](const ResBlock& r) { out.push_back({r.temb.target, r.temb.block, r.temb.weight}); };
    auto attn = [&](const AttnBlock& a) {
      for (const auto* d : {&a.q, &a.k, &a.v, &a.o}) out.push_back({d->target, d->block, d->weight});
    };
    for (const auto& d : down_) res(d.res), attn(d.attn);
    res(mid_res_);
    attn(mid_attn_);
    for (const auto& u : up_) res(u.res), attn(u.attn);
    return out;
  }

  /// z_t (N,C,h,w); ts one timestep per sample; ctx (N,L,cond_dim);
  /// mask (N,1,h*f,w*f) with values in {0,1}. Returns eps_pred shaped like z_t.
  /// When `attn_maps` is given, each layer's attention probabilities are appended.
  BasicTensor<T> forward(const BasicTensor<T>& z_t, std::span<const int> ts, const BasicTensor<T>& ctx,
                         const BasicTensor<T>& mask, const LoraAdapterSet<T>* lora = nullptr,
                         std::vector<BasicTensor<T>>* attn_maps = nullptr) const {
    const std::size_t f = cfg_.latent_factor;
    if (z_t.ndim() != 4 || z_t.dim(1) != static_cast<std::size_t>(cfg_.latent_channels))
      throw ShapeError("unet: z_t must be (N," + std::to_string(cfg_.latent_channels) + ",h,w), got " +
                       to_string(z_t.shape()));
    const std::size_t N = z_t.dim(0), down = std::size_t{1} << cfg_.depth;
    if (z_t.dim(2) % down || z_t.dim(3) % down)
      throw ShapeError("unet: latent side must be divisible by " + std::to_string(down));
    const Shape mask_shape{N, 1, z_t.dim(2) * f, z_t.dim(3) * f};
    if (mask.shape() != mask_shape) shape_error("unet mask", mask_shape, mask.shape());
    for (auto v : mask.data())
      if (v != T(0) && v != T(1)) throw Error("unet: mask must be binary (values in {0,1})");
    if (ts.size() != N) throw ShapeError("unet: one timestep per sample required");
    if (ctx.ndim() != 3 || ctx.dim(0) != N || ctx.dim(2) != static_cast<std::size_t>(cfg_.cond_dim))
      throw ShapeError("unet: context must be (N,L," + std::to_string(cfg_.cond_dim) + "), got " + to_string(ctx.shape()));

    auto m_lat = max_pool2d(mask, f);
    auto temb = temb2_(silu(temb1_(timestep_embedding<T>(ts, cfg_.base_width), nullptr)), nullptr);
    temb = silu(temb);

    auto h = conv_in_(concat<T>({z_t, m_lat}, 1));
    std::vector<BasicTensor<T>> skips;
    for (const auto& d : down_) {
      h = res_forward(d.res, h, temb, lora);
      h = attn_forward(d.attn, h, ctx, lora, attn_maps);
      skips.push_back(h);
      h = d.downsample(h);
    }
    h = res_forward(mid_res_, h, temb, lora);
    h = attn_forward(mid_attn_, h, ctx, lora, attn_maps);
    for (std::size_t j = 0; j < up_.size(); ++j) {
      const auto& u = up_[j];
      h = u.upsample(h);
      h = concat<T>({h, skips[up_.size() - 1 - j]}, 1);
      h = res_forward(u.res, h, temb, lora);
      h = attn_forward(u.attn, h, ctx, lora, attn_maps);
    }
    return out_conv_(silu(out_norm_(h)));
  }

  ParamRegistry<T>& registry() { return reg_; }
  const ParamRegistry<T>& registry() const { return reg_; }
  void freeze() { reg_.set_trainable(false); }

  bool merged() const { return merged_; }
  void set_merged(bool m) { merged_ = m; }

  Unet clone() const {
    Unet out(cfg_, 0);
    out.reg_.copy_values_from(reg_);
    out.reg_.copy_trainability_from(reg_);
    out.merged_ = merged_;
    return out;
  }

 private:
  struct ResBlock {
    layers::Norm<T> norm1;
    layers::Conv<T> conv1;
    layers::Dense<T> temb;
    layers::Norm<T> norm2;
    layers::Conv<T> conv2;
    std::optional<layers::Conv<T>> skip;
  };
  struct AttnBlock {
    layers::Norm<T> norm;
    layers::Dense<T> q, k, v, o;
  };
  struct DownBlock {
    ResBlock res;
    AttnBlock attn;
    layers::Conv<T> downsample;
  };
  struct UpBlock {
    layers::ConvUp<T> upsample;
    ResBlock res;
    AttnBlock attn;
  };

  ResBlock make_res(const std::string& name, const std::string& block, std::size_t cin, std::size_t cout, Rng& rng) {
    ResBlock r;
    r.norm1 = layers::Norm<T>(reg_, name + ".norm1", cin, cfg_.groups);
    r.conv1 = layers::Conv<T>(reg_, name + ".conv1", cin, cout, 3, 1, 1, rng);
    r.temb = layers::Dense<T>(reg_, name + ".temb", block, cfg_.temb_dim, cout, rng);
    r.norm2 = layers::Norm<T>(reg_, name + ".norm2", cout, cfg_.groups);
    r.conv2 = layers::Conv<T>(reg_, name + ".conv2", cout, cout, 3, 1, 1, rng);
    if (cin != cout) r.skip = layers::Conv<T>(reg_, name + ".skip", cin, cout, 1, 1, 0, rng);
    return r;
  }

  AttnBlock make_attn(const std::string& name, const std::string& block, std::size_t c, Rng& rng) {
    AttnBlock a;
    a.norm = layers::Norm<T>(reg_, name + ".norm", c, cfg_.groups);
    a.q = layers::Dense<T>(reg_, name + ".q", block, c, c, rng);
    a.k = layers::Dense<T>(reg_, name + ".k", block, cfg_.cond_dim, c, rng);
    a.v = layers::Dense<T>(reg_, name + ".v", block, cfg_.cond_dim, c, rng);
    a.o = layers::Dense<T>(reg_, name + ".o", block, c, c, rng);
    return a;
  }

  BasicTensor<T> res_forward(const ResBlock& r, const BasicTensor<T>& x, const BasicTensor<T>& temb,
                             const LoraAdapterSet<T>* lora) const {
    auto h = r.conv1(silu(r.norm1(x)));
    const std::size_t N = h.dim(0), C = h.dim(1);
    h = add(h, reshape(r.temb(temb, lora), {N, C, 1, 1}));
    h = r.conv2(silu(r.norm2(h)));
    return add(r.skip ? (*r.skip)(x) : x, h);
  }

  BasicTensor<T> attn_forward(const AttnBlock& a, const BasicTensor<T>& x, const BasicTensor<T>& ctx,
                              const LoraAdapterSet<T>* lora, std::vector<BasicTensor<T>>* maps) const {
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), L = ctx.dim(1);
    auto tokens = reshape(permute(a.norm(x), {0, 2, 3, 1}), {N * H * W, C});
    auto q = reshape(a.q(tokens, lora), {N, H * W, C});
    auto flat_ctx = reshape(ctx, {N * L, ctx.dim(2)});
    auto k = reshape(a.k(flat_ctx, lora), {N, L, C});
    auto v = reshape(a.v(flat_ctx, lora), {N, L, C});
    auto w = attention_weights(q, k);
    if (maps) maps->push_back(w.detach());
    auto o = a.o(reshape(matmul(w, v), {N * H * W, C}), lora);
    return add(x, permute(reshape(o, {N, H, W, C}), {0, 3, 1, 2}));
  }

  UnetConfig cfg_;
  ParamRegistry<T> reg_;
  layers::Conv<T> conv_in_;
  layers::Dense<T> temb1_, temb2_;
  std::vector<DownBlock> down_;
  ResBlock mid_res_;
  AttnBlock mid_attn_;
  std::vector<UpBlock> up_;
  layers::Norm<T> out_norm_;
  layers::Conv<T> out_conv_;
  bool merged_ = false;
};

}  // namespace soekit

#endif  // SOEKIT_NETS_HPP
