// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_LORA_HPP
#define SOEKIT_LORA_HPP

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "soekit/ops.hpp"
#include "soekit/optim.hpp"
#include "soekit/rng.hpp"

namespace soekit {

/// Low-rank update for one weight W0 (out,in): delta W = B A with
/// A (rank,in) Gaussian-initialised and B (out,rank) zero-initialised.
template <typename T>
struct LoraAdapter {
  std::string target;
  BasicTensor<T> A;
  BasicTensor<T> B;
  int rank = 0;
  T alpha = T(1);
};

struct LoraConfig {
  bool enabled = true;
  int rank = 4;
  double alpha = 1.0;
  double init_std = 0.01;
  // U-Net block groups to adapt, e.g. "mid", "down.1+up.0", "down.0+up.1".
  std::vector<std::string> blocks{"mid", "down.1+up.0", "down.0+up.1"};
};

/// alpha * (x A^T) B^T for x (n,in); never forms B A.
template <typename T>
BasicTensor<T> lora_delta(const BasicTensor<T>& x, const LoraAdapter<T>& a) {
  return scale(matmul(matmul(x, transpose(a.A)), transpose(a.B)), a.alpha);
}

/// x W0^T + alpha (x A^T) B^T, i.e. (W0 + alpha B A) applied to the rows of x.
template <typename T>
BasicTensor<T> adapted_matmul(const BasicTensor<T>& x, const BasicTensor<T>& W0, const LoraAdapter<T>& a) {
  detail::require_rank("adapted_matmul", x, 2);
  detail::require_rank("adapted_matmul", W0, 2);
  if (x.dim(1) != W0.dim(1)) shape_error("adapted_matmul", x.shape(), W0.shape());
  if (a.A.dim(1) != W0.dim(1) || a.B.dim(0) != W0.dim(0) || a.A.dim(0) != a.B.dim(1))
    shape_error("adapted_matmul", W0.shape(), Shape{a.B.dim(0), a.A.dim(1)});
  return add(matmul(x, transpose(W0)), lora_delta(x, a));
}

/// A weight a model exposes for adaptation.
template <typename T>
struct AdaptableWeight {
  std::string target;  // unique id, e.g. "down.0.attn.q"
  std::string block;   // selection group, e.g. "down.0+up.1"
  BasicTensor<T> weight;
};

template <typename T>
class LoraAdapterSet {
 public:
  LoraAdapterSet() = default;
  explicit LoraAdapterSet(LoraConfig config) : config_(std::move(config)) {}

  const LoraConfig& config() const { return config_; }
  const std::map<std::string, LoraAdapter<T>>& adapters() const { return adapters_; }
  std::map<std::string, LoraAdapter<T>>& adapters() { return adapters_; }
  bool empty() const { return adapters_.empty(); }

  const LoraAdapter<T>* find(const std::string& target) const {
    auto it = adapters_.find(target);
    return it == adapters_.end() ? nullptr : &it->second;
  }

  /// Serialized as lora.<target>.A / lora.<target>.B.
  NamedTensors<T> named_parameters() const {
    NamedTensors<T> out;
    for (const auto& [target, a] : adapters_) {
      out.emplace_back("lora." + target + ".A", a.A);
      out.emplace_back("lora." + target + ".B", a.B);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [target, a] : adapters_) n += a.A.size() + a.B.size();
    return n;
  }

  void set_trainable(bool flag) {
    for (auto& [target, a] : adapters_) {
      a.A.set_requires_grad(flag);
      a.B.set_requires_grad(flag);
    }
  }

 private:
  LoraConfig config_;
  std::map<std::string, LoraAdapter<T>> adapters_;
};

namespace detail {
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}
}  // namespace detail

/// Attaches adapters to every adaptable weight in the selected blocks and
/// freezes the base model. Model must provide has_block(), freeze() and
/// adaptable_weights().
template <typename Model>
auto attach(Model& base, const LoraConfig& cfg, std::uint64_t seed) {
  using T = typename Model::value_type;
  if (!cfg.enabled) throw Error("lora: attach called with LoRA disabled");
  if (cfg.blocks.empty()) throw Error("lora: no blocks selected");
  if (cfg.rank < 1) throw Error("lora: rank must be >= 1");
  for (const auto& b : cfg.blocks)
    if (!base.has_block(b)) throw Error("lora: unknown block '" + b + "'");
  base.freeze();
  LoraAdapterSet<T> set(cfg);
  const Rng root = Rng(seed).substream(streams::kLora);
  for (const auto& w : base.adaptable_weights()) {
    if (std::find(cfg.blocks.begin(), cfg.blocks.end(), w.block) == cfg.blocks.end()) continue;
    const std::size_t out = w.weight.dim(0), in = w.weight.dim(1);
    if (static_cast<std::size_t>(cfg.rank) >= std::min(out, in))
      throw Error("lora: rank " + std::to_string(cfg.rank) + " not below min(" + std::to_string(out) + "," +
                  std::to_string(in) + ") for " + w.target);
    Rng rng = root.substream(detail::fnv1a(w.target));
    LoraAdapter<T> a;
    a.target = w.target;
    a.rank = cfg.rank;
    a.alpha = static_cast<T>(cfg.alpha);
    a.A = BasicTensor<T>::randn({std::size_t(cfg.rank), in}, rng, cfg.init_std, true);
    a.B = BasicTensor<T>::zeros({out, std::size_t(cfg.rank)}, true);
    set.adapters().emplace(w.target, std::move(a));
  }
  return set;
}

/// Returns a copy of `base` with every adapted weight replaced by
/// W0 + alpha B A. The copy is flagged merged and refuses a second merge.
template <typename Model>
Model merge(const Model& base, const LoraAdapterSet<typename Model::value_type>& set) {
  using T = typename Model::value_type;
  if (base.merged()) throw Error("lora: base model is already merged");
  Model out = base.clone();
  auto weights = out.adaptable_weights();
  for (const auto& [target, a] : set.adapters()) {
    auto it = std::find_if(weights.begin(), weights.end(), [&](const auto& w) { return w.target == target; });
    if (it == weights.end()) throw Error("lora: adapter target '" + target + "' not present in base model");
    auto W = it->weight;
    const std::size_t rows = W.dim(0), cols = W.dim(1), r = a.A.dim(0);
    if (a.B.dim(0) != rows || a.A.dim(1) != cols || a.B.dim(1) != r)
      throw Error("lora: adapter '" + target + "' shape does not match base weight " + to_string(W.shape()));
    auto w = W.data();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        T acc = 0;
        for (std::size_t k = 0; k < r; ++k) acc += a.B[i * r + k] * a.A[k * cols + j];
        w[i * cols + j] += a.alpha * acc;
      }
  }
  out.set_merged(true);
  return out;
}

}  // namespace soekit

#endif  // SOEKIT_LORA_HPP
