// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_METRICS_HPP
#define SOEKIT_METRICS_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "soekit/checkpoint.hpp"
#include "soekit/data.hpp"
#include "soekit/distill.hpp"
#include "soekit/image.hpp"
#include "soekit/loss.hpp"
#include "soekit/nets.hpp"

namespace soekit {

inline constexpr std::size_t kProbeSide = 32;

/// bbox region of `img` resized (bilinear) to out_side x out_side, (1,3,s,s).
inline Tensor masked_crop(const Image& img, const BBox& b, std::size_t out_side = kProbeSide) {
  if (b.w <= 0 || b.h <= 0) throw Error("masked_crop: degenerate bbox " + b.str());
  if (!b.inside(static_cast<int>(img.width), static_cast<int>(img.height)))
    throw Error("masked_crop: bbox " + b.str() + " outside image");
  return resize_bilinear(crop(image_tensor(img), b.y, b.x, b.h, b.w), out_side, out_side);
}

struct ProbeOutput {
  Tensor features;      // (N,32) penultimate activations
  Tensor label_logits;  // (N,5)
  Tensor color_logits;  // (N,8)
};

/// Small convnet on 32x32 crops with a shape head and a colour head.
class ProbeClassifier {
 public:
  static constexpr std::size_t kFeatures = 32;

  explicit ProbeClassifier(std::uint64_t seed = 0) {
    Rng rng = Rng(seed).substream(streams::kProbe).substream(404);
    c1_ = layers::Conv<float>(reg_, "probe.conv1", 3, 16, 3, 1, 1, rng);
    c2_ = layers::Conv<float>(reg_, "probe.conv2", 16, 32, 3, 2, 1, rng);
    c3_ = layers::Conv<float>(reg_, "probe.conv3", 32, kFeatures, 3, 2, 1, rng);
    label_ = layers::Dense<float>(reg_, "probe.label", "", kFeatures, kNumLabels, rng);
    color_ = layers::Dense<float>(reg_, "probe.color", "", kFeatures, kNumColors, rng);
  }

  ProbeOutput forward(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != 3 || x.dim(2) != kProbeSide || x.dim(3) != kProbeSide)
      throw ShapeError("probe: expected (N,3,32,32), got " + to_string(x.shape()));
    auto h = silu(c3_(silu(c2_(silu(c1_(x))))));
    auto feat = mean_hw(h);
    return {feat, label_(feat, nullptr), color_(feat, nullptr)};
  }

  bool trained() const { return trained_; }
  void set_trained(bool t) { trained_ = t; }
  ParamRegistry<float>& registry() { return reg_; }
  const ParamRegistry<float>& registry() const { return reg_; }

  Checkpoint checkpoint(const nlohmann::ordered_json& info = nullptr) const {
    Checkpoint ck;
    ck.meta["format"] = "soekit";
    ck.meta["role"] = "probe";
    ck.meta["trained"] = trained_;
    ck.meta["config"] = info;
    ck.put_all(reg_.all());
    return ck;
  }

  static ProbeClassifier from_checkpoint(const Checkpoint& ck) {
    if (ck.meta.value("role", "") != "probe") throw Error("checkpoint is not a probe classifier");
    ProbeClassifier p;
    ck.restore(p.reg_.all());
    p.trained_ = ck.meta.value("trained", false);
    p.reg_.set_trainable(false);
    return p;
  }

 private:
  ParamRegistry<float> reg_;
  layers::Conv<float> c1_, c2_, c3_;
  layers::Dense<float> label_, color_;
  bool trained_ = false;
};

struct ProbeConfig {
  int steps = 1500;
  int batch_size = 32;
  double lr = 2e-3;
  double background_fraction = 0.2;  // crops with no object, trained towards uniform outputs
  int image_side = 64;
  int min_side = 5;
  int max_side = 32;
};

/// Trains the probe on freshly rendered scenes from the probe stream, so
/// its data never overlaps any dataset split.
inline ProbeClassifier train_probe(const ProbeConfig& cfg, std::uint64_t seed,
                                   const std::function<void(long, double)>& on_step = {}) {
  if (cfg.steps < 1 || cfg.batch_size < 1) throw Error("train_probe: steps and batch_size must be >= 1");
  ProbeClassifier probe(seed);
  AdamOptions opts;
  opts.lr = cfg.lr;
  Adam<float> opt(probe.registry().params(), opts);
  const SideRange sides{cfg.min_side, cfg.max_side};
  for (long s = 0; s < cfg.steps; ++s) {
    Rng rng = Rng(seed).substream(streams::kProbe).substream(static_cast<std::uint64_t>(s));
    std::vector<Tensor> crops;
    std::vector<float> tl, tc;
    for (int i = 0; i < cfg.batch_size; ++i) {
      SoeSample smp = generate_scene(rng, sides, cfg.image_side);
      std::vector<float> pl(kNumLabels, 0.f), pc(kNumColors, 0.f);
      if (rng.uniform() < cfg.background_fraction) {
        // A box on an empty background.
        const int k = static_cast<int>(rng.uniform_int(cfg.min_side, cfg.max_side));
        const int x = static_cast<int>(rng.uniform_int(0, cfg.image_side - k));
        const int y = static_cast<int>(rng.uniform_int(0, cfg.image_side - k));
        Image bg = render_background(rng, cfg.image_side);
        for (auto& p : bg.data) p = quantize8(p);
        crops.push_back(masked_crop(bg, {x, y, k, k}));
        std::fill(pl.begin(), pl.end(), 1.f / kNumLabels);
        std::fill(pc.begin(), pc.end(), 1.f / kNumColors);
      } else {
        crops.push_back(masked_crop(smp.image, smp.bbox));
        pl[smp.label] = 1.f;
        pc[smp.color] = 1.f;
      }
      tl.insert(tl.end(), pl.begin(), pl.end());
      tc.insert(tc.end(), pc.begin(), pc.end());
    }
    const std::size_t B = cfg.batch_size;
    const auto out = probe.forward(concat(crops, 0));
    const auto loss = add(soft_cross_entropy(out.label_logits, Tensor({B, std::size_t(kNumLabels)}, std::move(tl))),
                          soft_cross_entropy(out.color_logits, Tensor({B, std::size_t(kNumColors)}, std::move(tc))));
    backward(loss);
    opt.step();
    if (on_step) on_step(s + 1, loss.item());
  }
  probe.registry().set_trainable(false);
  probe.set_trained(true);
  return probe;
}

struct ProbeScores {
  std::vector<std::vector<double>> features;  // per crop
  std::vector<std::vector<double>> label_prob, color_prob;
};

inline std::vector<double> softmax_row(const Tensor& logits, std::size_t n) {
  const std::size_t K = logits.dim(1);
  double mx = -1e300;
  for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits[n * K + k]));
  std::vector<double> p(K);
  double z = 0;
  for (std::size_t k = 0; k < K; ++k) z += p[k] = std::exp(logits[n * K + k] - mx);
  for (auto& v : p) v /= z;
  return p;
}

/// Runs the probe over (N,3,32,32) crops in chunks.
inline ProbeScores probe_scores(const ProbeClassifier& probe, const Tensor& crops, std::size_t chunk = 64) {
  if (!probe.trained()) throw Error("alignment_score: probe classifier is untrained");
  NoGradGuard g;
  ProbeScores out;
  for (std::size_t b = 0; b < crops.dim(0); b += chunk) {
    const auto o = probe.forward(slice(crops, 0, b, std::min(crops.dim(0), b + chunk)));
    for (std::size_t n = 0; n < o.features.dim(0); ++n) {
      std::vector<double> f(ProbeClassifier::kFeatures);
      for (std::size_t k = 0; k < f.size(); ++k) f[k] = o.features[n * f.size() + k];
      out.features.push_back(std::move(f));
      out.label_prob.push_back(softmax_row(o.label_logits, n));
      out.color_prob.push_back(softmax_row(o.color_logits, n));
    }
  }
  return out;
}

/// Label-only: probability of the prompted label. Colour+label: geometric
/// mean of the label and colour probabilities.
inline double alignment_from_probs(const std::vector<double>& label_prob, const std::vector<double>& color_prob,
                                   int label, int color, PromptStyle style) {
  const double pl = label_prob.at(label);
  return style == PromptStyle::LabelOnly ? pl : std::sqrt(pl * color_prob.at(color));
}

inline double alignment_score(const ProbeClassifier& probe, const Tensor& crop, int label, int color,
                              PromptStyle style) {
  const auto s = probe_scores(probe, crop);
  return alignment_from_probs(s.label_prob.at(0), s.color_prob.at(0), label, color, style);
}

/// Squared 2-Wasserstein distance between Gaussians fitted to the rows of
/// a and b (unbiased covariances, 1e-6 ridge, eigen-based square roots).
inline double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, std::string* warning = nullptr) {
  if (a.rows() < 2 || b.rows() < 2) throw Error("frechet_distance: need at least 2 samples per set");
  if (a.cols() != b.cols()) throw ShapeError("frechet_distance: feature dims differ");
  const Eigen::Index d = a.cols();
  if (warning && (a.rows() <= d || b.rows() <= d))
    *warning = "frechet_distance: fewer samples than feature dims; covariance is rank-deficient";
  auto moments = [d](const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
    cov += 1e-6 * Eigen::MatrixXd::Identity(d, d);
  };
  auto sqrtm = [](const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return Eigen::MatrixXd(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
  };
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd s_a, s_b;
  moments(a, mu_a, s_a);
  moments(b, mu_b, s_b);
  const Eigen::MatrixXd ra = sqrtm(s_a);
  const double cross = sqrtm(ra * s_b * ra).trace();
  const double dist = (mu_a - mu_b).squaredNorm() + s_a.trace() + s_b.trace() - 2.0 * cross;
  return std::max(0.0, dist);
}

inline Eigen::MatrixXd feature_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Eigen::MatrixXd m(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  return m;
}

/// Side of the mask's footprint in the map at depth d, rounded half away
/// from zero: round(image_side / (f 2^d) * mask_side / image_side).
inline int effective_area(double image_side, double mask_side, int latent_factor, int depth) {
  if (!(image_side > 0 && mask_side > 0 && latent_factor > 0 && depth >= 0))
    throw Error("effective_area: arguments must be positive");
  if (mask_side > image_side) throw Error("effective_area: mask side exceeds image side");
  const double map_side = image_side / (latent_factor * std::ldexp(1.0, depth));
  return std::max(0, static_cast<int>(std::round(map_side * (mask_side / image_side))));
}

// ---------------------------------------------------------------------------
// Evaluation

struct StyleMetrics {
  PromptStyle style = PromptStyle::ColorLabel;
  double alignment_mean = 0;
  double frechet = 0;
  std::size_t n = 0;
  std::vector<double> per_sample;
};

struct MetricsReport {
  std::vector<StyleMetrics> rows;
  std::uint64_t seed = 0;
  nlohmann::ordered_json config;

  const StyleMetrics& at(PromptStyle s) const {
    for (const auto& r : rows)
      if (r.style == s) return r;
    throw Error("metrics: no row for style " + std::string(style_name(s)));
  }
};

/// Scores generated images against references using only the bbox crops.
inline StyleMetrics evaluate_images(const ProbeClassifier& probe, const std::vector<Image>& generated,
                                    const std::vector<SoeSample>& refs, PromptStyle style) {
  if (generated.size() != refs.size()) throw Error("evaluate: generated/reference count mismatch");
  if (refs.empty()) throw Error("evaluate: empty validation set");
  std::vector<Tensor> gen_crops, ref_crops;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    gen_crops.push_back(masked_crop(generated[i], refs[i].bbox));
    ref_crops.push_back(masked_crop(refs[i].image, refs[i].bbox));
  }
  const auto gs = probe_scores(probe, concat(gen_crops, 0));
  const auto rs = probe_scores(probe, concat(ref_crops, 0));
  StyleMetrics m;
  m.style = style;
  m.n = refs.size();
  double acc = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const double a = alignment_from_probs(gs.label_prob[i], gs.color_prob[i], refs[i].label, refs[i].color, style);
    m.per_sample.push_back(a);
    acc += a;
  }
  m.alignment_mean = acc / refs.size();
  m.frechet = frechet_distance(feature_matrix(gs.features), feature_matrix(rs.features));
  return m;
}

struct EvalConfig {
  int ddim_steps = 20;
  int batch_size = 16;
  std::vector<std::string> styles{"label", "color_label"};
  int max_samples = 0;  // 0 = whole split
  ProbeConfig probe;
  std::uint64_t probe_seed = 7;
};

/// Edits every validation sample inside its own bbox with its own prompt and
/// scores the generated crops.
inline MetricsReport evaluate(const SoeModel& model, const ProbeClassifier& probe, std::vector<SoeSample> val,
                              const EvalConfig& cfg, std::uint64_t seed) {
  if (val.empty()) throw Error("evaluate: validation split is empty");
  if (cfg.max_samples > 0 && val.size() > static_cast<std::size_t>(cfg.max_samples)) val.resize(cfg.max_samples);
  for (const auto& s : val)
    if (s.image.height != static_cast<std::size_t>(model.config.image_side))
      throw Error("evaluate: sample " + s.id + " does not match the checkpoint's image side " +
                  std::to_string(model.config.image_side));
  MetricsReport rep;
  rep.seed = seed;
  for (const auto& sname : cfg.styles) {
    const PromptStyle style = parse_style(sname);
    std::vector<Image> generated;
    for (std::size_t b = 0; b < val.size(); b += cfg.batch_size) {
      std::vector<EditRequest> reqs;
      for (std::size_t i = b; i < std::min(val.size(), b + cfg.batch_size); ++i)
        reqs.push_back({&val[i].image, val[i].bbox, val[i].label, val[i].color, style, i});
      auto out = edit_batch(model, reqs, cfg.ddim_steps, seed);
      for (auto& im : out) generated.push_back(std::move(im));
    }
    rep.rows.push_back(evaluate_images(probe, generated, val, style));
  }
  return rep;
}

inline void write_metrics_csv(const MetricsReport& rep, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "style,alignment_mean,frechet,n\n";
  for (const auto& r : rep.rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%zu\n", std::string(style_name(r.style)).c_str(), r.alignment_mean,
                  r.frechet, r.n);
    out << buf;
  }
}

inline void write_details_csv(const MetricsReport& rep, const std::vector<SoeSample>& val,
                              const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "id,style,alignment\n";
  for (const auto& r : rep.rows)
    for (std::size_t i = 0; i < r.per_sample.size(); ++i) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s,%s,%.6f\n", val.at(i).id.c_str(), std::string(style_name(r.style)).c_str(),
                    r.per_sample[i]);
      out << buf;
    }
}

}  // namespace soekit

#endif  // SOEKIT_METRICS_HPP
