// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_DATA_HPP
#define SOEKIT_DATA_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "soekit/image.hpp"
#include "soekit/rng.hpp"
#include "soekit/vocab.hpp"

namespace soekit {

enum class Split { TrainSmall, TrainGeneric, ValSmall };

inline constexpr std::array<Split, 3> kSplits{Split::TrainSmall, Split::TrainGeneric, Split::ValSmall};

inline std::string split_name(Split s) {
  switch (s) {
    case Split::TrainSmall: return "train-small";
    case Split::TrainGeneric: return "train-generic";
    case Split::ValSmall: return "val-small";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  for (auto sp : kSplits)
    if (split_name(sp) == s) return sp;
  throw Error("unknown split '" + std::string(s) + "' (expected train-small, train-generic or val-small)");
}

struct SoeSample {
  std::string id;
  Image image;
  BBox bbox;
  int label = 0;
  int color = 0;
  Split split = Split::TrainSmall;

  std::string caption(PromptStyle style) const { return soekit::caption(label, color, style); }
  bool operator==(const SoeSample&) const = default;
};

/// Split size rules on a box inside a side x side image. Integer
/// arithmetic, so the thresholds are exact:
///   train-small    area fraction < (1/8)^2
///   val-small      area fraction in ((1/8)^2, (1/6)^2]
///   train-generic  both side fractions in [1/4, 1/2]
inline bool curation_filter(const BBox& b, int width, int height, Split split) {
  if (!b.inside(width, height)) return false;
  const long img = static_cast<long>(width) * height, a = b.area();
  switch (split) {
    case Split::TrainSmall: return a * 64 < img;
    case Split::ValSmall: return a * 64 > img && a * 36 <= img;
    case Split::TrainGeneric:
      return 4L * b.w >= width && 2L * b.w <= width && 4L * b.h >= height && 2L * b.h <= height;
  }
  return false;
}

inline bool curation_filter(const SoeSample& s, Split split) {
  return curation_filter(s.bbox, static_cast<int>(s.image.width), static_cast<int>(s.image.height), split);
}

struct SideRange {
  int min_side = 1;
  int max_side = 1;
};

/// Integer object sides whose square box passes the split's filter, floored
/// at `min_side` so the mask survives latent downsampling.
inline SideRange split_side_range(Split split, int image_side, int min_side) {
  SideRange r{0, -1};
  for (int k = std::max(1, min_side); k <= image_side; ++k)
    if (curation_filter(BBox{0, 0, k, k}, image_side, image_side, split)) {
      if (r.min_side == 0) r.min_side = k;
      r.max_side = k;
    }
  if (r.max_side < r.min_side)
    throw Error("no object side satisfies split " + split_name(split) + " at image side " + std::to_string(image_side));
  return r;
}

/// Integer sides k with lo*image_side <= k < hi*image_side.
inline SideRange fraction_side_range(double lo, double hi, int image_side, int min_side = 1) {
  if (!(lo > 0 && lo < hi && hi <= 0.5 + 1e-12))
    throw Error("generate_scene: side fraction range must lie in (0, 1/2] with lo < hi");
  SideRange r{std::max(min_side, static_cast<int>(std::ceil(lo * image_side - 1e-9))),
              static_cast<int>(std::ceil(hi * image_side - 1e-9)) - 1};
  if (r.max_side < r.min_side) throw Error("generate_scene: infeasible side range at this image size");
  return r;
}

namespace detail {

// Coverage test in unit-box coordinates (u right, v down).
inline bool shape_contains(int label, double u, double v) {
  const double du = u - 0.5, dv = v - 0.5, r2 = du * du + dv * dv;
  switch (label) {
    case 0: return r2 <= 0.25;
    case 1: return true;
    case 2: return std::abs(du) <= 0.5 * (0.2 + 0.8 * v);
    case 3: return std::abs(du) <= 1.0 / 6 || std::abs(dv) <= 1.0 / 6;
    case 4: return r2 <= 0.25 && r2 >= 0.25 * 0.55 * 0.55;
  }
  throw Error("unknown shape label id " + std::to_string(label));
}

}  // namespace detail

/// Low-frequency coloured background: a 4x4 grid of RGB values in
/// [0.35, 0.65], bilinearly interpolated. Not quantized.
inline Image render_background(Rng& rng, int image_side) {
  constexpr int kGrid = 4;
  Image img(image_side, image_side);
  std::array<double, 3 * kGrid * kGrid> grid;
  for (auto& g : grid) g = rng.uniform(0.35, 0.65);
  for (int py = 0; py < image_side; ++py)
    for (int px = 0; px < image_side; ++px) {
      const double gy = (py + 0.5) / image_side * (kGrid - 1), gx = (px + 0.5) / image_side * (kGrid - 1);
      const int y0 = std::min(kGrid - 2, static_cast<int>(gy)), x0 = std::min(kGrid - 2, static_cast<int>(gx));
      const double fy = gy - y0, fx = gx - x0;
      for (int c = 0; c < 3; ++c) {
        auto g = [&](int yy, int xx) { return grid[(c * kGrid + yy) * kGrid + xx]; };
        const double top = g(y0, x0) + (g(y0, x0 + 1) - g(y0, x0)) * fx;
        const double bot = g(y0 + 1, x0) + (g(y0 + 1, x0 + 1) - g(y0 + 1, x0)) * fx;
        img.at(c, py, px) = static_cast<float>(top + (bot - top) * fy);
      }
    }
  return img;
}

/// Renders one object of the given label/colour with its square footprint
/// at (x, y) of side k onto a fresh background. The returned bbox is tight
/// around the pixels the shape actually covers.
inline SoeSample render_scene(Rng& rng, int image_side, int label, int color, int x, int y, int k) {
  constexpr int kSuper = 4;
  SoeSample s;
  s.label = label;
  s.color = color;
  s.image = render_background(rng, image_side);
  const auto& pc = kPalette.at(color);
  const double rgb[3] = {pc.r, pc.g, pc.b};
  int bx0 = image_side, by0 = image_side, bx1 = -1, by1 = -1;
  for (int py = y; py < y + k; ++py)
    for (int px = x; px < x + k; ++px) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double u = (px - x + (sx + 0.5) / kSuper) / k, v = (py - y + (sy + 0.5) / kSuper) / k;
          hits += detail::shape_contains(label, u, v);
        }
      if (!hits) continue;
      const double a = static_cast<double>(hits) / (kSuper * kSuper);
      for (int c = 0; c < 3; ++c) {
        float& p = s.image.at(c, py, px);
        p = static_cast<float>((1 - a) * p + a * rgb[c]);
      }
      bx0 = std::min(bx0, px), bx1 = std::max(bx1, px), by0 = std::min(by0, py), by1 = std::max(by1, py);
    }
  for (auto& p : s.image.data) p = quantize8(p);
  s.bbox = {bx0, by0, bx1 - bx0 + 1, by1 - by0 + 1};
  return s;
}

/// One object of a random label and colour with side drawn uniformly from
/// `sides`, placed uniformly at random fully inside the image.
inline SoeSample generate_scene(Rng& rng, SideRange sides, int image_side) {
  if (sides.min_side < 1 || sides.max_side < sides.min_side || 2 * sides.max_side > image_side)
    throw Error("generate_scene: infeasible side range [" + std::to_string(sides.min_side) + ", " +
                std::to_string(sides.max_side) + "] for image side " + std::to_string(image_side));
  const int k = static_cast<int>(rng.uniform_int(sides.min_side, sides.max_side));
  const int label = static_cast<int>(rng.uniform_int(0, kNumLabels - 1));
  const int color = static_cast<int>(rng.uniform_int(0, kNumColors - 1));
  const int x = static_cast<int>(rng.uniform_int(0, image_side - k));
  const int y = static_cast<int>(rng.uniform_int(0, image_side - k));
  return render_scene(rng, image_side, label, color, x, y, k);
}

inline SoeSample generate_scene(std::uint64_t seed, double side_lo, double side_hi, int image_side) {
  Rng rng = Rng(seed).substream(streams::kData);
  return generate_scene(rng, fraction_side_range(side_lo, side_hi, image_side), image_side);
}

inline std::string sample_id(Split split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return split_name(split) + "-" + buf;
}

struct DataConfig {
  int image_side = 64;
  int latent_factor = 4;
  int count_train_small = 2000;
  int count_train_generic = 2000;
  int count_val_small = 200;
};

/// Sample i of a split depends only on (seed, split, i).
inline SoeSample generate_sample(std::uint64_t seed, Split split, std::size_t index, const DataConfig& cfg) {
  const SideRange sides = split_side_range(split, cfg.image_side, cfg.latent_factor + 1);
  Rng rng = Rng(seed).substream(streams::kData).substream(static_cast<std::uint64_t>(split) + 1).substream(index);
  for (int attempt = 0; attempt < 64; ++attempt) {
    SoeSample s = generate_scene(rng, sides, cfg.image_side);
    if (std::min(s.bbox.w, s.bbox.h) < cfg.latent_factor + 1 || !curation_filter(s, split)) continue;
    s.id = sample_id(split, index);
    s.split = split;
    return s;
  }
  throw Error("generate_sample: curation rejected 64 draws for " + sample_id(split, index));
}

inline std::vector<SoeSample> generate_split(Split split, std::size_t count, std::uint64_t seed,
                                             const DataConfig& cfg) {
  std::vector<SoeSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(seed, split, i, cfg));
  return out;
}

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/index.jsonl plus <dir>/images/<id>.ppm.

inline nlohmann::ordered_json sample_json(const SoeSample& s) {
  nlohmann::ordered_json j;
  j["id"] = s.id;
  j["image"] = "images/" + s.id + ".ppm";
  j["bbox"] = {s.bbox.x, s.bbox.y, s.bbox.w, s.bbox.h};
  j["label"] = std::string(kLabels.at(s.label));
  j["color"] = std::string(kPalette.at(s.color).name);
  j["split"] = split_name(s.split);
  j["captions"] = {{"label", s.caption(PromptStyle::LabelOnly)}, {"color_label", s.caption(PromptStyle::ColorLabel)}};
  return j;
}

inline std::vector<SoeSample> read_dataset(const std::filesystem::path& dir,
                                           std::optional<Split> only = std::nullopt) {
  const auto index = dir / "index.jsonl";
  std::ifstream in(index);
  if (!in) throw Error("dataset index not found: " + index.string());
  std::vector<SoeSample> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    SoeSample s;
    std::string image_rel;
    try {
      const auto j = nlohmann::json::parse(line);
      s.id = j.at("id").get<std::string>();
      image_rel = j.at("image").get<std::string>();
      const auto& b = j.at("bbox");
      if (!b.is_array() || b.size() != 4) throw Error("bbox must be [x,y,w,h]");
      s.bbox = {b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
      s.label = label_id(j.at("label").get<std::string>());
      s.color = color_id(j.at("color").get<std::string>());
      s.split = parse_split(j.at("split").get<std::string>());
    } catch (const std::exception& e) {
      throw Error(index.string() + ":" + std::to_string(lineno) + ": malformed index line: " + e.what());
    }
    if (only && s.split != *only) continue;
    s.image = read_ppm(dir / image_rel);
    if (!s.bbox.inside(static_cast<int>(s.image.width), static_cast<int>(s.image.height)))
      throw Error(index.string() + ":" + std::to_string(lineno) + ": bbox " + s.bbox.str() + " outside image bounds");
    out.push_back(std::move(s));
  }
  return out;
}

/// Writes samples, merging with any entries already indexed in `dir` (an
/// existing entry with the same id is replaced). Index order: split, then id.
inline void write_dataset(const std::vector<SoeSample>& samples, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::vector<SoeSample> all;
  if (fs::exists(dir / "index.jsonl")) all = read_dataset(dir);
  for (const auto& s : samples) {
    auto it = std::find_if(all.begin(), all.end(), [&](const SoeSample& o) { return o.id == s.id; });
    if (it != all.end()) *it = s;
    else all.push_back(s);
  }
  std::stable_sort(all.begin(), all.end(), [](const SoeSample& a, const SoeSample& b) {
    return a.split != b.split ? a.split < b.split : a.id < b.id;
  });
  for (const auto& s : samples) write_ppm(dir / "images" / (s.id + ".ppm"), s.image);
  std::ofstream out(dir / "index.jsonl", std::ios::binary);
  if (!out) throw Error("cannot write " + (dir / "index.jsonl").string());
  for (const auto& s : all) out << sample_json(s).dump() << "\n";
}

inline std::vector<SoeSample> filter_split(const std::vector<SoeSample>& all, Split split) {
  std::vector<SoeSample> out;
  for (const auto& s : all)
    if (s.split == split) out.push_back(s);
  return out;
}

}  // namespace soekit

#endif  // SOEKIT_DATA_HPP
