// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_VOCAB_HPP
#define SOEKIT_VOCAB_HPP

#include <array>
#include <string>
#include <string_view>

#include "soekit/tensor.hpp"

namespace soekit {

inline constexpr std::array<std::string_view, 5> kLabels{"circle", "square", "triangle", "cross", "ring"};

struct PaletteColor {
  std::string_view name;
  float r, g, b;
};

// Corners of the RGB cube: maximally separated, so the colour of a shape
// survives blending with a mid-grey background.
inline constexpr std::array<PaletteColor, 8> kPalette{{{"black", 0, 0, 0},
                                                       {"white", 1, 1, 1},
                                                       {"red", 1, 0, 0},
                                                       {"green", 0, 1, 0},
                                                       {"blue", 0, 0, 1},
                                                       {"yellow", 1, 1, 0},
                                                       {"cyan", 0, 1, 1},
                                                       {"magenta", 1, 0, 1}}};

inline constexpr int kNumLabels = static_cast<int>(kLabels.size());
inline constexpr int kNumColors = static_cast<int>(kPalette.size());

enum class PromptStyle { LabelOnly, ColorLabel };

inline std::string_view style_name(PromptStyle s) { return s == PromptStyle::LabelOnly ? "label" : "color_label"; }

inline PromptStyle parse_style(std::string_view s) {
  if (s == "label" || s == "label_only") return PromptStyle::LabelOnly;
  if (s == "color_label" || s == "color+label") return PromptStyle::ColorLabel;
  throw Error("unknown prompt style '" + std::string(s) + "' (expected label or color_label)");
}

inline int label_id(std::string_view name) {
  for (int i = 0; i < kNumLabels; ++i)
    if (kLabels[i] == name) return i;
  throw Error("unknown label '" + std::string(name) + "'");
}

inline int color_id(std::string_view name) {
  for (int i = 0; i < kNumColors; ++i)
    if (kPalette[i].name == name) return i;
  throw Error("unknown color '" + std::string(name) + "'");
}

inline std::string caption(int label, int color, PromptStyle style) {
  std::string out = "a ";
  if (style == PromptStyle::ColorLabel) out += std::string(kPalette.at(color).name) + " ";
  return out + std::string(kLabels.at(label));
}

}  // namespace soekit

#endif  // SOEKIT_VOCAB_HPP
