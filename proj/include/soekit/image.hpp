// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_IMAGE_HPP
#define SOEKIT_IMAGE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "soekit/ops.hpp"

namespace soekit {

/// Axis-aligned box in integer pixels: columns [x, x+w), rows [y, y+h).
struct BBox {
  int x = 0, y = 0, w = 0, h = 0;

  bool operator==(const BBox&) const = default;
  long area() const { return static_cast<long>(w) * h; }
  bool inside(int width, int height) const { return x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= width && y + h <= height; }
  std::string str() const {
    return std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(w) + "," + std::to_string(h);
  }
};

/// RGB image, planar (3,H,W), values in [0,1].
struct Image {
  std::size_t height = 0, width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.f) : height(h), width(w), data(3 * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

inline float quantize8(float v) { return static_cast<float>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f)) / 255.f; }

// `comment` (single line) goes into the header, where readers skip it.
inline void write_ppm(const std::filesystem::path& path, const Image& img, const std::string& comment = "") {
  if (comment.find('\n') != std::string::npos) throw Error("write_ppm: comment must be a single line");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write image " + path.string());
  out << "P6\n";
  if (!comment.empty()) out << "# " << comment << "\n";
  out << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> buf(3 * img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        buf[(y * img.width + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(std::clamp(img.at(c, y, x), 0.f, 1.f) * 255.f));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("short write on " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("missing image file " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        t += c;
        break;
      }
    }
    while (in.get(c) && !std::isspace(static_cast<unsigned char>(c))) t += c;
    return t;
  };
  if (token() != "P6") throw Error("not a binary PPM (P6): " + path.string());
  std::size_t w = 0, h = 0;
  int maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw Error("malformed PPM header in " + path.string());
  }
  if (maxval != 255 || w == 0 || h == 0) throw Error("unsupported PPM (need maxval 255): " + path.string());
  std::vector<unsigned char> buf(3 * w * h);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw Error("truncated PPM " + path.string());
  Image img(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = buf[(y * w + x) * 3 + c] / 255.f;
  return img;
}

/// Stacks images into (N,3,H,W).
inline Tensor image_batch(const std::vector<const Image*>& imgs) {
  if (imgs.empty()) throw Error("image_batch: empty batch");
  const std::size_t H = imgs[0]->height, W = imgs[0]->width;
  std::vector<float> v;
  v.reserve(imgs.size() * 3 * H * W);
  for (const auto* im : imgs) {
    if (im->height != H || im->width != W) throw ShapeError("image_batch: mixed image sizes");
    v.insert(v.end(), im->data.begin(), im->data.end());
  }
  return Tensor({imgs.size(), 3, H, W}, std::move(v));
}

inline Tensor image_tensor(const Image& img) { return image_batch({&img}); }

inline Image tensor_image(const Tensor& t, std::size_t n = 0) {
  if (t.ndim() != 4 || t.dim(1) != 3) throw ShapeError("tensor_image: expected (N,3,H,W), got " + to_string(t.shape()));
  Image img(t.dim(2), t.dim(3));
  const auto plane = img.data.size();
  std::copy_n(t.data().begin() + n * plane, plane, img.data.begin());
  return img;
}

/// Binary mask (N,1,H,W), one box per sample.
inline Tensor bbox_masks(const std::vector<BBox>& boxes, std::size_t H, std::size_t W) {
  std::vector<float> v(boxes.size() * H * W, 0.f);
  for (std::size_t n = 0; n < boxes.size(); ++n) {
    const auto& b = boxes[n];
    if (!b.inside(static_cast<int>(W), static_cast<int>(H)))
      throw Error("bbox " + b.str() + " outside " + std::to_string(W) + "x" + std::to_string(H) + " image");
    for (int y = b.y; y < b.y + b.h; ++y)
      for (int x = b.x; x < b.x + b.w; ++x) v[(n * H + y) * W + x] = 1.f;
  }
  return Tensor({boxes.size(), 1, H, W}, std::move(v));
}

/// Tight box around the nonzero entries of sample n of a (N,1,H,W) mask.
template <typename T>
BBox mask_bbox(const BasicTensor<T>& mask, std::size_t n = 0) {
  const std::size_t H = mask.dim(2), W = mask.dim(3);
  int x0 = static_cast<int>(W), y0 = static_cast<int>(H), x1 = -1, y1 = -1;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      if (mask[(n * H + y) * W + x] != T(0)) {
        x0 = std::min(x0, static_cast<int>(x));
        x1 = std::max(x1, static_cast<int>(x));
        y0 = std::min(y0, static_cast<int>(y));
        y1 = std::max(y1, static_cast<int>(y));
      }
  if (x1 < 0) return {};
  return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

}  // namespace soekit

#endif  // SOEKIT_IMAGE_HPP
