// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef SOEKIT_CHECKPOINT_HPP
#define SOEKIT_CHECKPOINT_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "soekit/optim.hpp"
#include "soekit/tensor.hpp"

namespace soekit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

/// Named float32 arrays plus a JSON header, in insertion order.
///
/// File layout: "SOEK", u32 version, u32 count; per array u16 name length,
/// name bytes, u8 dtype (0 = f32), u8 ndim, u32 dims[ndim], payload; then a
/// u32-length-prefixed JSON blob. All integers little-endian.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  struct Array {
    Shape shape;
    std::vector<float> data;
  };

  nlohmann::ordered_json meta = nlohmann::ordered_json::object();

  void put(const std::string& name, Shape shape, std::vector<float> data) {
    if (name.empty() || name.size() > 0xffff) throw Error("checkpoint: bad array name '" + name + "'");
    if (numel(shape) != data.size()) throw ShapeError("checkpoint: '" + name + "' shape/data mismatch");
    auto it = index_.find(name);
    if (it != index_.end()) {
      arrays_[it->second].second = {std::move(shape), std::move(data)};
      return;
    }
    index_[name] = arrays_.size();
    arrays_.emplace_back(name, Array{std::move(shape), std::move(data)});
  }
  void put(const std::string& name, const Tensor& t) { put(name, t.shape(), t.vec()); }
  void put_all(const NamedTensors<float>& ts) {
    for (const auto& [name, t] : ts) put(name, t);
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const Array& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("checkpoint: missing array '" + name + "'");
    return arrays_[it->second].second;
  }
  const std::vector<std::pair<std::string, Array>>& arrays() const { return arrays_; }

  /// Copies stored values into `dst`, checking every name and shape.
  void restore(NamedTensors<float>& dst) const {
    for (auto& [name, t] : dst) {
      const auto& a = get(name);
      if (a.shape != t.shape())
        throw Error("checkpoint: '" + name + "' has shape " + to_string(a.shape) + ", model expects " +
                    to_string(t.shape()));
      std::copy(a.data.begin(), a.data.end(), t.data().begin());
    }
  }
  void restore(const NamedTensors<float>& dst) const {
    auto copy = dst;
    restore(copy);
  }

  std::vector<char> serialize() const {
    std::vector<char> out;
    auto put_bytes = [&](const void* p, std::size_t n) {
      out.insert(out.end(), static_cast<const char*>(p), static_cast<const char*>(p) + n);
    };
    auto put_u32 = [&](std::uint32_t v) { put_bytes(&v, 4); };
    put_bytes("SOEK", 4);
    put_u32(kVersion);
    put_u32(static_cast<std::uint32_t>(arrays_.size()));
    for (const auto& [name, a] : arrays_) {
      const auto len = static_cast<std::uint16_t>(name.size());
      put_bytes(&len, 2);
      put_bytes(name.data(), name.size());
      const std::uint8_t dtype = 0, ndim = static_cast<std::uint8_t>(a.shape.size());
      put_bytes(&dtype, 1);
      put_bytes(&ndim, 1);
      for (auto d : a.shape) put_u32(static_cast<std::uint32_t>(d));
      put_bytes(a.data.data(), a.data.size() * sizeof(float));
    }
    const std::string js = meta.dump();
    put_u32(static_cast<std::uint32_t>(js.size()));
    put_bytes(js.data(), js.size());
    return out;
  }

  static Checkpoint deserialize(const std::vector<char>& buf, const std::string& origin = "<memory>") {
    std::size_t pos = 0;
    auto take = [&](void* dst, std::size_t n) {
      if (pos + n > buf.size()) throw Error("checkpoint " + origin + ": truncated");
      std::memcpy(dst, buf.data() + pos, n);
      pos += n;
    };
    auto u32 = [&]() {
      std::uint32_t v;
      take(&v, 4);
      return v;
    };
    char magic[4];
    take(magic, 4);
    if (std::memcmp(magic, "SOEK", 4) != 0) throw Error("checkpoint " + origin + ": bad magic");
    const auto version = u32();
    if (version != kVersion) throw Error("checkpoint " + origin + ": unsupported version " + std::to_string(version));
    Checkpoint ck;
    const auto count = u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      std::uint16_t len;
      take(&len, 2);
      std::string name(len, '\0');
      take(name.data(), len);
      std::uint8_t dtype, ndim;
      take(&dtype, 1);
      take(&ndim, 1);
      if (dtype != 0) throw Error("checkpoint " + origin + ": array '" + name + "' has unknown dtype");
      Shape shape(ndim);
      for (auto& d : shape) d = u32();
      std::vector<float> data(numel(shape));
      take(data.data(), data.size() * sizeof(float));
      ck.put(name, std::move(shape), std::move(data));
    }
    const auto jlen = u32();
    std::string js(jlen, '\0');
    take(js.data(), jlen);
    if (pos != buf.size()) throw Error("checkpoint " + origin + ": trailing bytes");
    try {
      ck.meta = nlohmann::ordered_json::parse(js);
    } catch (const std::exception& e) {
      throw Error("checkpoint " + origin + ": bad JSON header: " + e.what());
    }
    return ck;
  }

  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write on checkpoint " + path.string());
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint not found: " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(buf, path.string());
  }

 private:
  std::vector<std::pair<std::string, Array>> arrays_;
  std::map<std::string, std::size_t> index_;
};

/// Adam moments as adam.m.<param> / adam.v.<param>, step as adam.step.
inline void save_adam(Checkpoint& ck, const Adam<float>& opt) {
  const auto& ps = opt.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    ck.put("adam.m." + ps[i].first, ps[i].second.shape(), opt.first_moments()[i]);
    ck.put("adam.v." + ps[i].first, ps[i].second.shape(), opt.second_moments()[i]);
  }
  ck.put("adam.step", {1}, {static_cast<float>(opt.step_count())});
}

inline void load_adam(const Checkpoint& ck, Adam<float>& opt) {
  const auto& ps = opt.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    opt.first_moments()[i] = ck.get("adam.m." + ps[i].first).data;
    opt.second_moments()[i] = ck.get("adam.v." + ps[i].first).data;
  }
  opt.set_step_count(static_cast<long>(ck.get("adam.step").data.at(0)));
}

}  // namespace soekit

#endif  // SOEKIT_CHECKPOINT_HPP
