// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tensor files: "BCKM" | u32 version | u32 rank | u32 dims[rank] | f32 data,
// all little-endian. A checkpoint is a directory of tensor files plus
// manifest.json mapping name -> file -> shape.

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "beamckm/nn.hpp"

namespace beamckm {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr std::array<char, 4> kTensorMagic{'B', 'C', 'K', 'M'};
inline constexpr std::uint32_t kTensorVersion = 1;

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

/// Raw file contents of one tensor.
struct TensorBlob {
  Shape shape;
  std::vector<float> data;
};

inline std::string encode_tensor(const Shape& shape, std::span<const float> data) {
  if (numel_of(shape) != data.size()) throw DimensionError("encode_tensor: shape/data mismatch");
  std::string buf(kTensorMagic.begin(), kTensorMagic.end());
  detail::put_u32(buf, kTensorVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) detail::put_u32(buf, static_cast<std::uint32_t>(d));
  buf.reserve(buf.size() + 4 * data.size());
  for (float f : data) detail::put_u32(buf, std::bit_cast<std::uint32_t>(f));
  return buf;
}

inline TensorBlob decode_tensor(const std::string& bytes, const std::string& what = "tensor") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || !std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin()))
    throw IoError(what + ": bad magic");
  if (detail::get_u32(p + 4) != kTensorVersion) throw IoError(what + ": unsupported version");
  const std::uint32_t rank = detail::get_u32(p + 8);
  std::size_t off = 12;
  if (bytes.size() < off + 4ull * rank) throw IoError(what + ": truncated header");
  TensorBlob blob;
  for (std::uint32_t i = 0; i < rank; ++i, off += 4) blob.shape.push_back(detail::get_u32(p + off));
  const std::size_t n = numel_of(blob.shape);
  if (bytes.size() != off + 4 * n) throw IoError(what + ": payload size does not match shape " + shape_str(blob.shape));
  blob.data.resize(n);
  for (std::size_t i = 0; i < n; ++i, off += 4) blob.data[i] = std::bit_cast<float>(detail::get_u32(p + off));
  return blob;
}

inline void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::string read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

inline void write_tensor_file(const fs::path& path, const Shape& shape, std::span<const float> data) {
  write_bytes(path, encode_tensor(shape, data));
}

template <class T>
void write_tensor_file(const fs::path& path, const Tensor<T>& t) {
  std::vector<float> f(t.vec().begin(), t.vec().end());
  write_tensor_file(path, t.shape(), f);
}

inline TensorBlob read_tensor_file(const fs::path& path) { return decode_tensor(read_bytes(path), path.string()); }

template <class T>
Tensor<T> load_tensor(const fs::path& path, bool requires_grad = false) {
  TensorBlob b = read_tensor_file(path);
  return Tensor<T>(b.shape, std::vector<T>(b.data.begin(), b.data.end()), requires_grad);
}

inline void write_json(const fs::path& path, const json& j) { write_bytes(path, j.dump(2) + "\n"); }

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_bytes(path));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline json shape_json(const Shape& s) { return json(std::vector<std::size_t>(s.begin(), s.end())); }

/// Writes every parameter as `<name>.bckm` and a manifest. `meta` is
/// merged into the manifest top level.
template <class T>
void save_checkpoint(const fs::path& dir, const ParamList<T>& params, const json& meta = json::object()) {
  fs::create_directories(dir);
  json manifest = meta;
  manifest["format"] = "BCKM";
  manifest["version"] = kTensorVersion;
  json entries = json::array();
  for (const auto& p : params) {
    const std::string file = p.name + ".bckm";
    write_tensor_file(dir / file, p.tensor);
    entries.push_back({{"name", p.name}, {"file", file}, {"shape", shape_json(p.tensor.shape())}});
  }
  manifest["tensors"] = entries;
  write_json(dir / "manifest.json", manifest);
}

inline json read_checkpoint_manifest(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw MissingDependencyError("no checkpoint at " + dir.string());
  return read_json(dir / "manifest.json");
}

/// Loads values into existing parameters by name, checking shapes.
template <class T>
json load_checkpoint(const fs::path& dir, ParamList<T>& params) {
  json manifest = read_checkpoint_manifest(dir);
  std::map<std::string, std::string> files;
  for (const auto& e : manifest.at("tensors")) files[e.at("name").get<std::string>()] = e.at("file").get<std::string>();
  for (auto& p : params) {
    auto it = files.find(p.name);
    if (it == files.end()) throw IoError("checkpoint " + dir.string() + " lacks tensor " + p.name);
    TensorBlob b = read_tensor_file(dir / it->second);
    if (b.shape != p.tensor.shape())
      throw DimensionError("checkpoint tensor " + p.name + " has shape " + shape_str(b.shape) + ", model expects " +
                           shape_str(p.tensor.shape()));
    auto dst = p.tensor.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(b.data[i]);
  }
  return manifest;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline std::string content_hash(const json& j) { return hex64(fnv1a(j.dump())); }

}  // namespace beamckm
