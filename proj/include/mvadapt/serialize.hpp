#pragma once

// Checkpoints: `params.bin` is a flat little-endian float32 stream and
// `manifest.json` maps each parameter name to its element offset and shape,
// next to a free-form "config" object.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mvadapt/error.hpp"
#include "mvadapt/layers.hpp"
#include "json.hpp"

namespace mvadapt {

inline constexpr const char* kParamsFile = "params.bin";
inline constexpr const char* kManifestFile = "manifest.json";

namespace detail {

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  os.write(reinterpret_cast<const char*>(&bits), 4);
}

inline float get_f32(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

template <class T>
void save_parameters(const std::filesystem::path& dir, const ParamList<T>& params, const nlohmann::json& config) {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir / kParamsFile, std::ios::binary);
  if (!bin) throw Error("cannot write " + (dir / kParamsFile).string());
  nlohmann::json manifest;
  manifest["format"] = "float32le";
  manifest["config"] = config;
  auto& entries = manifest["params"] = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& p : params) {
    if (entries.contains(p.name)) throw Error("save_parameters: duplicate name " + p.name);
    entries[p.name] = {{"offset", offset}, {"shape", p.tensor.shape()}};
    for (T v : p.tensor.data()) detail::put_f32(bin, static_cast<float>(v));
    offset += p.tensor.numel();
  }
  manifest["total"] = offset;
  std::ofstream(dir / kManifestFile) << manifest.dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestFile);
  if (!in) throw ParseError((dir / kManifestFile).string(), 0, "cannot open checkpoint manifest");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((dir / kManifestFile).string(), 0, e.what());
  }
}

// Overwrites every tensor in `params` from the checkpoint; names and shapes must match.
template <class T>
void load_parameters(const std::filesystem::path& dir, const ParamList<T>& params) {
  const auto manifest = read_manifest(dir);
  std::ifstream bin(dir / kParamsFile, std::ios::binary);
  if (!bin) throw ParseError((dir / kParamsFile).string(), 0, "cannot open parameter stream");
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  const auto& entries = manifest.at("params");
  for (const auto& p : params) {
    if (!entries.contains(p.name)) throw ParseError(kManifestFile, 0, "missing parameter " + p.name);
    const auto& e = entries.at(p.name);
    const auto shape = e.at("shape").template get<Shape>();
    if (shape != p.tensor.shape()) throw ShapeError("load " + p.name, shape, p.tensor.shape());
    const auto offset = e.at("offset").template get<std::size_t>();
    if ((offset + p.tensor.numel()) * 4 > bytes.size()) throw ParseError(kParamsFile, 0, "truncated data for " + p.name);
    auto dst = Tensor<T>(p.tensor).mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(detail::get_f32(bytes.data() + (offset + i) * 4));
  }
}

// FNV-1a over names and raw values; detects any bit change in a parameter set.
template <class T>
std::uint64_t parameter_digest(const ParamList<T>& params) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001B3ull;
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    mix(p.tensor.data().data(), p.tensor.numel() * sizeof(T));
  }
  return h;
}

}  // namespace mvadapt
