// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "convstyle/param_store.hpp"

namespace convstyle {

// Layout: 8-byte magic, u32 LE header length, UTF-8 JSON header, then the
// tensors as little-endian IEEE-754 doubles at the offsets the header lists
// (relative to the end of the header).
inline constexpr std::array<char, 8> kCheckpointMagic{'C', 'V', 'S', 'T', 'Y', 'L', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int format_version = kCheckpointVersion;
  nlohmann::json config;  // flat dotted-key config echo
  ParamStore params;
};

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64_le(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_le(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json dir = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, e] : ck.params) {
    dir.push_back({{"name", name}, {"shape", e.value.shape()}, {"offset", offset}});
    offset += e.value.size() * sizeof(double);
  }
  const nlohmann::json header{{"format_version", ck.format_version}, {"config", ck.config}, {"tensors", dir}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32_le(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  for (const auto& [_, e] : ck.params)
    for (double v : e.value.data()) detail::put_f64_le(out, v);
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin()))
    throw ValidationError("not a checkpoint file (bad magic)");
  const auto hlen = static_cast<std::size_t>(detail::get_le(bytes, 8, 4));
  if (12 + hlen > bytes.size()) throw ValidationError("checkpoint header is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, hlen));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Checkpoint ck;
  try {
    ck.format_version = header.at("format_version").get<int>();
    if (ck.format_version != kCheckpointVersion)
      throw ValidationError("unsupported checkpoint version " + std::to_string(ck.format_version));
    ck.config = header.at("config");
    const std::size_t data = 12 + hlen;
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      Tensor value(shape);
      if (data + offset + value.size() * 8 > bytes.size())
        throw ValidationError("checkpoint tensor '" + name + "' runs past end of file");
      for (std::size_t i = 0; i < value.size(); ++i) {
        const std::uint64_t bits = detail::get_le(bytes, data + offset + 8 * i, 8);
        std::memcpy(&value[i], &bits, sizeof bits);
      }
      ck.params.add(name, std::move(value));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint header: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  const std::string bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

/// Every parameter the model expects must be present with the same shape,
/// and nothing else.
inline void check_inventory(const ParamStore& expected, const ParamStore& actual) {
  for (const auto& [name, e] : expected) {
    if (!actual.contains(name)) throw ConfigError("checkpoint lacks parameter '" + name + "'");
    if (actual.value(name).shape() != e.value.shape())
      throw ConfigError("checkpoint parameter '" + name + "' has shape " + shape_str(actual.value(name).shape()) +
                        ", model expects " + shape_str(e.value.shape()));
  }
  for (const auto& [name, _] : actual)
    if (!expected.contains(name)) throw ConfigError("checkpoint has unexpected parameter '" + name + "'");
}

}  // namespace convstyle
