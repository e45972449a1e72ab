// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlos/tensor.hpp"

namespace nlos {

using MetaMap = std::map<std::string, std::string>;

inline constexpr char kTensorMagic[8] = {'N', 'L', 'T', 'E', 'N', 'S', '0', '1'};

namespace detail {

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("truncated tensor file: missing header length");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

static_assert(std::endian::native == std::endian::little,
              "tensor io assumes a little-endian host");

}  // namespace detail

/// Serialized JSON header for a tensor file; exposed so tests can
/// byte-count it against the on-disk length field.
inline std::string tensor_header_json(const std::vector<std::size_t>& dims, const MetaMap& meta) {
  nlohmann::json j;
  j["dims"] = dims;
  j["dtype"] = "f32";
  j["meta"] = meta;
  return j.dump();
}

/// Write a tensor as magic | u32 header length | JSON header | f32 LE payload.
inline void write_tensor(const std::filesystem::path& path, const Tensor& t,
                         const MetaMap& meta = {}) {
  if (t.dims().empty()) throw std::invalid_argument("cannot write tensor with empty dims");
  for (std::size_t d : t.dims())
    if (d >= (std::size_t{1} << 31)) throw std::invalid_argument("tensor extent overflows 2^31");
  if (!t.all_finite()) throw std::invalid_argument("cannot write non-finite tensor values");

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());

  const std::string header = tensor_header_json(t.dims(), meta);
  os.write(kTensorMagic, sizeof(kTensorMagic));
  detail::put_u32_le(os, static_cast<std::uint32_t>(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));

  std::vector<float> payload(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) payload[i] = static_cast<float>(t[i]);
  os.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

/// Inverse of write_tensor; validates magic, header and payload length.
inline std::pair<Tensor, MetaMap> read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path.string());

  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0)
    throw std::runtime_error("bad magic in tensor file: " + path.string());

  const std::uint32_t header_len = detail::get_u32_le(is);
  std::string header(header_len, '\0');
  is.read(header.data(), header_len);
  if (!is) throw std::runtime_error("truncated tensor file: short header");

  nlohmann::json j = nlohmann::json::parse(header, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error("malformed tensor header JSON");
  if (j.value("dtype", "") != std::string("f32"))
    throw std::runtime_error("unsupported tensor dtype");
  std::vector<std::size_t> dims = j.at("dims").get<std::vector<std::size_t>>();
  MetaMap meta;
  if (j.contains("meta")) meta = j.at("meta").get<MetaMap>();

  Tensor t(dims);
  std::vector<float> payload(t.size());
  is.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (static_cast<std::size_t>(is.gcount()) != payload.size() * sizeof(float))
    throw std::runtime_error("truncated tensor payload: " + path.string());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(payload[i]);
  return {std::move(t), std::move(meta)};
}

}  // namespace nlos
