// SPDX-License-Identifier: Apache-2.0
//
// Weight archives: a flat list of named tensors.
//
//   magic   "SSNASW01"                      8 bytes
//   count   u32
//   entry*  u32 name_len | name bytes | u32 ndim | u64 dim[ndim] | f32 data[numel]
//
// All integers and floats little-endian. Names are hierarchical paths such
// as "cells.0.edges.0_2.sep_conv_3x3.dw.weight".
#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ssnas/network.hpp"

namespace ssnas {

using NamedTensors = std::map<std::string, Tensor<float>>;

inline constexpr char kArchiveMagic[8] = {'S', 'S', 'N', 'A', 'S', 'W', '0', '1'};

namespace detail {
template <class U>
void put_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& is, std::uint64_t& offset) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U)))
    throw FormatError(offset, "weight archive: unexpected end of file at byte " + std::to_string(offset));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  offset += sizeof(U);
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}
}  // namespace detail

inline void write_archive(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("weight archive: cannot write " + path.string());
  os.write(kArchiveMagic, 8);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    for (float v : t.values()) detail::put_le<float>(os, v);
  }
  if (!os) throw DataError("weight archive: write failed for " + path.string());
}

inline NamedTensors read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("weight archive: cannot open " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kArchiveMagic, 8) != 0)
    throw FormatError(0, "weight archive: bad magic in " + path.string());
  std::uint64_t off = 8;
  const auto count = detail::get_le<std::uint32_t>(is, off);
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint32_t>(is, off);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError(off, "weight archive: truncated name");
    off += len;
    const auto ndim = detail::get_le<std::uint32_t>(is, off);
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(static_cast<Index>(detail::get_le<std::uint64_t>(is, off)));
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = detail::get_le<float>(is, off);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

/// Parameters and buffers of a module tree (supernet or network), cast to f32.
template <class T, class Model>
NamedTensors collect_state(Model& model) {
  NamedTensors out;
  StateVisitor<T> v;
  v.param = [&](const std::string& n, Var<T>& p) { out[n] = p.value().template cast<float>(); };
  v.buffer = [&](const std::string& n, Tensor<T>& b) { out[n] = b.template cast<float>(); };
  model.visit(v);
  return out;
}

/// Supernet weights plus the architecture matrices "arch.normal"/"arch.reduce".
template <class T>
NamedTensors collect_supernet_state(Supernet<T>& net) {
  NamedTensors out = collect_state<T>(net);
  out["arch.normal"] = net.arch().matrix(false).template cast<float>();
  out["arch.reduce"] = net.arch().matrix(true).template cast<float>();
  return out;
}

/// Loads every parameter/buffer the model has from `src`. Extra archive
/// entries are ignored; a missing entry throws unless allow_missing.
template <class T, class Model>
std::size_t load_state(Model& model, const NamedTensors& src, bool allow_missing = false) {
  std::size_t loaded = 0;
  auto fetch = [&](const std::string& name, Tensor<T>& dst) {
    const auto it = src.find(name);
    if (it == src.end()) {
      if (allow_missing) return;
      throw StructuralError("weight archive has no entry '" + name + "'");
    }
    if (it->second.shape() != dst.shape())
      throw StructuralError("weight archive entry '" + name + "' has shape " + shape_str(it->second.shape()) +
                            ", model expects " + shape_str(dst.shape()));
    dst = it->second.template cast<T>();
    ++loaded;
  };
  StateVisitor<T> v;
  v.param = [&](const std::string& n, Var<T>& p) { fetch(n, p.mutable_value()); };
  v.buffer = fetch;
  model.visit(v);
  return loaded;
}

template <class T>
void load_supernet_state(Supernet<T>& net, const NamedTensors& src) {
  load_state<T>(net, src);
  for (bool red : {false, true}) {
    const auto it = src.find(red ? "arch.reduce" : "arch.normal");
    if (it == src.end()) throw StructuralError("weight archive has no architecture matrices");
    net.arch().set_matrix(red, it->second.template cast<T>());
  }
}

}  // namespace ssnas
