#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cpath/errors.hpp"
#include "cpath/hash.hpp"
#include "cpath/tensor.hpp"

namespace cpath {

// Versioned binary container: magic, version, element dtype, a text meta
// block (key=value lines echoing the producing config), then named parameter
// blobs. Little-endian throughout. Published encoder checkpoints use 32-bit
// floats; training-state checkpoints may select 64-bit so an interrupted run
// resumes bit-exactly.

struct CheckpointBlob {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

struct Checkpoint {
  std::uint32_t version = 1;
  bool f64 = false;
  std::string meta;
  std::vector<CheckpointBlob> blobs;

  const CheckpointBlob& blob(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return b;
    throw Error("checkpoint has no blob '" + name + "'");
  }
  bool has_blob(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return true;
    return false;
  }
};

namespace detail {

template <class T>
void write_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));  // host is little-endian x86
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!in) throw IoError("checkpoint truncated");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write("CPCK", 4);
  detail::write_le<std::uint32_t>(out, ck.version);
  detail::write_le<std::uint8_t>(out, ck.f64 ? 1 : 0);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.meta.size()));
  out.write(ck.meta.data(), static_cast<std::streamsize>(ck.meta.size()));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.blobs.size()));
  for (const auto& b : ck.blobs) {
    detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(b.name.size()));
    out.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
    detail::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(b.shape.size()));
    for (int d : b.shape) detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    if (ck.f64) {
      for (double v : b.data) detail::write_le<double>(out, v);
    } else {
      for (double v : b.data) detail::write_le<float>(out, static_cast<float>(v));
    }
  }
  if (!out) throw IoError("write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "CPCK") throw IoError("not a checkpoint: " + path);
  Checkpoint ck;
  ck.version = detail::read_le<std::uint32_t>(in);
  if (ck.version != 1) throw IoError("unsupported checkpoint version");
  ck.f64 = detail::read_le<std::uint8_t>(in) != 0;
  const auto meta_len = detail::read_le<std::uint32_t>(in);
  ck.meta.resize(meta_len);
  in.read(ck.meta.data(), meta_len);
  const auto n = detail::read_le<std::uint32_t>(in);
  ck.blobs.resize(n);
  for (auto& b : ck.blobs) {
    const auto name_len = detail::read_le<std::uint16_t>(in);
    b.name.resize(name_len);
    in.read(b.name.data(), name_len);
    const int rank = detail::read_le<std::uint8_t>(in);
    b.shape.resize(static_cast<std::size_t>(rank));
    std::size_t numel = 1;
    for (auto& d : b.shape) {
      d = static_cast<int>(detail::read_le<std::uint32_t>(in));
      numel *= static_cast<std::size_t>(d);
    }
    b.data.resize(numel);
    for (auto& v : b.data)
      v = ck.f64 ? detail::read_le<double>(in) : static_cast<double>(detail::read_le<float>(in));
  }
  if (!in) throw IoError("checkpoint truncated: " + path);
  return ck;
}

/// Content identity of a checkpoint file, recorded in feature stores and
/// cache keys.
inline std::string checkpoint_hash(const std::string& path) { return hex64(hash_file(path)); }

}  // namespace cpath
