#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "advclr/model.hpp"

namespace advclr {

/// Checkpoint layout, all integers and floats little-endian:
///
///   magic           8 bytes  "ADVCLRCK"
///   version         u32      kCheckpointVersion
///   encoder kind    u32      0 = toy_conv, 1 = resnet_small
///   width count     u32      followed by that many u32 widths
///   embedding_dim   u32
///   depth           u32
///   in_channels     u32
///   image_size      u32
///   num_classes     u32
///   projection_dim  u32
///   seed            u64
///   array count     u32
///   per array:
///     name length   u32, then UTF-8 name bytes
///     scope         u8       0 = encoder, 1 = projection, 2 = classifier
///     flags         u8       bit 0 frozen, bit 1 running-statistics buffer
///     rank          u32, then rank u32 dims
///     data          f32 x product(dims)
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'A', 'D', 'V', 'C', 'L', 'R', 'C', 'K'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}

  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> checkpoint_bytes(const ModelParams<float>& p) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(p.spec.kind));
  w.u32(static_cast<std::uint32_t>(p.spec.widths.size()));
  for (auto x : p.spec.widths) w.u32(static_cast<std::uint32_t>(x));
  w.u32(static_cast<std::uint32_t>(p.spec.embedding_dim));
  w.u32(static_cast<std::uint32_t>(p.spec.depth));
  w.u32(static_cast<std::uint32_t>(p.spec.in_channels));
  w.u32(static_cast<std::uint32_t>(p.spec.image_size));
  w.u32(static_cast<std::uint32_t>(p.num_classes));
  w.u32(static_cast<std::uint32_t>(p.projection_dim));
  w.u64(p.seed);
  w.u32(static_cast<std::uint32_t>(p.entries.size()));
  for (const auto& e : p.entries) {
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u8(static_cast<std::uint8_t>(e.scope));
    w.u8(static_cast<std::uint8_t>((e.frozen ? 1 : 0) | (e.buffer ? 2 : 0)));
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.value.data()) w.f32(v);
  }
  return std::move(w.buffer());
}

inline ModelParams<float> checkpoint_from_bytes(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (r.str(8) != std::string(kCheckpointMagic, 8)) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelParams<float> p;
  const auto kind = r.u32();
  if (kind > 1) throw CheckpointError("unknown encoder kind " + std::to_string(kind));
  p.spec.kind = static_cast<EncoderKind>(kind);
  p.spec.widths.resize(r.u32());
  for (auto& x : p.spec.widths) x = r.u32();
  p.spec.embedding_dim = r.u32();
  p.spec.depth = r.u32();
  p.spec.in_channels = r.u32();
  p.spec.image_size = r.u32();
  p.num_classes = r.u32();
  p.projection_dim = r.u32();
  p.seed = r.u64();
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    Parameter<float> e;
    e.name = r.str(r.u32());
    const auto scope = r.u8();
    if (scope > 2) throw CheckpointError("array '" + e.name + "' has unknown scope");
    e.scope = static_cast<Scope>(scope);
    const auto flags = r.u8();
    e.frozen = flags & 1;
    e.buffer = flags & 2;
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    std::vector<float> data(shape_numel(shape));
    for (auto& v : data) v = r.f32();
    e.value = TensorF(std::move(shape), std::move(data));
    p.entries.push_back(std::move(e));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint arrays");
  p.spec.validate();
  return p;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& p) {
  const auto bytes = checkpoint_bytes(p);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

inline ModelParams<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

/// FNV-1a over the raw bits of every array in `scope`, buffers included.
template <class T>
std::uint64_t params_digest(const ModelParams<T>& p, Scope scope) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& e : p.entries) {
    if (e.scope != scope) continue;
    mix(e.name.data(), e.name.size());
    mix(e.value.ptr(), e.value.size() * sizeof(T));
  }
  return h;
}

}  // namespace advclr
