#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "esknet/kv.hpp"
#include "esknet/network.hpp"

namespace esknet {

// Checkpoint file layout (all integers little-endian):
//
//   "ESKN"                       4-byte magic
//   u32 format_version           currently 1
//   u32 spec_len, spec bytes     network spec as "net.key = value" lines
//   u64 epoch, u64 seed
//   u64 optimizer_step           0 when no optimizer state is stored
//   u32 tensor_count
//   per tensor:
//     u32 name_len, name bytes
//     u32 kind                   0 parameter, 1 buffer, 2 adam first moment, 3 adam second moment
//     u32 rank, u32 dims[rank]
//     f32 values[prod(dims)]     IEEE-754 binary32, little-endian

inline constexpr char kCheckpointMagic[4] = {'E', 'S', 'K', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class BlobKind : std::uint32_t { parameter = 0, buffer = 1, adam_m = 2, adam_v = 3 };

struct NamedBlob {
  std::string name;
  BlobKind kind = BlobKind::parameter;
  Shape shape;
  std::vector<float> values;

  bool operator==(const NamedBlob&) const = default;
};

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  NetworkSpec spec;
  std::uint64_t epoch = 0;
  std::uint64_t seed = 0;
  std::uint64_t optimizer_step = 0;
  std::vector<NamedBlob> blobs;

  bool operator==(const Checkpoint&) const = default;
};

inline KeyValues spec_to_kv(const NetworkSpec& s) {
  KeyValues kv;
  kv.set("net.input_h", std::to_string(s.input_h));
  kv.set("net.input_w", std::to_string(s.input_w));
  kv.set("net.base_channels", std::to_string(s.base_channels));
  kv.set("net.widths", KeyValues::join(s.widths));
  kv.set("net.block", to_string(s.block));
  kv.set("net.deep_supervision", s.deep_supervision ? "true" : "false");
  kv.set("net.supervision_factors", KeyValues::join(s.supervision_factors));
  kv.set("net.reduction_dim", std::to_string(s.reduction_dim));
  kv.set("net.dilation", std::to_string(s.dilation));
  return kv;
}

inline NetworkSpec spec_from_kv(const KeyValues& kv, NetworkSpec s = {}) {
  s.input_h = kv.get_number<std::size_t>("net.input_h", s.input_h);
  s.input_w = kv.get_number<std::size_t>("net.input_w", s.input_w);
  if (kv.has("net.input_size")) s.input_h = s.input_w = kv.get_number<std::size_t>("net.input_size", s.input_h);
  s.base_channels = kv.get_number<std::size_t>("net.base_channels", s.base_channels);
  s.widths = kv.get_list<std::size_t>("net.widths", s.widths);
  s.block = parse_block_kind(kv.get_string("net.block", to_string(s.block)));
  s.deep_supervision = kv.get_bool("net.deep_supervision", s.deep_supervision);
  s.supervision_factors = kv.get_list<std::size_t>("net.supervision_factors", s.supervision_factors);
  s.reduction_dim = kv.get_number<std::size_t>("net.reduction_dim", s.reduction_dim);
  s.dilation = kv.get_number<std::size_t>("net.dilation", s.dilation);
  return s;
}

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { out_ += s; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& in) : in_(in) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw CheckpointError("checkpoint is truncated");
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.bytes(std::string(kCheckpointMagic, 4));
  w.u32(ck.format_version);
  const std::string spec = spec_to_kv(ck.spec).format();
  w.u32(static_cast<std::uint32_t>(spec.size()));
  w.bytes(spec);
  w.u64(ck.epoch);
  w.u64(ck.seed);
  w.u64(ck.optimizer_step);
  w.u32(static_cast<std::uint32_t>(ck.blobs.size()));
  for (const auto& b : ck.blobs) {
    w.u32(static_cast<std::uint32_t>(b.name.size()));
    w.bytes(b.name);
    w.u32(static_cast<std::uint32_t>(b.kind));
    w.u32(static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : b.values) w.f32(v);
  }
  return w.take();
}

inline Checkpoint deserialize(const std::string& bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
  Checkpoint ck;
  ck.format_version = r.u32();
  if (ck.format_version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(ck.format_version));
  }
  const std::uint32_t spec_len = r.u32();
  ck.spec = spec_from_kv(KeyValues::parse(r.bytes(spec_len)));
  ck.epoch = r.u64();
  ck.seed = r.u64();
  ck.optimizer_step = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedBlob b;
    b.name = r.bytes(r.u32());
    const std::uint32_t kind = r.u32();
    if (kind > 3) throw CheckpointError("unknown tensor kind in checkpoint");
    b.kind = static_cast<BlobKind>(kind);
    const std::uint32_t rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) b.shape.push_back(r.u32());
    b.values.resize(numel(b.shape));
    for (auto& v : b.values) v = r.f32();
    ck.blobs.push_back(std::move(b));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  const std::string bytes = serialize(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  std::ostringstream oss;
  oss << in.rdbuf();
  return deserialize(oss.str());
}

/// Copies parameter values and BN running statistics out of the network.
inline Checkpoint snapshot(NetworkParams<float>& net, std::uint64_t epoch = 0, std::uint64_t seed = 0) {
  Checkpoint ck;
  ck.spec = net.spec;
  ck.epoch = epoch;
  ck.seed = seed;
  auto add = [&](auto&& named, BlobKind kind) {
    for (auto& [name, t] : named)
      ck.blobs.push_back({name, kind, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  };
  add(net.named_parameters(), BlobKind::parameter);
  add(net.named_buffers(), BlobKind::buffer);
  return ck;
}

/// Writes checkpoint values into an already built network of the same spec.
inline void restore(NetworkParams<float>& net, const Checkpoint& ck) {
  if (!(net.spec == ck.spec)) throw CheckpointError("checkpoint network spec does not match the target network");
  std::map<std::string, const NamedBlob*> by_name;
  for (const auto& b : ck.blobs)
    if (b.kind == BlobKind::parameter || b.kind == BlobKind::buffer) by_name[b.name] = &b;
  auto fill = [&](auto&& named) {
    for (auto& [name, t] : named) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor " + name);
      if (it->second->shape != t.shape()) {
        throw CheckpointError("tensor " + name + " has shape " + to_string(it->second->shape) + " in checkpoint, " +
                              to_string(t.shape()) + " in network");
      }
      std::copy(it->second->values.begin(), it->second->values.end(), t.mutable_data().begin());
    }
  };
  fill(net.named_parameters());
  fill(net.named_buffers());
}

inline NetworkParams<float> instantiate(const Checkpoint& ck) {
  auto net = build<float>(ck.spec, 0);
  restore(net, ck);
  return net;
}

}  // namespace esknet
