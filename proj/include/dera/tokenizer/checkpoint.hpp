#pragma once

// DCKP checkpoint container:
//   "DERACKPT" | u32 version=1 | u32 json length | config JSON |
//   u32 tensor count | per tensor: u16 name length, name, u8 ndim,
//   u32 dims[ndim], f32 data
// Tensors are written in the order given; ParameterSet sources are sorted.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dera/binary_io.hpp"
#include "dera/diffcore/autograd.hpp"

namespace dera {

inline constexpr std::string_view kCkptMagic{"DERACKPT", 8};
inline constexpr std::uint32_t kCkptVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  std::string config_json;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  const NamedTensor& at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw ValidationError("checkpoint has no tensor '" + name + "'");
  }
  bool operator==(const Checkpoint&) const = default;
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.str(kCkptMagic);
  w.u32(kCkptVersion);
  w.u32(static_cast<std::uint32_t>(ck.config_json.size()));
  w.str(ck.config_json);
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    if (t.name.size() > 0xFFFF) throw ValidationError("tensor name too long: " + t.name.substr(0, 32) + "...");
    if (t.shape.size() > 0xFF) throw ValidationError("tensor '" + t.name + "' has too many dimensions");
    if (numel(t.shape) != t.data.size()) throw ContractError("tensor '" + t.name + "' data does not match its shape");
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.str(t.name);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(t.data);
  }
  return w.buffer();
}

inline Checkpoint decode_checkpoint(ByteReader r) {
  r.expect_magic(kCkptMagic, "DCKP");
  const auto version_at = r.offset();
  if (r.u32("DCKP version") != kCkptVersion) throw FormatError("unsupported DCKP version", version_at);
  Checkpoint ck;
  const auto json_len = r.u32("DCKP config length");
  ck.config_json = r.str(json_len, "DCKP config");
  const auto count = r.u32("DCKP tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.u16("DCKP name length"), "DCKP name");
    const auto ndim = r.u8("DCKP ndim");
    const auto dims_at = r.offset();
    std::uint64_t n = 1;
    for (std::uint8_t k = 0; k < ndim; ++k) {
      t.shape.push_back(r.u32("DCKP dims"));
      n *= t.shape.back();
      if (n > r.remaining() / 4) {
        throw FormatError("DCKP tensor '" + t.name + "' larger than the file", dims_at);
      }
    }
    t.data = r.f32s(n, "DCKP tensor data");
    ck.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after DCKP payload", r.offset());
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  ByteWriter w;
  const auto bytes = encode_checkpoint(ck);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(ByteReader::from_file(path));
}

/// Appends every parameter of `ps` (sorted by name) with an optional prefix.
template <class T>
void append_parameters(Checkpoint& ck, const ParameterSet<T>& ps, const std::string& prefix = "") {
  for (const auto& [name, p] : ps) {
    ck.tensors.push_back({prefix + name, p.value.shape(), std::vector<float>(p.value.data().begin(), p.value.data().end())});
  }
}

/// Overwrites parameter values in place; every parameter must be present
/// with a matching shape.
template <class T>
void restore_parameters(const Checkpoint& ck, ParameterSet<T>& ps, const std::string& prefix = "") {
  for (auto& [name, p] : ps) {
    const auto& t = ck.at(prefix + name);
    if (t.shape != p.value.shape()) {
      throw ValidationError("checkpoint tensor '" + t.name + "' has shape " + shape_str(t.shape) + ", model expects " +
                            shape_str(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    std::copy(t.data.begin(), t.data.end(), dst.begin());
  }
}

}  // namespace dera
