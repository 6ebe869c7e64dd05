#pragma once

// DERATOKS token list:
//   "DERATOKS" | u32 version=1 | u32 n_seq | u32 seq_len |
//   per sequence: u32 label (0xFFFFFFFF when absent), u32 ids[seq_len]

#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

#include "dera/binary_io.hpp"

namespace dera {

inline constexpr std::string_view kToksMagic{"DERATOKS", 8};
inline constexpr std::uint32_t kToksVersion = 1;
inline constexpr std::uint32_t kNoLabel = 0xFFFFFFFFu;

struct LabeledTokens {
  std::optional<std::uint32_t> label;
  std::vector<std::size_t> ids;
  bool operator==(const LabeledTokens&) const = default;
};

inline std::vector<std::uint8_t> encode_tokens(const std::vector<LabeledTokens>& seqs) {
  const std::size_t len = seqs.empty() ? 0 : seqs.front().ids.size();
  ByteWriter w;
  w.str(kToksMagic);
  w.u32(kToksVersion);
  w.u32(static_cast<std::uint32_t>(seqs.size()));
  w.u32(static_cast<std::uint32_t>(len));
  for (const auto& s : seqs) {
    if (s.ids.size() != len) throw ValidationError("token file sequences must share one length");
    if (s.label && *s.label == kNoLabel) throw ValidationError("label 0xFFFFFFFF is reserved");
    w.u32(s.label.value_or(kNoLabel));
    for (auto id : s.ids) {
      if (id >= kNoLabel) throw ValidationError("token id does not fit in 32 bits");
      w.u32(static_cast<std::uint32_t>(id));
    }
  }
  return w.buffer();
}

inline std::vector<LabeledTokens> decode_tokens(ByteReader r) {
  r.expect_magic(kToksMagic, "DERATOKS");
  const auto version_at = r.offset();
  if (r.u32("DERATOKS version") != kToksVersion) throw FormatError("unsupported DERATOKS version", version_at);
  const auto n = r.u32("DERATOKS count");
  const auto len_at = r.offset();
  const auto len = r.u32("DERATOKS length");
  if (static_cast<std::uint64_t>(n) * (len + 1ULL) * 4ULL > r.remaining()) {
    throw FormatError("DERATOKS body shorter than its header declares", len_at);
  }
  std::vector<LabeledTokens> out(n);
  for (auto& s : out) {
    const auto label = r.u32("DERATOKS label");
    if (label != kNoLabel) s.label = label;
    s.ids.resize(len);
    for (auto& id : s.ids) id = r.u32("DERATOKS id");
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after DERATOKS payload", r.offset());
  return out;
}

inline void save_tokens(const std::filesystem::path& path, const std::vector<LabeledTokens>& seqs) {
  ByteWriter w;
  const auto bytes = encode_tokens(seqs);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline std::vector<LabeledTokens> load_tokens(const std::filesystem::path& path) {
  return decode_tokens(ByteReader::from_file(path));
}

}  // namespace dera
