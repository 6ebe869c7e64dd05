#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "dera/errors.hpp"

namespace dera {

/// Code indices of one clip: appearance block first, motion block after.
class TokenSequence {
 public:
  TokenSequence() = default;
  TokenSequence(std::size_t appearance, std::size_t motion, std::vector<std::size_t> indices)
      : appearance_(appearance), motion_(motion), indices_(std::move(indices)) {
    if (indices_.size() != appearance_ + motion_) {
      throw ValidationError("token sequence of length " + std::to_string(indices_.size()) + " does not match layout " +
                            std::to_string(appearance_) + "+" + std::to_string(motion_));
    }
  }

  std::size_t appearance_length() const noexcept { return appearance_; }
  std::size_t motion_length() const noexcept { return motion_; }
  std::size_t size() const noexcept { return indices_.size(); }
  const std::vector<std::size_t>& indices() const noexcept { return indices_; }
  std::size_t operator[](std::size_t i) const { return indices_.at(i); }

  void check_range(std::size_t vocab) const {
    for (auto i : indices_)
      if (i >= vocab) throw ValidationError("token id " + std::to_string(i) + " >= " + std::to_string(vocab));
  }

  bool operator==(const TokenSequence&) const = default;

 private:
  friend std::pair<TokenSequence, TokenSequence> swap_blocks(TokenSequence, TokenSequence, bool);
  std::size_t appearance_ = 0, motion_ = 0;
  std::vector<std::size_t> indices_;
};

enum class TokenBlock { kAppearance, kMotion };

inline std::pair<TokenSequence, TokenSequence> swap_blocks(TokenSequence x, TokenSequence y, bool appearance) {
  if (x.appearance_ != y.appearance_ || x.motion_ != y.motion_) {
    throw ValidationError("cannot swap tokens between layouts " + std::to_string(x.appearance_) + "+" +
                          std::to_string(x.motion_) + " and " + std::to_string(y.appearance_) + "+" +
                          std::to_string(y.motion_));
  }
  const auto first = appearance ? 0 : x.appearance_;
  const auto last = appearance ? x.appearance_ : x.size();
  std::swap_ranges(x.indices_.begin() + first, x.indices_.begin() + last, y.indices_.begin() + first);
  return {std::move(x), std::move(y)};
}

/// Exchanges the appearance or motion block of two sequences.
inline std::pair<TokenSequence, TokenSequence> swap_tokens(const TokenSequence& x, const TokenSequence& y,
                                                           TokenBlock which) {
  return swap_blocks(x, y, which == TokenBlock::kAppearance);
}

}  // namespace dera
