// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nadir/common.hpp"

namespace nadir {

// Character-level vocabulary over Unicode scalar values. Ids are dense:
// PAD=0, UNK=1, EOS=2, then corpus characters in order of first appearance.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::size_t kNumSpecials = 3;

  Vocab() = default;

  std::int32_t add_char(char32_t c);  // returns existing id if present
  std::int32_t id_of(char32_t c) const;  // kUnk if unseen
  std::size_t size() const { return id_to_char_.size() + kNumSpecials; }

  // characters for ids >= 3, in id order (serialization form)
  const std::vector<char32_t>& chars() const { return id_to_char_; }
  static Vocab from_chars(const std::vector<char32_t>& chars);

  bool operator==(const Vocab& other) const { return id_to_char_ == other.id_to_char_; }

 private:
  std::unordered_map<char32_t, std::int32_t> char_to_id_;
  std::vector<char32_t> id_to_char_;
};

// Deterministic vocabularies from a pair corpus: specials first, then
// characters by first appearance (sources and targets separately).
std::pair<Vocab, Vocab> build_vocab(
    const std::vector<std::pair<std::string, std::string>>& corpus);

// Encode to a fixed-length id row; throws LengthExceeded when the word
// (plus EOS, if requested) does not fit.
std::vector<std::int32_t> encode(const std::string& word, const Vocab& vocab,
                                 std::size_t max_len, bool append_eos);

// Concatenation of characters strictly before the first EOS; PAD renders as
// nothing and UNK as U+FFFD. terminated=false when no EOS is present.
std::pair<std::string, bool> decode_until_eos(const std::vector<std::int32_t>& ids,
                                              const Vocab& vocab);

// One padded mini-batch. Every target row carries exactly one EOS at index
// tgt_lengths[b], followed only by PAD.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> src_ids;       // [B, T]
  std::vector<std::int32_t> tgt_ids;       // [B, T]
  std::vector<std::uint8_t> src_pad_mask;  // [B, T], true where src is PAD
  std::vector<std::size_t> tgt_lengths;    // EOS index per row

  bool has_targets = false;
};

// Build a batch from raw pairs. seq_len is the smallest length that fits
// every row unless fixed_len is given. Pairs must already fit max_len.
Batch make_batch(const std::vector<std::pair<std::string, std::string>>& pairs,
                 const Vocab& vsrc, const Vocab& vtgt, std::size_t fixed_len = 0);

// Source-only batch for inference (seq_len = fixed_len).
Batch make_src_batch(const std::vector<std::string>& words, const Vocab& vsrc,
                     std::size_t fixed_len);

}  // namespace nadir
