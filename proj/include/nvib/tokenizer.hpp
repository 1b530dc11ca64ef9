// SPDX-License-Identifier: Apache-2.0
//
// Character-level tokenizer over Unicode codepoints.  Ids 0..3 are the
// specials (PAD, BOS, EOS, UNK); data characters follow sorted by
// codepoint, so the vocabulary is independent of corpus order.
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace nvib {

class Tokenizer {
  public:
    Tokenizer() = default;

    // Builds the character inventory of a corpus.  Throws
    // std::invalid_argument on an empty corpus (no characters at all).
    static Tokenizer build(const std::vector<std::string>& corpus);

    int vocab_size() const { return 4 + static_cast<int>(codepoints_.size()); }

    // Out-of-vocabulary characters map to the UNK id.
    std::vector<int> encode(const std::string& text) const;

    // Inverse of encode for in-vocabulary ids.  PAD/BOS/EOS render as
    // nothing; UNK renders as U+FFFD.
    std::string decode(const std::vector<int>& ids) const;

    // The data characters in id order (id = 4 + index).
    const std::vector<std::uint32_t>& codepoints() const { return codepoints_; }

    std::string to_json() const;
    static Tokenizer from_json(const std::string& text);

    // UTF-8 helpers.  Invalid bytes decode as their own byte value.
    static std::vector<std::uint32_t> utf8_decode(const std::string& text);
    static std::string utf8_encode_one(std::uint32_t cp);

  private:
    std::vector<std::uint32_t> codepoints_;
    std::unordered_map<std::uint32_t, int> to_id_;
};

}  // namespace nvib
