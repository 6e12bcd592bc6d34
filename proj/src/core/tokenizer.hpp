// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kvcat {

// Byte-level tokenizer: ids 0..255 are raw bytes, followed by BOS/EOS/PAD.
// encode/decode are exact inverses on arbitrary byte strings.
class Tokenizer {
public:
    static constexpr int64_t kBos = 256;
    static constexpr int64_t kEos = 257;
    static constexpr int64_t kPad = 258;
    static constexpr int64_t kVocabSize = 259;

    std::vector<int64_t> encode(const std::string& text) const;
    // Non-byte ids (specials) are skipped on decode.
    std::string decode(const std::vector<int64_t>& ids) const;

    int64_t vocab_size() const { return kVocabSize; }
};

}  // namespace kvcat
