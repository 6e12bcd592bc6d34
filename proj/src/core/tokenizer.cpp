// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include "tokenizer.hpp"

#include "errors.hpp"

namespace kvcat {

std::vector<int64_t> Tokenizer::encode(const std::string& text) const {
    std::vector<int64_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int64_t>(c));
    return ids;
}

std::string Tokenizer::decode(const std::vector<int64_t>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int64_t id : ids) {
        if (id < 0 || id >= kVocabSize) throw IndexError("tokenizer: id out of range");
        if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

}  // namespace kvcat
