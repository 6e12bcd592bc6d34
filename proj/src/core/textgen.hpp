// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kvcat {

enum class CorpusKind { Markov, Template };

CorpusKind corpus_kind_from_string(const std::string& s);

// Seeded synthetic ASCII text with learnable next-byte structure. `markov`
// emits order-2 word transitions (mostly deterministic with a noise floor),
// `template` emits filled sentence patterns. Output length is >= `size`.
std::string gen_corpus(CorpusKind kind, int64_t size, uint64_t seed);

// Needle-in-a-haystack prompt generation (passkey retrieval).
struct NiahSpec {
    int64_t digits = 6;
    double depth = 0.5;               // in {0, 0.25, 0.5, 0.75, 1}
    double distractor_prob = 0.35;
    int64_t prompt_len = 192;         // haystack length in bytes
    uint64_t seed = 0;
};

struct NiahExample {
    std::string haystack;  // exactly prompt_len bytes, needle embedded once
    std::string query;     // appended after the haystack at evaluation time
    std::string answer;    // the passkey digits
    std::string needle;    // full needle sentence
    int64_t needle_offset = 0;  // byte offset of the needle within haystack
};

NiahExample gen_niah(const NiahSpec& spec);

}  // namespace kvcat
