// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include "textgen.hpp"

#include <array>
#include <cmath>

#include "errors.hpp"
#include "rng.hpp"

namespace kvcat {

namespace {

const std::array<const char*, 96> kWords = {
    "river",   "stone",   "garden",  "window",  "market",  "signal",  "harbor",  "letter",
    "engine",  "forest",  "bridge",  "copper",  "winter",  "summer",  "animal",  "circle",
    "square",  "yellow",  "silver",  "border",  "valley",  "meadow",  "branch",  "record",
    "carries", "follows", "crosses", "reaches", "gathers", "returns", "signals", "repairs",
    "guards",  "counts",  "brings",  "holds",   "keeps",   "finds",   "opens",   "closes",
    "the",     "a",       "every",   "this",    "that",    "another", "each",    "some",
    "old",     "new",     "quiet",   "bright",  "heavy",   "narrow",  "steady",  "gentle",
    "north",   "south",   "east",    "west",    "morning", "evening", "autumn",  "spring",
    "water",   "light",   "sound",   "metal",   "paper",   "cloth",   "glass",   "grain",
    "worker",  "sailor",  "farmer",  "keeper",  "trader",  "rider",   "walker",  "singer",
    "slowly",  "quickly", "quietly", "firmly",  "gladly",  "barely",  "nearly",  "fully",
    "road",    "field",   "tower",   "cellar",  "attic",   "corner",  "street",  "square"};

const std::array<const char*, 20> kFillerSentences = {
    "The museum opens at nine in the morning.",
    "A narrow path follows the edge of the field.",
    "Fresh bread is sold at the corner bakery.",
    "The library keeps maps of the old town.",
    "Rain fell steadily through the afternoon.",
    "The ferry crosses the channel twice a day.",
    "Workers repaired the wall behind the station.",
    "A bell rings when the gate is opened.",
    "The orchard produces apples and pears.",
    "Lamps along the avenue switch on at dusk.",
    "The committee meets on the first Tuesday.",
    "Spare keys are kept in the front office.",
    "The canal freezes over in late December.",
    "A weather vane turns above the clock tower.",
    "The archive stores records from both centuries.",
    "Visitors leave their coats near the entrance.",
    "The printing press runs through the night.",
    "Fishing boats return before the evening tide.",
    "The greenhouse stays warm through the winter.",
    "A stone bridge carries the road over the stream.",
};

std::string random_digits(Rng& rng, int64_t count) {
    std::string s;
    for (int64_t i = 0; i < count; ++i) s.push_back(static_cast<char>('0' + rng.below(10)));
    return s;
}

std::string markov_corpus(int64_t size, uint64_t seed) {
    Rng rng(seed);
    std::string out;
    out.reserve(static_cast<size_t>(size) + 64);
    size_t w1 = rng.below(kWords.size());
    size_t w2 = rng.below(kWords.size());
    int words_in_sentence = 0;
    int sentence_len = 6 + static_cast<int>(rng.below(7));
    bool sentence_start = true;
    while (static_cast<int64_t>(out.size()) < size) {
        size_t next;
        if (rng.uniform() < 0.8) {
            // order-2 deterministic transition
            next = (hash_name(kWords[w1]) * 31 + hash_name(kWords[w2])) % kWords.size();
        } else {
            next = rng.below(kWords.size());
        }
        std::string word = kWords[next];
        if (sentence_start) {
            word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
            sentence_start = false;
        } else {
            out.push_back(' ');
        }
        out += word;
        w1 = w2;
        w2 = next;
        if (++words_in_sentence >= sentence_len) {
            if (rng.uniform() < 0.1) {
                out += " code ";
                out += random_digits(rng, 4);
            }
            out += ". ";
            words_in_sentence = 0;
            sentence_len = 6 + static_cast<int>(rng.below(7));
            sentence_start = true;
        }
    }
    return out;
}

std::string template_corpus(int64_t size, uint64_t seed) {
    Rng rng(seed);
    std::string out;
    out.reserve(static_cast<size_t>(size) + 64);
    while (static_cast<int64_t>(out.size()) < size) {
        switch (rng.below(4)) {
            case 0:
                out += std::string("The ") + kWords[rng.below(24)] + " " + kWords[24 + rng.below(16)] +
                       " the " + kWords[rng.below(24)] + ". ";
                break;
            case 1:
                out += std::string("Order ") + random_digits(rng, 4) + " shipped to the " +
                       kWords[rng.below(24)] + ". ";
                break;
            case 2:
                out += std::string("Every ") + kWords[64 + rng.below(16)] + " " +
                       kWords[24 + rng.below(16)] + " " + kWords[80 + rng.below(8)] + ". ";
                break;
            default:
                out += kFillerSentences[rng.below(kFillerSentences.size())];
                out += " ";
                break;
        }
    }
    return out;
}

}  // namespace

CorpusKind corpus_kind_from_string(const std::string& s) {
    if (s == "markov") return CorpusKind::Markov;
    if (s == "template") return CorpusKind::Template;
    throw ConfigError("unknown corpus kind '" + s + "' (expected markov|template)");
}

std::string gen_corpus(CorpusKind kind, int64_t size, uint64_t seed) {
    if (size <= 0) throw ValueError("gen_corpus: size must be positive");
    return kind == CorpusKind::Markov ? markov_corpus(size, seed) : template_corpus(size, seed);
}

NiahExample gen_niah(const NiahSpec& spec) {
    if (spec.digits <= 0) throw ConfigError("niah: digit count must be positive");
    if (spec.depth < 0.0 || spec.depth > 1.0) throw ConfigError("niah: depth must lie in [0,1]");
    Rng rng(derive_seed(spec.seed, "niah"));
    NiahExample ex;
    ex.answer = random_digits(rng, spec.digits);
    ex.needle = "Memory record: special_passkey=" + ex.answer + ".";
    ex.query = "Memory record: special_passkey=";
    const int64_t needle_len = static_cast<int64_t>(ex.needle.size());
    if (spec.prompt_len < needle_len + 2)
        throw ConfigError("niah: prompt length too short for the needle");

    const int64_t filler_budget = spec.prompt_len - needle_len;
    const int64_t pre_quota = static_cast<int64_t>(std::llround(spec.depth * static_cast<double>(filler_budget)));
    const int64_t post_quota = filler_budget - pre_quota;

    auto fill = [&](int64_t quota) {
        std::string s;
        while (static_cast<int64_t>(s.size()) < quota) {
            if (rng.uniform() < spec.distractor_prob) {
                // Distractor codes are rejected while they match the answer.
                std::string code = random_digits(rng, spec.digits);
                while (code == ex.answer) code = random_digits(rng, spec.digits);
                s += "Ignore the misleading special passkey candidate " + code + ". ";
            } else {
                s += kFillerSentences[rng.below(kFillerSentences.size())];
                s += " ";
            }
        }
        s.resize(static_cast<size_t>(quota));
        return s;
    };
    const std::string pre = fill(pre_quota);
    const std::string post = fill(post_quota);
    ex.haystack = pre + ex.needle + post;
    ex.needle_offset = pre_quota;
    return ex;
}

}  // namespace kvcat
