// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include "rng.hpp"

#include <algorithm>
#include <numeric>

namespace kvcat {

uint64_t hash_name(std::string_view name) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<int64_t> Rng::subset(int64_t n, int64_t count) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates: the first `count` entries are a uniform subset.
    for (int64_t i = 0; i < count; ++i) {
        int64_t j = i + static_cast<int64_t>(below(static_cast<uint64_t>(n - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(count));
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace kvcat
