// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "model.hpp"
#include "tensor.hpp"

namespace kvcat {

// Container behind every on-disk artifact: the magic string "KVCAT1", a
// length-prefixed UTF-8 header of key=value lines, then named arrays as
// (name, rank, dims, row-major little-endian float64).
struct ArrayFile {
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::pair<std::string, Tensor>> arrays;

    void set(const std::string& key, const std::string& value) { meta.emplace_back(key, value); }
    const std::string& get(const std::string& key) const;
    bool has(const std::string& key) const;

    void add(const std::string& name, Tensor t) { arrays.emplace_back(name, std::move(t)); }
    const Tensor* find(const std::string& name) const;

    void save(const std::string& path) const;
    static ArrayFile load(const std::string& path);
};

void save_checkpoint(const TransformerWeights& weights, const std::string& path);
TransformerWeights load_checkpoint(const std::string& path);

// Header encoding of a ModelConfig, shared by checkpoints and caches.
void config_to_meta(const ModelConfig& cfg, ArrayFile& f);
ModelConfig config_from_meta(const ArrayFile& f);

void save_compact_cache(const CompressedPrefixCache& cache, const ModelConfig& cfg,
                        const std::string& path);
CompressedPrefixCache load_compact_cache(const std::string& path, ModelConfig* cfg_out = nullptr);

}  // namespace kvcat
