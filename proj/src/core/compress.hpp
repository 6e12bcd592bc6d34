// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "model.hpp"
#include "tensor.hpp"
#include "tokenizer.hpp"

namespace kvcat {

struct AmConfig {
    double keep_ratio = 1.0;   // in (0, 1]
    int64_t max_queries = 256;
    int64_t nnls_iters = 8;
    double ridge = 1e-4;
    void validate() const;
};

struct CompactOptConfig {
    int64_t steps = 100;
    double lr = 1e-2;
    double weight_decay = 0.0;
    double clip_norm = 1.0;
    std::vector<int64_t> record_steps = {0, 1, 2, 5, 10, 20, 50, 100};
    enum class Init { FirstM, RandomM };
    Init init_mode = Init::FirstM;
    uint64_t seed = 0;
    void validate() const;
};

struct CompactionTrace {
    std::vector<std::pair<int64_t, double>> records;  // ascending (step, L_KV)
};

// Key selection by root-mean-square attention weight over sampled queries;
// ties toward the earlier index, result ascending.
std::vector<int64_t> am_select_keys(const Tensor& attn_rows, int64_t m);

// Box-constrained NNLS for the per-slot log-bias: min ||E w - Z||^2 over
// 0 <= w <= w_max via projected-gradient sweeps with exact line search,
// started from w = 1. Returns beta = log(max(w, 1e-12)).
Tensor am_fit_bias(const Tensor& queries, const Tensor& compact_keys, const Tensor& normalizers,
                   double scale, int64_t nnls_iters, double w_max);

// Ridge least squares for compact values: (P^T P + lambda_eff I)^-1 P^T O
// with lambda_eff = ridge * sigma_max(P)^2 (20 power iterations). ridge = 0
// falls back to a minimum-norm least-squares solve.
Tensor am_fit_values(const Tensor& p, const Tensor& o, double ridge);

// Full attention-matching compressor: per layer and head, select keys, fit
// the bias to the dense softmax normalizers, then fit values to reconstruct
// the dense prefix-attention outputs of the sampled suffix queries.
CompressedPrefixCache attention_matching_compress(const TransformerWeights& weights,
                                                  const std::vector<int64_t>& prefix_tokens,
                                                  const std::vector<int64_t>& suffix_tokens,
                                                  const AmConfig& cfg);

// Same compressor against precomputed inputs (prefix cache slice + trace).
CompressedPrefixCache attention_matching_from_trace(const KvCache& prefix_cache,
                                                    const AttnTrace& trace, const AmConfig& cfg);

// First-m or seeded-random-m initialization for gradient compaction. The
// random subset is shared across layers and heads (one token subset).
CompressedPrefixCache grad_compact_init(const KvCache& prefix_cache, int64_t m,
                                        CompactOptConfig::Init mode, uint64_t seed);

// Restricts a full-sequence cache to its first n slots.
KvCache prefix_cache_slice(const KvCache& cache, int64_t n);

struct CompactOptResult {
    CompressedPrefixCache cache;
    CompactionTrace trace;
};

// Directly optimizes the compact K/V tensors against
// KL(softmax(teacher) || softmax(logits under compact cache)) averaged over
// the loss rows; model weights are never touched. `loss_row_begin/len`
// select the scored suffix rows (the full suffix by default).
CompactOptResult grad_compact_optimize(const TransformerWeights& weights,
                                       const CompressedPrefixCache& init_cache, int64_t prefix_len,
                                       const std::vector<int64_t>& suffix_tokens,
                                       const Tensor& teacher_logits, const CompactOptConfig& cfg,
                                       int64_t loss_row_begin = 0, int64_t loss_row_len = -1);

// <text><instruction><text> with the loss span covering the second copy.
struct ReconstructionSequence {
    std::vector<int64_t> tokens;
    int64_t prefix_len = 0;  // first <text> copy
    int64_t loss_begin = 0;  // absolute position where the loss span starts
    int64_t loss_len = 0;
};

extern const char* const kReconstructionInstruction;

ReconstructionSequence build_reconstruction_sequence(const std::vector<int64_t>& text_tokens,
                                                     const Tokenizer& tokenizer, int64_t max_len);

}  // namespace kvcat
