// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "graph.hpp"
#include "tensor.hpp"

namespace kvcat {

inline constexpr double kRmsEps = 1e-5;

struct ModelConfig {
    int64_t vocab_size = 259;
    int64_t d_model = 128;
    int64_t n_layers = 4;
    int64_t n_heads = 4;
    int64_t d_ff = 512;
    int64_t max_seq_len = 512;
    std::vector<int64_t> router_layers = {0, 2};
    uint64_t seed = 42;

    int64_t d_head() const { return d_model / n_heads; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Tensor attn_gain, wq, wk, wv, wo;
    Tensor mlp_gain, w1, b1, w2, b2;
};

struct TransformerWeights {
    ModelConfig config;
    Tensor tok_emb;     // [vocab x d_model]
    Tensor pos_emb;     // [max_seq_len x d_model]
    Tensor final_gain;  // [d_model]
    Tensor head;        // [d_model x vocab]
    std::vector<LayerWeights> layers;
};

// Visits every parameter in a fixed, documented order. The order defines
// the positional layout of optimizer state and gradient accumulators.
void for_each_param(TransformerWeights& w,
                    const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_param(const TransformerWeights& w,
                    const std::function<void(const std::string&, const Tensor&)>& fn);

uint64_t weights_checksum(const TransformerWeights& w);

// Deterministic scaled-Gaussian initialization: std 0.02 everywhere except
// the residual output projections (wo, w2), which use 0.02/sqrt(n_layers);
// gains start at 1, biases at 0. Same seed gives bit-identical weights.
TransformerWeights init_weights(const ModelConfig& config, uint64_t seed);

// Dense per-layer-per-head KV tensors for a single forward pass.
struct KvCache {
    int64_t n_layers = 0, n_heads = 0, seq_len = 0, d_head = 0;
    std::vector<Tensor> k, v;  // index: layer * n_heads + head, each [T x d_head]

    int64_t idx(int64_t layer, int64_t head) const { return layer * n_heads + head; }
    const Tensor& key(int64_t layer, int64_t head) const { return k[static_cast<size_t>(idx(layer, head))]; }
    const Tensor& val(int64_t layer, int64_t head) const { return v[static_cast<size_t>(idx(layer, head))]; }
};

// Compacted replacement for a prefix KV cache; the optional per-slot logit
// bias is only present when produced by attention matching.
struct CompressedPrefixCache {
    int64_t n_layers = 0, n_heads = 0, budget = 0, d_head = 0;
    int64_t prefix_len = 0;  // n of the prefix this cache stands in for
    bool has_bias = false;
    std::vector<Tensor> k, v;     // [m x d_head] per layer/head
    std::vector<Tensor> bias;     // [m] per layer/head when has_bias

    int64_t idx(int64_t layer, int64_t head) const { return layer * n_heads + head; }
};

// Converts a dense cache into the compressed-cache shape (identity budget).
CompressedPrefixCache cache_as_compressed(const KvCache& cache);

// Attention evidence recorded for designated query positions: the query
// states themselves plus their softmax rows over the prefix keys only.
struct AttnTrace {
    std::vector<int64_t> query_positions;  // absolute positions
    int64_t prefix_len = 0;
    int64_t n_layers = 0, n_heads = 0;
    std::vector<Tensor> query_states;  // per layer/head [M x d_head]
    std::vector<Tensor> prefix_rows;   // per layer/head [M x prefix_len]

    int64_t idx(int64_t layer, int64_t head) const { return layer * n_heads + head; }
};

// --- graph builders -------------------------------------------------------

struct WeightNodes {
    struct Layer {
        Graph::NodeId attn_gain, wq, wk, wv, wo;
        Graph::NodeId mlp_gain, w1, b1, w2, b2;
    };
    Graph::NodeId tok_emb, pos_emb, final_gain, head;
    std::vector<Layer> layers;
};

WeightNodes insert_weights(Graph& g, const TransformerWeights& w, bool requires_grad);

// Collects the gradients of a backward pass in parameter order.
std::vector<Tensor> collect_weight_grads(const Graph& g, const WeightNodes& nodes);

// Per-router-site gating for the masked forward pass. Exactly one of
// `hard_masks` / `make_gate` is used; hard masks are binary keep vectors
// [T], gates are graph nodes produced from the site's input hiddens.
struct MaskedSpec {
    std::vector<Tensor> hard_masks;
    std::function<Graph::NodeId(int site_index, Graph::NodeId hidden)> make_gate;
};

struct ForwardResult {
    Graph::NodeId logits = -1;
    std::optional<KvCache> cache;
    std::optional<AttnTrace> trace;
    // Dense attention probabilities per router site (per head, [T x T]);
    // filled only when requested, for the attention-mass policy.
    std::vector<std::vector<Tensor>> site_probs;
};

struct ForwardOptions {
    bool want_cache = false;
    bool want_site_probs = false;
    std::vector<int64_t> trace_positions;  // non-empty enables the trace
};

// Full-sequence causal pass; `masked` null gives the dense pass.
ForwardResult build_forward(Graph& g, const WeightNodes& w, const ModelConfig& cfg,
                            const std::vector<int64_t>& tokens, const MaskedSpec* masked,
                            const ForwardOptions& opts = {});

// Suffix pass over a compressed prefix: compact slots are visible to every
// suffix query, suffix-suffix attention stays causal, suffix tokens are
// embedded at absolute positions n .. n+k-1.
struct CompressedPrefixNodes {
    int64_t budget = 0;
    bool has_bias = false;
    std::vector<Graph::NodeId> k, v;  // per layer/head, [m x d_head]
    std::vector<Tensor> bias;         // per layer/head [m] when has_bias
};

CompressedPrefixNodes insert_compressed_cache(Graph& g, const CompressedPrefixCache& cache,
                                              bool requires_grad);

Graph::NodeId build_compressed_forward(Graph& g, const WeightNodes& w, const ModelConfig& cfg,
                                       const CompressedPrefixNodes& cache,
                                       const std::vector<int64_t>& suffix_tokens,
                                       int64_t prefix_len);

// --- plain (no-gradient) entry points --------------------------------------

struct DenseForwardOutput {
    Tensor logits;
    KvCache cache;
    std::optional<AttnTrace> trace;
};

DenseForwardOutput forward_dense(const TransformerWeights& w, const std::vector<int64_t>& tokens,
                                 const std::vector<int64_t>& trace_positions = {});

Tensor forward_masked(const TransformerWeights& w, const std::vector<int64_t>& tokens,
                      const std::vector<Tensor>& site_masks);

Tensor forward_with_compressed_prefix(const TransformerWeights& w,
                                      const CompressedPrefixCache& cache,
                                      const std::vector<int64_t>& suffix_tokens,
                                      int64_t prefix_len);

}  // namespace kvcat
