// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include "model.hpp"

#include <algorithm>
#include <cmath>

#include "errors.hpp"
#include "rng.hpp"

namespace kvcat {

void ModelConfig::validate() const {
    if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 ||
        max_seq_len <= 0)
        throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    int64_t prev = -1;
    for (int64_t r : router_layers) {
        if (r < 0 || r >= n_layers) throw ConfigError("router layer index out of range");
        if (r <= prev) throw ConfigError("router layer indices must be strictly increasing");
        prev = r;
    }
}

void for_each_param(TransformerWeights& w,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("tok_emb", w.tok_emb);
    fn("pos_emb", w.pos_emb);
    fn("final_gain", w.final_gain);
    fn("head", w.head);
    for (size_t l = 0; l < w.layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerWeights& lw = w.layers[l];
        fn(p + "attn_gain", lw.attn_gain);
        fn(p + "wq", lw.wq);
        fn(p + "wk", lw.wk);
        fn(p + "wv", lw.wv);
        fn(p + "wo", lw.wo);
        fn(p + "mlp_gain", lw.mlp_gain);
        fn(p + "w1", lw.w1);
        fn(p + "b1", lw.b1);
        fn(p + "w2", lw.w2);
        fn(p + "b2", lw.b2);
    }
}

void for_each_param(const TransformerWeights& w,
                    const std::function<void(const std::string&, const Tensor&)>& fn) {
    for_each_param(const_cast<TransformerWeights&>(w),
                   [&](const std::string& name, Tensor& t) { fn(name, t); });
}

uint64_t weights_checksum(const TransformerWeights& w) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for_each_param(w, [&](const std::string&, const Tensor& t) {
        uint64_t c = tensor_checksum(t);
        h ^= c;
        h *= 0x100000001b3ULL;
    });
    return h;
}

namespace {

Tensor gaussian(Rng& rng, std::vector<int64_t> shape, double std_dev) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = std_dev * rng.normal();
    return t;
}

Tensor causal_mask(int64_t t) {
    Tensor m({t, t});
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j <= i; ++j) m.at(i, j) = 1.0;
    return m;
}

}  // namespace

TransformerWeights init_weights(const ModelConfig& config, uint64_t seed) {
    config.validate();
    TransformerWeights w;
    w.config = config;
    Rng rng(derive_seed(seed, "init_weights"));
    const double s = 0.02;
    const double s_res = 0.02 / std::sqrt(static_cast<double>(config.n_layers));
    w.tok_emb = gaussian(rng, {config.vocab_size, config.d_model}, s);
    w.pos_emb = gaussian(rng, {config.max_seq_len, config.d_model}, s);
    w.final_gain = Tensor::full({config.d_model}, 1.0);
    w.head = gaussian(rng, {config.d_model, config.vocab_size}, s);
    w.layers.resize(static_cast<size_t>(config.n_layers));
    for (auto& lw : w.layers) {
        lw.attn_gain = Tensor::full({config.d_model}, 1.0);
        lw.wq = gaussian(rng, {config.d_model, config.d_model}, s);
        lw.wk = gaussian(rng, {config.d_model, config.d_model}, s);
        lw.wv = gaussian(rng, {config.d_model, config.d_model}, s);
        lw.wo = gaussian(rng, {config.d_model, config.d_model}, s_res);
        lw.mlp_gain = Tensor::full({config.d_model}, 1.0);
        lw.w1 = gaussian(rng, {config.d_model, config.d_ff}, s);
        lw.b1 = Tensor::zeros({config.d_ff});
        lw.w2 = gaussian(rng, {config.d_ff, config.d_model}, s_res);
        lw.b2 = Tensor::zeros({config.d_model});
    }
    return w;
}

CompressedPrefixCache cache_as_compressed(const KvCache& cache) {
    CompressedPrefixCache c;
    c.n_layers = cache.n_layers;
    c.n_heads = cache.n_heads;
    c.budget = cache.seq_len;
    c.d_head = cache.d_head;
    c.prefix_len = cache.seq_len;
    c.has_bias = false;
    c.k = cache.k;
    c.v = cache.v;
    return c;
}

WeightNodes insert_weights(Graph& g, const TransformerWeights& w, bool requires_grad) {
    WeightNodes n;
    n.tok_emb = g.leaf(w.tok_emb, requires_grad);
    n.pos_emb = g.leaf(w.pos_emb, requires_grad);
    n.final_gain = g.leaf(w.final_gain, requires_grad);
    n.head = g.leaf(w.head, requires_grad);
    for (const LayerWeights& lw : w.layers) {
        WeightNodes::Layer ln;
        ln.attn_gain = g.leaf(lw.attn_gain, requires_grad);
        ln.wq = g.leaf(lw.wq, requires_grad);
        ln.wk = g.leaf(lw.wk, requires_grad);
        ln.wv = g.leaf(lw.wv, requires_grad);
        ln.wo = g.leaf(lw.wo, requires_grad);
        ln.mlp_gain = g.leaf(lw.mlp_gain, requires_grad);
        ln.w1 = g.leaf(lw.w1, requires_grad);
        ln.b1 = g.leaf(lw.b1, requires_grad);
        ln.w2 = g.leaf(lw.w2, requires_grad);
        ln.b2 = g.leaf(lw.b2, requires_grad);
        n.layers.push_back(ln);
    }
    return n;
}

std::vector<Tensor> collect_weight_grads(const Graph& g, const WeightNodes& nodes) {
    std::vector<Tensor> out;
    out.push_back(g.grad(nodes.tok_emb));
    out.push_back(g.grad(nodes.pos_emb));
    out.push_back(g.grad(nodes.final_gain));
    out.push_back(g.grad(nodes.head));
    for (const auto& ln : nodes.layers) {
        out.push_back(g.grad(ln.attn_gain));
        out.push_back(g.grad(ln.wq));
        out.push_back(g.grad(ln.wk));
        out.push_back(g.grad(ln.wv));
        out.push_back(g.grad(ln.wo));
        out.push_back(g.grad(ln.mlp_gain));
        out.push_back(g.grad(ln.w1));
        out.push_back(g.grad(ln.b1));
        out.push_back(g.grad(ln.w2));
        out.push_back(g.grad(ln.b2));
    }
    return out;
}

namespace {

// Index of the router site governing layer `layer`, or -1 when the layer
// precedes the first site (full causal attention).
int site_for_layer(const ModelConfig& cfg, int64_t layer) {
    int site = -1;
    for (size_t i = 0; i < cfg.router_layers.size(); ++i)
        if (cfg.router_layers[i] <= layer) site = static_cast<int>(i);
    return site;
}

struct BlockOut {
    Graph::NodeId x;
    std::vector<Graph::NodeId> head_k, head_v;        // per head
    std::vector<Graph::NodeId> head_q;                // per head
    std::vector<Graph::NodeId> head_probs;            // per head
};

// One pre-norm residual block over the full sequence. The attention mask is
// per head-independent; `gate` (optional) multiplies unnormalized weights.
BlockOut build_block(Graph& g, const WeightNodes::Layer& lw, const ModelConfig& cfg,
                     Graph::NodeId x, const Tensor& mask, Graph::NodeId gate, bool want_probs) {
    const int64_t dh = cfg.d_head();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    BlockOut out;
    Graph::NodeId a_in = g.rms_norm(x, lw.attn_gain, kRmsEps);
    Graph::NodeId q = g.matmul(a_in, lw.wq);
    Graph::NodeId k = g.matmul(a_in, lw.wk);
    Graph::NodeId v = g.matmul(a_in, lw.wv);
    Graph::NodeId ctx = -1;
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
        Graph::NodeId qh = g.slice_cols(q, h * dh, dh);
        Graph::NodeId kh = g.slice_cols(k, h * dh, dh);
        Graph::NodeId vh = g.slice_cols(v, h * dh, dh);
        Graph::NodeId scores = g.affine(g.matmul(qh, kh, false, true), scale, 0.0);
        Graph::NodeId probs = gate >= 0 ? g.gated_masked_softmax(scores, gate, mask, 1.0, 0)
                                        : g.masked_row_softmax(scores, mask, 1.0);
        Graph::NodeId ctx_h = g.matmul(probs, vh);
        ctx = h == 0 ? ctx_h : g.concat_cols(ctx, ctx_h);
        out.head_q.push_back(qh);
        out.head_k.push_back(kh);
        out.head_v.push_back(vh);
        if (want_probs) out.head_probs.push_back(probs);
    }
    Graph::NodeId attn_out = g.matmul(ctx, lw.wo);
    Graph::NodeId x1 = g.add(x, attn_out);
    Graph::NodeId m_in = g.rms_norm(x1, lw.mlp_gain, kRmsEps);
    Graph::NodeId h1 = g.gelu(g.add_rowvec(g.matmul(m_in, lw.w1), lw.b1));
    Graph::NodeId mlp = g.add_rowvec(g.matmul(h1, lw.w2), lw.b2);
    out.x = g.add(x1, mlp);
    return out;
}

// Softmax rows of the query positions over prefix keys only (plain math,
// outside the graph). Rows sum to 1 over the prefix by construction.
Tensor prefix_attention_rows(const Tensor& q, const Tensor& k, const std::vector<int64_t>& positions,
                             int64_t prefix_len, double scale) {
    const int64_t m = static_cast<int64_t>(positions.size());
    const int64_t dh = q.cols();
    Tensor rows({m, prefix_len});
    for (int64_t i = 0; i < m; ++i) {
        const int64_t pos = positions[static_cast<size_t>(i)];
        double mx = -HUGE_VAL;
        std::vector<double> s(static_cast<size_t>(prefix_len));
        for (int64_t j = 0; j < prefix_len; ++j) {
            double dot = 0.0;
            for (int64_t c = 0; c < dh; ++c) dot += q.at(pos, c) * k.at(j, c);
            s[static_cast<size_t>(j)] = scale * dot;
            mx = std::max(mx, s[static_cast<size_t>(j)]);
        }
        double z = 0.0;
        for (int64_t j = 0; j < prefix_len; ++j) {
            double e = std::exp(s[static_cast<size_t>(j)] - mx);
            rows.at(i, j) = e;
            z += e;
        }
        for (int64_t j = 0; j < prefix_len; ++j) rows.at(i, j) /= z;
    }
    return rows;
}

Tensor rows_at_positions(const Tensor& x, const std::vector<int64_t>& positions) {
    Tensor out({static_cast<int64_t>(positions.size()), x.cols()});
    for (size_t i = 0; i < positions.size(); ++i)
        for (int64_t j = 0; j < x.cols(); ++j)
            out.at(static_cast<int64_t>(i), j) = x.at(positions[i], j);
    return out;
}

}  // namespace

ForwardResult build_forward(Graph& g, const WeightNodes& w, const ModelConfig& cfg,
                            const std::vector<int64_t>& tokens, const MaskedSpec* masked,
                            const ForwardOptions& opts) {
    const int64_t t = static_cast<int64_t>(tokens.size());
    if (t == 0) throw ValueError("forward: empty token sequence");
    if (t > cfg.max_seq_len) throw ValueError("forward: sequence longer than max_seq_len");
    const size_t n_sites = cfg.router_layers.size();
    if (masked && !masked->hard_masks.empty() &&
        masked->hard_masks.size() != n_sites)
        throw ShapeError("forward_masked: one mask per router layer required");
    if (masked) {
        for (const Tensor& m : masked->hard_masks)
            if (m.rank() != 1 || m.dim(0) != t)
                throw ShapeError("forward_masked: mask length must equal sequence length");
    }

    std::vector<int64_t> positions(static_cast<size_t>(t));
    for (int64_t i = 0; i < t; ++i) positions[static_cast<size_t>(i)] = i;
    Graph::NodeId x = g.add(g.gather_rows(w.tok_emb, tokens), g.gather_rows(w.pos_emb, positions));

    const Tensor causal = causal_mask(t);
    // Hard site masks fold into the attention mask: query i keeps key j iff
    // j <= i and (mask_j = 1 or j = i).
    std::vector<Tensor> site_attn_masks;
    if (masked && !masked->hard_masks.empty()) {
        for (const Tensor& m : masked->hard_masks) {
            Tensor am({t, t});
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = 0; j <= i; ++j) am.at(i, j) = (m.at(j) != 0.0 || j == i) ? 1.0 : 0.0;
            site_attn_masks.push_back(std::move(am));
        }
    }
    std::vector<Graph::NodeId> site_gates(n_sites, -1);

    ForwardResult res;
    if (opts.want_site_probs) res.site_probs.resize(n_sites);
    KvCache cache;
    AttnTrace trace;
    const bool want_trace = !opts.trace_positions.empty();
    if (opts.want_cache) {
        cache.n_layers = cfg.n_layers;
        cache.n_heads = cfg.n_heads;
        cache.seq_len = t;
        cache.d_head = cfg.d_head();
    }
    if (want_trace) {
        trace.query_positions = opts.trace_positions;
        trace.n_layers = cfg.n_layers;
        trace.n_heads = cfg.n_heads;
        trace.prefix_len = t;  // caller narrows; rows span the traced prefix below
        for (int64_t p : opts.trace_positions)
            if (p < 0 || p >= t) throw IndexError("trace position out of range");
        trace.prefix_len = *std::min_element(opts.trace_positions.begin(), opts.trace_positions.end());
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head()));
    for (int64_t layer = 0; layer < cfg.n_layers; ++layer) {
        const int site = n_sites > 0 ? site_for_layer(cfg, layer) : -1;
        const Tensor* mask = &causal;
        Graph::NodeId gate = -1;
        if (masked && site >= 0) {
            if (!masked->hard_masks.empty()) {
                mask = &site_attn_masks[static_cast<size_t>(site)];
            } else if (masked->make_gate) {
                if (site_gates[static_cast<size_t>(site)] < 0 &&
                    cfg.router_layers[static_cast<size_t>(site)] == layer)
                    site_gates[static_cast<size_t>(site)] = masked->make_gate(site, x);
                gate = site_gates[static_cast<size_t>(site)];
            }
        }
        const bool routed_layer =
            opts.want_site_probs && site >= 0 && cfg.router_layers[static_cast<size_t>(site)] == layer;
        BlockOut bo = build_block(g, w.layers[static_cast<size_t>(layer)], cfg, x, *mask, gate,
                                  routed_layer);
        x = bo.x;
        if (opts.want_cache || want_trace) {
            for (int64_t h = 0; h < cfg.n_heads; ++h) {
                const Tensor& kv_k = g.value(bo.head_k[static_cast<size_t>(h)]);
                const Tensor& kv_v = g.value(bo.head_v[static_cast<size_t>(h)]);
                if (opts.want_cache) {
                    cache.k.push_back(kv_k);
                    cache.v.push_back(kv_v);
                }
                if (want_trace) {
                    const Tensor& q = g.value(bo.head_q[static_cast<size_t>(h)]);
                    trace.query_states.push_back(rows_at_positions(q, opts.trace_positions));
                    trace.prefix_rows.push_back(
                        prefix_attention_rows(q, kv_k, opts.trace_positions, trace.prefix_len, scale));
                }
            }
        }
        if (routed_layer) {
            for (int64_t h = 0; h < cfg.n_heads; ++h)
                res.site_probs[static_cast<size_t>(site)].push_back(
                    g.value(bo.head_probs[static_cast<size_t>(h)]));
        }
    }
    Graph::NodeId xf = g.rms_norm(x, w.final_gain, kRmsEps);
    res.logits = g.matmul(xf, w.head);
    if (opts.want_cache) res.cache = std::move(cache);
    if (want_trace) res.trace = std::move(trace);
    return res;
}

CompressedPrefixNodes insert_compressed_cache(Graph& g, const CompressedPrefixCache& cache,
                                              bool requires_grad) {
    CompressedPrefixNodes n;
    n.budget = cache.budget;
    n.has_bias = cache.has_bias;
    for (size_t i = 0; i < cache.k.size(); ++i) {
        n.k.push_back(g.leaf(cache.k[i], requires_grad));
        n.v.push_back(g.leaf(cache.v[i], requires_grad));
    }
    if (cache.has_bias) n.bias = cache.bias;
    return n;
}

Graph::NodeId build_compressed_forward(Graph& g, const WeightNodes& w, const ModelConfig& cfg,
                                       const CompressedPrefixNodes& cache,
                                       const std::vector<int64_t>& suffix_tokens,
                                       int64_t prefix_len) {
    const int64_t k_len = static_cast<int64_t>(suffix_tokens.size());
    const int64_t m = cache.budget;
    if (k_len == 0 && m == 0) throw ValueError("compressed forward: empty attention (m=0, k=0)");
    if (k_len == 0) throw ValueError("compressed forward: empty suffix");
    if (prefix_len + k_len > cfg.max_seq_len)
        throw ValueError("compressed forward: n+k exceeds max_seq_len");
    if (static_cast<int64_t>(cache.k.size()) != cfg.n_layers * cfg.n_heads)
        throw ShapeError("compressed forward: cache entry count mismatch");

    std::vector<int64_t> positions(static_cast<size_t>(k_len));
    for (int64_t i = 0; i < k_len; ++i) positions[static_cast<size_t>(i)] = prefix_len + i;
    Graph::NodeId x =
        g.add(g.gather_rows(w.tok_emb, suffix_tokens), g.gather_rows(w.pos_emb, positions));

    // Compact slots visible to every suffix query; suffix-suffix causal.
    Tensor mask({k_len, m + k_len});
    for (int64_t i = 0; i < k_len; ++i) {
        for (int64_t j = 0; j < m; ++j) mask.at(i, j) = 1.0;
        for (int64_t j = 0; j <= i; ++j) mask.at(i, m + j) = 1.0;
    }
    const int64_t dh = cfg.d_head();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int64_t layer = 0; layer < cfg.n_layers; ++layer) {
        const WeightNodes::Layer& lw = w.layers[static_cast<size_t>(layer)];
        Graph::NodeId a_in = g.rms_norm(x, lw.attn_gain, kRmsEps);
        Graph::NodeId q = g.matmul(a_in, lw.wq);
        Graph::NodeId kk = g.matmul(a_in, lw.wk);
        Graph::NodeId vv = g.matmul(a_in, lw.wv);
        Graph::NodeId ctx = -1;
        for (int64_t h = 0; h < cfg.n_heads; ++h) {
            const size_t lh = static_cast<size_t>(layer * cfg.n_heads + h);
            Graph::NodeId qh = g.slice_cols(q, h * dh, dh);
            Graph::NodeId kh = g.slice_cols(kk, h * dh, dh);
            Graph::NodeId vh = g.slice_cols(vv, h * dh, dh);
            Graph::NodeId kcat = m > 0 ? g.concat_rows(cache.k[lh], kh) : kh;
            Graph::NodeId vcat = m > 0 ? g.concat_rows(cache.v[lh], vh) : vh;
            Graph::NodeId scores = g.affine(g.matmul(qh, kcat, false, true), scale, 0.0);
            if (cache.has_bias && m > 0) {
                // Per-slot bias on compact-slot logits, zero on suffix slots.
                Tensor bias_row({m + k_len});
                for (int64_t j = 0; j < m; ++j) bias_row.at(j) = cache.bias[lh].at(j);
                scores = g.add_rowvec(scores, g.constant(std::move(bias_row)));
            }
            Graph::NodeId probs = g.masked_row_softmax(scores, mask, 1.0);
            Graph::NodeId ctx_h = g.matmul(probs, vcat);
            ctx = h == 0 ? ctx_h : g.concat_cols(ctx, ctx_h);
        }
        Graph::NodeId attn_out = g.matmul(ctx, lw.wo);
        Graph::NodeId x1 = g.add(x, attn_out);
        Graph::NodeId m_in = g.rms_norm(x1, lw.mlp_gain, kRmsEps);
        Graph::NodeId h1 = g.gelu(g.add_rowvec(g.matmul(m_in, lw.w1), lw.b1));
        Graph::NodeId mlp = g.add_rowvec(g.matmul(h1, lw.w2), lw.b2);
        x = g.add(x1, mlp);
    }
    Graph::NodeId xf = g.rms_norm(x, w.final_gain, kRmsEps);
    return g.matmul(xf, w.head);
}

DenseForwardOutput forward_dense(const TransformerWeights& w, const std::vector<int64_t>& tokens,
                                 const std::vector<int64_t>& trace_positions) {
    Graph g;
    WeightNodes wn = insert_weights(g, w, false);
    ForwardOptions opts;
    opts.want_cache = true;
    opts.trace_positions = trace_positions;
    ForwardResult r = build_forward(g, wn, w.config, tokens, nullptr, opts);
    DenseForwardOutput out;
    out.logits = g.value(r.logits);
    out.cache = std::move(*r.cache);
    if (r.trace) out.trace = std::move(r.trace);
    return out;
}

Tensor forward_masked(const TransformerWeights& w, const std::vector<int64_t>& tokens,
                      const std::vector<Tensor>& site_masks) {
    Graph g;
    WeightNodes wn = insert_weights(g, w, false);
    MaskedSpec spec;
    spec.hard_masks = site_masks;
    ForwardResult r = build_forward(g, wn, w.config, tokens, &spec);
    return g.value(r.logits);
}

Tensor forward_with_compressed_prefix(const TransformerWeights& w,
                                      const CompressedPrefixCache& cache,
                                      const std::vector<int64_t>& suffix_tokens,
                                      int64_t prefix_len) {
    Graph g;
    WeightNodes wn = insert_weights(g, w, false);
    CompressedPrefixNodes cn = insert_compressed_cache(g, cache, false);
    Graph::NodeId logits = build_compressed_forward(g, wn, w.config, cn, suffix_tokens, prefix_len);
    return g.value(logits);
}

}  // namespace kvcat
