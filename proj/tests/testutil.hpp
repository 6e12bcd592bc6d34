// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "core/model.hpp"
#include "core/rng.hpp"
#include "core/tensor.hpp"

namespace kvcat::test {

// Central finite differences of a scalar-valued function w.r.t. one input
// tensor. The oracle is deliberately independent of the Graph machinery:
// it reruns the supplied closure on perturbed copies of the input.
inline Tensor finite_difference(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                double h = 1e-5) {
    Tensor g = Tensor::zeros(x.shape());
    Tensor xp = x;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = xp.at(i);
        xp.at(i) = orig + h;
        const double fp = f(xp);
        xp.at(i) = orig - h;
        const double fm = f(xp);
        xp.at(i) = orig;
        g.at(i) = (fp - fm) / (2.0 * h);
    }
    return g;
}

// max_i |a_i - b_i| / max(1, |b_i|)
inline double max_rel_err(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double denom = std::max(1.0, std::abs(b.at(i)));
        worst = std::max(worst, std::abs(a.at(i) - b.at(i)) / denom);
    }
    return worst;
}

inline Tensor random_tensor(Rng& rng, std::vector<int64_t> shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t.at(i) = scale * rng.normal();
    return t;
}

inline ModelConfig tiny_config(int64_t vocab = 17, int64_t d_model = 16, int64_t n_layers = 2,
                               int64_t n_heads = 2, int64_t d_ff = 32, int64_t max_seq = 32) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = d_model;
    cfg.n_layers = n_layers;
    cfg.n_heads = n_heads;
    cfg.d_ff = d_ff;
    cfg.max_seq_len = max_seq;
    cfg.router_layers = {0};
    cfg.seed = 7;
    return cfg;
}

inline std::vector<int64_t> random_tokens(Rng& rng, int64_t count, int64_t vocab) {
    std::vector<int64_t> t(static_cast<size_t>(count));
    for (auto& v : t) v = static_cast<int64_t>(rng.below(static_cast<uint64_t>(vocab)));
    return t;
}

// Brute-force single-query attention over an explicit key subset; used as
// the oracle for masked attention. Computes softmax over the subset in
// ascending index order, exactly like the production kernel should.
inline std::vector<double> subset_attention(const Tensor& q_row, const Tensor& k, const Tensor& v,
                                            const std::vector<int64_t>& subset, double scale) {
    double mx = -HUGE_VAL;
    std::vector<double> s;
    s.reserve(subset.size());
    for (int64_t j : subset) {
        double dot = 0.0;
        for (int64_t c = 0; c < k.cols(); ++c) dot += q_row.at(c) * k.at(j, c);
        double sc = scale * dot + 0.0;
        s.push_back(sc);
        mx = std::max(mx, sc);
    }
    double z = 0.0;
    std::vector<double> e(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        e[i] = std::exp(s[i] - mx);
        z += e[i];
    }
    std::vector<double> out(static_cast<size_t>(v.cols()), 0.0);
    for (int64_t c = 0; c < v.cols(); ++c) {
        double acc = 0.0;
        for (size_t i = 0; i < subset.size(); ++i) acc += (e[i] / z) * v.at(subset[i], c);
        out[static_cast<size_t>(c)] = acc;
    }
    return out;
}

}  // namespace kvcat::test
