// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include "router.hpp"

#include <algorithm>
#include <cmath>

#include "errors.hpp"
#include "rng.hpp"

namespace kvcat {

RouterParams init_router_params(const ModelConfig& cfg, int64_t d_r, double tau, uint64_t seed) {
    if (tau <= 0.0 || tau >= 1.0) throw ConfigError("router threshold must lie in (0,1)");
    RouterParams p;
    p.d_r = d_r;
    p.tau = tau;
    Rng rng(derive_seed(seed, "init_router"));
    const double s = 0.02;
    for (size_t i = 0; i < cfg.router_layers.size(); ++i) {
        RouterSiteParams sp;
        sp.wq = Tensor::zeros({cfg.d_model, d_r});
        sp.wk = Tensor::zeros({cfg.d_model, d_r});
        sp.wv = Tensor::zeros({cfg.d_model, d_r});
        sp.wo = Tensor::zeros({d_r, cfg.d_model});
        for (Tensor* t : {&sp.wq, &sp.wk, &sp.wv, &sp.wo})
            for (int64_t j = 0; j < t->numel(); ++j) t->at(j) = s * rng.normal();
        sp.wp = Tensor::zeros({cfg.d_model, cfg.d_model});
        for (int64_t j = 0; j < cfg.d_model; ++j) sp.wp.at(j, j) = -1.0;
        sp.alpha = Tensor::scalar(0.0);
        p.sites.push_back(std::move(sp));
    }
    return p;
}

void for_each_router_param(RouterParams& p,
                           const std::function<void(const std::string&, Tensor&)>& fn) {
    for (size_t i = 0; i < p.sites.size(); ++i) {
        const std::string base = "router" + std::to_string(i) + ".";
        RouterSiteParams& sp = p.sites[i];
        fn(base + "wq", sp.wq);
        fn(base + "wk", sp.wk);
        fn(base + "wv", sp.wv);
        fn(base + "wo", sp.wo);
        fn(base + "wp", sp.wp);
        fn(base + "alpha", sp.alpha);
    }
}

void for_each_router_param(const RouterParams& p,
                           const std::function<void(const std::string&, const Tensor&)>& fn) {
    for_each_router_param(const_cast<RouterParams&>(p),
                          [&](const std::string& name, Tensor& t) { fn(name, t); });
}

uint64_t router_checksum(const RouterParams& p) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for_each_router_param(p, [&](const std::string&, const Tensor& t) {
        h ^= tensor_checksum(t);
        h *= 0x100000001b3ULL;
    });
    return h;
}

std::vector<RouterSiteNodes> insert_router_params(Graph& g, const RouterParams& p,
                                                  bool requires_grad) {
    std::vector<RouterSiteNodes> nodes;
    for (const RouterSiteParams& sp : p.sites) {
        RouterSiteNodes n;
        n.wq = g.leaf(sp.wq, requires_grad);
        n.wk = g.leaf(sp.wk, requires_grad);
        n.wv = g.leaf(sp.wv, requires_grad);
        n.wo = g.leaf(sp.wo, requires_grad);
        n.wp = g.leaf(sp.wp, requires_grad);
        n.alpha = g.leaf(sp.alpha, requires_grad);
        nodes.push_back(n);
    }
    return nodes;
}

std::vector<Tensor> collect_router_grads(const Graph& g, const std::vector<RouterSiteNodes>& nodes) {
    std::vector<Tensor> out;
    for (const RouterSiteNodes& n : nodes) {
        out.push_back(g.grad(n.wq));
        out.push_back(g.grad(n.wk));
        out.push_back(g.grad(n.wv));
        out.push_back(g.grad(n.wo));
        out.push_back(g.grad(n.wp));
        out.push_back(g.grad(n.alpha));
    }
    return out;
}

Graph::NodeId build_router_scores(Graph& g, const RouterSiteNodes& site, Graph::NodeId hidden,
                                  double eps_den) {
    const Tensor& h = g.value(hidden);
    const int64_t t = h.rows();
    const int64_t d = h.cols();
    // h_tilde = LN(h); raw h feeds the cosine branch below.
    Graph::NodeId h_norm = g.rms_norm(hidden, g.constant(Tensor::full({d}, 1.0)), kRmsEps);
    Graph::NodeId q = g.elu_plus_one(g.matmul(h_norm, site.wq));
    Graph::NodeId k = g.elu_plus_one(g.matmul(h_norm, site.wk));
    Graph::NodeId r = g.matmul(h_norm, site.wv);
    // Causal linear attention: a_t = W_O (q_t^T S_t) / (q_t^T z_t + eps)
    // realized through the masked score matrix q k^T.
    Tensor causal({t, t});
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j <= i; ++j) causal.at(i, j) = 1.0;
    Graph::NodeId scores = g.mul(g.matmul(q, k, false, true), g.constant(causal));
    Graph::NodeId numer = g.matmul(scores, r);
    Graph::NodeId denom = g.row_sum(scores);
    Graph::NodeId summary = g.matmul(g.row_div(numer, denom, eps_den), site.wo);
    Graph::NodeId u = g.normalize_rows(g.matmul(hidden, site.wp));
    Graph::NodeId w = g.normalize_rows(g.add(hidden, g.mul_scalar(summary, site.alpha)));
    return g.affine(g.row_dot(u, w), -0.5, 0.5);
}

Tensor router_scores(const RouterParams& params, int64_t site_index, const Tensor& hidden) {
    if (site_index < 0 || static_cast<size_t>(site_index) >= params.sites.size())
        throw IndexError("router site index out of range");
    Graph g;
    auto nodes = insert_router_params(g, params, false);
    Graph::NodeId h = g.constant(hidden);
    Graph::NodeId p = build_router_scores(g, nodes[static_cast<size_t>(site_index)], h, params.eps_den);
    return g.value(p);
}

RouterTrace trace_from_scores(const Tensor& scores, double tau) {
    RouterTrace tr;
    tr.scores = scores;
    tr.mask = Tensor::zeros(scores.shape());
    double fsum = 0.0, gsum = 0.0;
    for (int64_t i = 0; i < scores.numel(); ++i) {
        const double p = scores.at(i);
        const double m = p > tau ? 1.0 : 0.0;
        tr.mask.at(i) = m;
        fsum += m;
        gsum += p;
    }
    tr.f = fsum / static_cast<double>(scores.numel());
    tr.g = gsum / static_cast<double>(scores.numel());
    return tr;
}

PolicyKind policy_kind_from_string(const std::string& s) {
    if (s == "router") return PolicyKind::Router;
    if (s == "rand") return PolicyKind::Rand;
    if (s == "attn") return PolicyKind::Attn;
    throw ConfigError("unknown policy '" + s + "' (expected router|rand|attn)");
}

std::string policy_kind_to_string(PolicyKind k) {
    switch (k) {
        case PolicyKind::Router: return "router";
        case PolicyKind::Rand: return "rand";
        case PolicyKind::Attn: return "attn";
    }
    return "router";
}

Tensor rand_policy(int64_t t, double rho, uint64_t seed) {
    if (rho <= 0.0 || rho >= 1.0) throw ConfigError("rand policy requires rho in (0,1)");
    const int64_t keep = static_cast<int64_t>(std::ceil(rho * static_cast<double>(t)));
    Rng rng(seed);
    Tensor mask({t});
    for (int64_t i : rng.subset(t, keep)) mask.at(i) = 1.0;
    return mask;
}

Tensor attn_policy(const std::vector<Tensor>& head_probs, double rho) {
    if (head_probs.empty()) throw ValueError("attn policy requires attention probabilities");
    const int64_t t = head_probs[0].rows();
    const int64_t keep = static_cast<int64_t>(std::ceil(rho * static_cast<double>(t)));
    std::vector<double> mass(static_cast<size_t>(t), 0.0);
    for (const Tensor& probs : head_probs) {
        for (int64_t i = 0; i < t; ++i)
            for (int64_t j = 0; j <= i; ++j) mass[static_cast<size_t>(j)] += probs.at(i, j);
    }
    std::vector<int64_t> order(static_cast<size_t>(t));
    for (int64_t i = 0; i < t; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        if (mass[static_cast<size_t>(a)] != mass[static_cast<size_t>(b)])
            return mass[static_cast<size_t>(a)] > mass[static_cast<size_t>(b)];
        return a < b;  // ties toward the earlier index
    });
    Tensor mask({t});
    for (int64_t i = 0; i < keep; ++i) mask.at(order[static_cast<size_t>(i)]) = 1.0;
    return mask;
}

}  // namespace kvcat
