// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "graph.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace kvcat {

// Learned linear-attention router, one instance per compression site.
// At initialization w_p = -I and alpha = 0, which scores every token with
// p_t = 1: training starts from the dense model.
struct RouterSiteParams {
    Tensor wq, wk, wv;  // [d_model x d_r]
    Tensor wo;          // [d_r x d_model]
    Tensor wp;          // [d_model x d_model]
    Tensor alpha;       // scalar
};

struct RouterParams {
    int64_t d_r = 64;
    double tau = 0.5;
    double eps_den = 1e-6;
    std::vector<RouterSiteParams> sites;
};

RouterParams init_router_params(const ModelConfig& cfg, int64_t d_r, double tau, uint64_t seed);

void for_each_router_param(RouterParams& p,
                           const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_router_param(const RouterParams& p,
                           const std::function<void(const std::string&, const Tensor&)>& fn);
uint64_t router_checksum(const RouterParams& p);

struct RouterSiteNodes {
    Graph::NodeId wq, wk, wv, wo, wp, alpha;
};

std::vector<RouterSiteNodes> insert_router_params(Graph& g, const RouterParams& p,
                                                  bool requires_grad);
std::vector<Tensor> collect_router_grads(const Graph& g, const std::vector<RouterSiteNodes>& nodes);

// Keep scores p[T] in [0,1] from the site's input hiddens (graph version).
Graph::NodeId build_router_scores(Graph& g, const RouterSiteNodes& site, Graph::NodeId hidden,
                                  double eps_den);

// Plain evaluation of the scores for one site.
Tensor router_scores(const RouterParams& params, int64_t site_index, const Tensor& hidden);

// Hard mask + straight-through gate values for given scores.
struct RouterTrace {
    Tensor scores;  // p[T]
    Tensor mask;    // m[T] binary
    double f = 0.0;  // mean(m)
    double g = 0.0;  // mean(p)
};

RouterTrace trace_from_scores(const Tensor& scores, double tau);

enum class PolicyKind { Router, Rand, Attn };

struct SparsificationPolicy {
    PolicyKind kind = PolicyKind::Router;
    double rho = 0.5;
    uint64_t seed = 0;
};

PolicyKind policy_kind_from_string(const std::string& s);
std::string policy_kind_to_string(PolicyKind k);

// Exact-count random keep mask: ceil(rho*T) ones, uniform over subsets.
Tensor rand_policy(int64_t t, double rho, uint64_t seed);

// H2O-style attention-mass mask: per-source mass summed over heads and
// valid (causal) query positions; keeps the top ceil(rho*T) sources, ties
// broken toward the earlier index.
Tensor attn_policy(const std::vector<Tensor>& head_probs, double rho);

}  // namespace kvcat
