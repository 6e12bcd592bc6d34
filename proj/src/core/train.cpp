// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include "train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "checkpoint.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tokenizer.hpp"

namespace kvcat {

using ordered_json = nlohmann::ordered_json;

void TrainConfig::validate_and_normalize() {
    if (rho <= 0.0 || rho >= 1.0) throw ConfigError("train.rho must lie in (0,1)");
    if (tau <= 0.0 || tau >= 1.0) throw ConfigError("train.tau must lie in (0,1)");
    if (seq_len <= 1) throw ConfigError("train.seq_len must exceed 1");
    if (tokens_per_step < seq_len || tokens_per_step % seq_len != 0)
        throw ConfigError("train.tokens_per_step must be a positive multiple of train.seq_len");
    if (total_steps <= 0) throw ConfigError("train.total_steps must be positive");
    if (warmup_steps < 0 || warmup_steps > total_steps)
        throw ConfigError("train.warmup_steps must lie in [0, total_steps]");
    if (clip_norm <= 0.0) throw ConfigError("train.clip_norm must be positive");
    if (log_interval <= 0) throw ConfigError("train.log_interval must be positive");
    if (policy.kind != PolicyKind::Router) lambda_budget = 0.0;
    policy.rho = rho;
}

double LossBreakdown::mean_f() const {
    if (router_fg.empty()) return 1.0;
    double s = 0.0;
    for (const auto& [f, g] : router_fg) s += f;
    return s / static_cast<double>(router_fg.size());
}

double LossBreakdown::mean_g() const {
    if (router_fg.empty()) return 1.0;
    double s = 0.0;
    for (const auto& [f, g] : router_fg) s += g;
    return s / static_cast<double>(router_fg.size());
}

double loss_mask(const Tensor& dense_logits, const Tensor& masked_logits) {
    if (!dense_logits.same_shape(masked_logits)) throw ShapeError("loss_mask logits shape mismatch");
    const int64_t t = dense_logits.rows();
    if (t < 2) throw ValueError("loss_mask needs at least two positions");
    Graph g;
    Tensor dense_pred({t - 1, dense_logits.cols()});
    Tensor masked_pred({t - 1, dense_logits.cols()});
    for (int64_t i = 0; i < t - 1; ++i)
        for (int64_t j = 0; j < dense_logits.cols(); ++j) {
            dense_pred.at(i, j) = dense_logits.at(i, j);
            masked_pred.at(i, j) = masked_logits.at(i, j);
        }
    return g.value(g.kl_rows_from_logits(g.constant(masked_pred), dense_pred)).at(0);
}

double loss_budget(const std::vector<RouterTrace>& traces, double rho) {
    if (rho <= 0.0 || rho >= 1.0) throw ConfigError("loss_budget: rho must lie in (0,1)");
    if (traces.empty()) throw ValueError("loss_budget: no router traces");
    double total = 0.0;
    for (const RouterTrace& tr : traces)
        total += tr.f * tr.g / rho + (1.0 - tr.f) * (1.0 - tr.g) / (1.0 - rho);
    return total / static_cast<double>(traces.size());
}

double loss_anchor(const Tensor& dense_logits, const std::vector<int64_t>& tokens) {
    const int64_t t = static_cast<int64_t>(tokens.size());
    if (t < 2) throw ValueError("loss_anchor needs at least two tokens");
    if (dense_logits.rows() != t) throw ShapeError("loss_anchor logits/token mismatch");
    Graph g;
    auto logits = g.constant(dense_logits);
    auto pred = g.slice_rows(logits, 0, t - 1);
    std::vector<int64_t> targets(tokens.begin() + 1, tokens.end());
    return g.value(g.cross_entropy_rows(pred, targets)).at(0);
}

double lr_at(int64_t step, const TrainConfig& cfg) {
    if (step < 0) throw ValueError("lr_at: negative step");
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    if (step >= cfg.total_steps) return cfg.min_lr;
    const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    const double progress = span > 0.0 ? static_cast<double>(step - cfg.warmup_steps) / span : 1.0;
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * progress));
}

namespace {

std::vector<Tensor*> weight_param_ptrs(TransformerWeights& w) {
    std::vector<Tensor*> out;
    for_each_param(w, [&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
}

std::vector<Tensor*> router_param_ptrs(RouterParams& p) {
    std::vector<Tensor*> out;
    for_each_router_param(p, [&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
}

std::vector<Tensor*> all_params(TrainState& st, const TrainConfig& cfg) {
    std::vector<Tensor*> out = weight_param_ptrs(st.weights);
    if (cfg.policy.kind == PolicyKind::Router)
        for (Tensor* t : router_param_ptrs(st.routers)) out.push_back(t);
    return out;
}

struct SeqOutcome {
    double l_mask = 0.0, l_anchor = 0.0, l_budget = 0.0, total = 0.0;
    double masked_nll = 0.0;
    std::vector<std::pair<double, double>> fg;
    std::vector<Tensor> grads;
};

double tensor_mean(const Tensor& t) {
    double s = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i) s += t.at(i);
    return s / static_cast<double>(t.numel());
}

// Dense + masked forward passes for one sequence in a single graph; the
// combined objective is backpropagated when gradients are requested.
SeqOutcome run_sequence(TrainState& st, const std::vector<int64_t>& tokens, const TrainConfig& cfg,
                        uint64_t mask_seed, bool want_grads) {
    const ModelConfig& mcfg = st.model_config;
    const int64_t t = static_cast<int64_t>(tokens.size());
    if (t < 2) throw ValueError("train: sequences must have at least two tokens");
    const size_t n_sites = mcfg.router_layers.size();
    const bool use_router = cfg.policy.kind == PolicyKind::Router;
    const bool skip_masked = cfg.lambda_mask == 0.0 && cfg.lambda_budget == 0.0;

    Graph g;
    WeightNodes wn = insert_weights(g, st.weights, want_grads);
    std::vector<RouterSiteNodes> rn;
    if (use_router && !skip_masked) rn = insert_router_params(g, st.routers, want_grads);

    ForwardOptions opts;
    opts.want_site_probs = cfg.policy.kind == PolicyKind::Attn && !skip_masked;
    ForwardResult dense = build_forward(g, wn, mcfg, tokens, nullptr, opts);
    Graph::NodeId dense_pred = g.slice_rows(dense.logits, 0, t - 1);
    std::vector<int64_t> targets(tokens.begin() + 1, tokens.end());
    Graph::NodeId anchor = g.cross_entropy_rows(dense_pred, targets);

    SeqOutcome out;
    out.l_anchor = g.value(anchor).at(0);
    Graph::NodeId total = g.affine(anchor, cfg.lambda_anchor, 0.0);

    if (!skip_masked) {
        // Detached teacher: the dense distribution enters the mask loss as a
        // constant, so no gradient reaches the dense path through it.
        Tensor teacher = g.value(dense_pred);

        MaskedSpec spec;
        std::vector<Graph::NodeId> p_nodes(n_sites, -1);
        std::vector<Tensor> site_masks(n_sites);
        if (use_router) {
            spec.make_gate = [&](int site, Graph::NodeId hidden) {
                Graph::NodeId p = build_router_scores(g, rn[static_cast<size_t>(site)], hidden,
                                                      cfg.eps_den);
                p_nodes[static_cast<size_t>(site)] = p;
                Graph::NodeId gate = g.ste_gate(p, cfg.tau);
                site_masks[static_cast<size_t>(site)] = g.value(gate);
                return gate;
            };
        } else if (cfg.policy.kind == PolicyKind::Rand) {
            for (size_t s = 0; s < n_sites; ++s)
                site_masks[s] = rand_policy(t, cfg.rho, derive_seed(mask_seed, "site", s));
            spec.hard_masks = site_masks;
        } else {
            for (size_t s = 0; s < n_sites; ++s)
                site_masks[s] = attn_policy(dense.site_probs[s], cfg.rho);
            spec.hard_masks = site_masks;
        }

        ForwardResult masked = build_forward(g, wn, mcfg, tokens, &spec);
        Graph::NodeId masked_pred = g.slice_rows(masked.logits, 0, t - 1);
        Graph::NodeId lmask = g.kl_rows_from_logits(masked_pred, teacher);
        out.l_mask = g.value(lmask).at(0);
        out.masked_nll = g.value(g.cross_entropy_rows(masked_pred, targets)).at(0);
        total = g.add(total, g.affine(lmask, cfg.lambda_mask, 0.0));

        if (use_router) {
            Graph::NodeId budget_sum = -1;
            for (size_t s = 0; s < n_sites; ++s) {
                const double f = tensor_mean(site_masks[s]);
                Graph::NodeId g_node =
                    g.affine(g.sum(p_nodes[s]), 1.0 / static_cast<double>(t), 0.0);
                out.fg.emplace_back(f, g.value(g_node).at(0));
                // F is a constant here: the budget gradient flows via G only.
                const double slope = f / cfg.rho - (1.0 - f) / (1.0 - cfg.rho);
                const double intercept = (1.0 - f) / (1.0 - cfg.rho);
                Graph::NodeId b = g.affine(g_node, slope, intercept);
                budget_sum = budget_sum < 0 ? b : g.add(budget_sum, b);
            }
            Graph::NodeId budget =
                g.affine(budget_sum, 1.0 / static_cast<double>(n_sites), 0.0);
            out.l_budget = g.value(budget).at(0);
            if (cfg.lambda_budget != 0.0)
                total = g.add(total, g.affine(budget, cfg.lambda_budget, 0.0));
        } else {
            for (size_t s = 0; s < n_sites; ++s) {
                const double f = tensor_mean(site_masks[s]);
                out.fg.emplace_back(f, f);
            }
        }
    } else {
        out.masked_nll = out.l_anchor;
    }

    out.total = g.value(total).at(0);
    if (want_grads) {
        g.backward(total);
        out.grads = collect_weight_grads(g, wn);
        if (use_router && !skip_masked)
            for (Tensor& gr : collect_router_grads(g, rn)) out.grads.push_back(std::move(gr));
        else if (use_router)
            for (Tensor* p : router_param_ptrs(st.routers)) out.grads.push_back(Tensor::zeros(p->shape()));
    }
    return out;
}

LossBreakdown fold_outcomes(const std::vector<SeqOutcome>& outs, const TrainConfig& cfg) {
    LossBreakdown b;
    const double inv = 1.0 / static_cast<double>(outs.size());
    for (const SeqOutcome& o : outs) {
        b.l_mask += o.l_mask * inv;
        b.l_anchor += o.l_anchor * inv;
        b.l_budget += o.l_budget * inv;
        if (b.router_fg.size() < o.fg.size()) b.router_fg.resize(o.fg.size(), {0.0, 0.0});
        for (size_t s = 0; s < o.fg.size(); ++s) {
            b.router_fg[s].first += o.fg[s].first * inv;
            b.router_fg[s].second += o.fg[s].second * inv;
        }
    }
    b.total = cfg.lambda_mask * b.l_mask + cfg.lambda_budget * b.l_budget +
              cfg.lambda_anchor * b.l_anchor;
    return b;
}

}  // namespace

TrainState init_train_state(const ModelConfig& mcfg, const TrainConfig& cfg) {
    mcfg.validate();
    TrainState st;
    st.model_config = mcfg;
    st.weights = init_weights(mcfg, mcfg.seed);
    st.routers = init_router_params(mcfg, cfg.router_dim, cfg.tau, mcfg.seed);
    return st;
}

LossBreakdown train_step(TrainState& st, const std::vector<std::vector<int64_t>>& batch,
                         const TrainConfig& cfg) {
    if (batch.empty()) throw ValueError("train_step: empty batch");
    std::vector<SeqOutcome> outs;
    outs.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        const uint64_t mask_seed =
            derive_seed(cfg.seed, "rand_policy",
                        static_cast<uint64_t>(st.step) * 65536ULL + i);
        outs.push_back(run_sequence(st, batch[i], cfg, mask_seed, true));
    }
    LossBreakdown breakdown = fold_outcomes(outs, cfg);
    if (!std::isfinite(breakdown.total))
        throw NumericError("train_step: non-finite loss at step " + std::to_string(st.step) +
                           " (mask=" + std::to_string(breakdown.l_mask) +
                           ", anchor=" + std::to_string(breakdown.l_anchor) +
                           ", budget=" + std::to_string(breakdown.l_budget) + ")");

    // Fixed-order accumulation across micro-batches, then the mean.
    std::vector<Tensor> grads = std::move(outs[0].grads);
    for (size_t i = 1; i < outs.size(); ++i)
        for (size_t k = 0; k < grads.size(); ++k)
            for (int64_t j = 0; j < grads[k].numel(); ++j)
                grads[k].at(j) += outs[i].grads[k].at(j);
    const double inv = 1.0 / static_cast<double>(outs.size());
    for (Tensor& gt : grads)
        for (int64_t j = 0; j < gt.numel(); ++j) gt.at(j) *= inv;

    clip_global_norm(grads, cfg.clip_norm);
    std::vector<Tensor*> params = all_params(st, cfg);
    if (!st.opt.initialized()) st.opt.init(params);
    AdamWConfig acfg;
    acfg.lr = lr_at(st.step + 1, cfg);
    acfg.beta1 = cfg.beta1;
    acfg.beta2 = cfg.beta2;
    acfg.eps = cfg.adam_eps;
    acfg.weight_decay = cfg.weight_decay;
    st.opt.step(params, grads, acfg);
    st.step += 1;
    return breakdown;
}

LossBreakdown eval_losses(TrainState& st, const std::vector<std::vector<int64_t>>& batch,
                          const TrainConfig& cfg, int64_t step_for_masks) {
    if (batch.empty()) throw ValueError("eval_losses: empty batch");
    std::vector<SeqOutcome> outs;
    outs.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        const uint64_t mask_seed =
            derive_seed(cfg.seed, "val_rand", static_cast<uint64_t>(step_for_masks) * 65536ULL + i);
        outs.push_back(run_sequence(st, batch[i], cfg, mask_seed, false));
    }
    return fold_outcomes(outs, cfg);
}

namespace {

struct ValData {
    std::vector<std::vector<int64_t>> seqs;
};

// Dense and masked next-token NLL over the validation sequences.
std::pair<double, double> validation_nll(TrainState& st, const TrainConfig& cfg,
                                         const ValData& val) {
    double dense_sum = 0.0, masked_sum = 0.0;
    for (size_t i = 0; i < val.seqs.size(); ++i) {
        const uint64_t mask_seed = derive_seed(cfg.seed, "val_rand", i);
        SeqOutcome o = run_sequence(st, val.seqs[i], cfg, mask_seed, false);
        dense_sum += o.l_anchor;
        masked_sum += o.masked_nll;
    }
    const double inv = 1.0 / static_cast<double>(val.seqs.size());
    return {dense_sum * inv, masked_sum * inv};
}

}  // namespace

void save_train_state(const TrainState& st, const std::string& path) {
    ArrayFile f;
    f.set("kind", "model");
    config_to_meta(st.model_config, f);
    f.set("train_step", std::to_string(st.step));
    for_each_param(st.weights, [&](const std::string& n, const Tensor& t) { f.add(n, t); });
    for_each_router_param(st.routers, [&](const std::string& n, const Tensor& t) { f.add(n, t); });
    if (st.opt.initialized()) {
        f.set("adam_t", std::to_string(st.opt.step_count()));
        auto& m = const_cast<TrainState&>(st).opt.moments_m();
        auto& v = const_cast<TrainState&>(st).opt.moments_v();
        for (size_t i = 0; i < m.size(); ++i) {
            f.add("adam.m." + std::to_string(i), m[i]);
            f.add("adam.v." + std::to_string(i), v[i]);
        }
    }
    f.save(path);
}

TrainState load_train_state(const std::string& path, const TrainConfig& cfg) {
    ArrayFile f = ArrayFile::load(path);
    ModelConfig mcfg = config_from_meta(f);
    TrainState st = init_train_state(mcfg, cfg);
    for_each_param(st.weights, [&](const std::string& n, Tensor& t) {
        const Tensor* src = f.find(n);
        if (!src) throw FormatError("train state: missing array '" + n + "'");
        t = *src;
    });
    bool have_router = true;
    for_each_router_param(st.routers, [&](const std::string& n, Tensor& t) {
        const Tensor* src = f.find(n);
        if (src)
            t = *src;
        else
            have_router = false;
    });
    (void)have_router;
    if (f.has("train_step")) st.step = std::stoll(f.get("train_step"));
    if (f.has("adam_t")) {
        std::vector<Tensor*> params;  // positional moments follow all_params order
        TrainConfig c2 = cfg;
        params = all_params(st, c2);
        st.opt.init(params);
        auto& m = st.opt.moments_m();
        auto& v = st.opt.moments_v();
        for (size_t i = 0; i < m.size(); ++i) {
            const Tensor* ms = f.find("adam.m." + std::to_string(i));
            const Tensor* vs = f.find("adam.v." + std::to_string(i));
            if (ms && ms->same_shape(m[i])) m[i] = *ms;
            if (vs && vs->same_shape(v[i])) v[i] = *vs;
        }
        st.opt.set_step_count(std::stoll(f.get("adam_t")));
    }
    return st;
}

TrainRunOutputs train_run(const ModelConfig& mcfg, const TrainConfig& cfg_in,
                          const std::string& corpus_text, const std::string& out_dir,
                          bool resume) {
    TrainConfig cfg = cfg_in;
    cfg.validate_and_normalize();
    std::filesystem::create_directories(out_dir);

    Tokenizer tok;
    const std::vector<int64_t> tokens = tok.encode(corpus_text);
    const int64_t n_blocks = static_cast<int64_t>(tokens.size()) / cfg.seq_len;
    if (n_blocks < 2) throw ConfigError("train: corpus too small for the configured seq_len");
    int64_t val_blocks = std::max<int64_t>(1, static_cast<int64_t>(
                                                  std::floor(cfg.val_fraction * static_cast<double>(n_blocks))));
    val_blocks = std::min(val_blocks, n_blocks - 1);
    const int64_t train_blocks = n_blocks - val_blocks;

    auto block_at = [&](int64_t block) {
        std::vector<int64_t> seq(tokens.begin() + block * cfg.seq_len,
                                 tokens.begin() + (block + 1) * cfg.seq_len);
        return seq;
    };
    ValData val;
    for (int64_t i = 0; i < cfg.val_sequences; ++i)
        val.seqs.push_back(block_at(train_blocks + (i % val_blocks)));

    TrainState st;
    if (resume) {
        if (cfg.init_checkpoint.empty())
            throw ConfigError("train: resume requires train.init_checkpoint");
        st = load_train_state(cfg.init_checkpoint, cfg);
    } else {
        st = init_train_state(mcfg, cfg);
        if (!cfg.init_checkpoint.empty()) {
            // Warm start: weights (and routers when present), fresh optimizer.
            TrainState loaded = load_train_state(cfg.init_checkpoint, cfg);
            st.weights = std::move(loaded.weights);
            st.routers = std::move(loaded.routers);
            st.model_config = loaded.model_config;
        }
    }

    const std::string metrics_path = out_dir + "/metrics.jsonl";
    std::ofstream metrics(metrics_path, resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot open metrics log '" + metrics_path + "'");

    const int64_t batch = cfg.batch_size();
    while (st.step < cfg.total_steps) {
        std::vector<std::vector<int64_t>> seqs;
        seqs.reserve(static_cast<size_t>(batch));
        for (int64_t i = 0; i < batch; ++i)
            seqs.push_back(block_at((st.step * batch + i) % train_blocks));
        const double lr = lr_at(st.step + 1, cfg);
        LossBreakdown b = train_step(st, seqs, cfg);
        if (st.step % cfg.log_interval == 0) {
            auto [val_dense, val_masked] = validation_nll(st, cfg, val);
            ordered_json row;
            row["step"] = st.step;
            row["lr"] = lr;
            row["l_mask"] = b.l_mask;
            row["l_anchor"] = b.l_anchor;
            row["l_budget"] = b.l_budget;
            row["total"] = b.total;
            row["F"] = b.mean_f();
            row["G"] = b.mean_g();
            row["val_dense_nll"] = val_dense;
            row["val_masked_nll"] = val_masked;
            metrics << row.dump() << "\n";
            metrics.flush();
        }
        if (cfg.ckpt_interval > 0 && st.step % cfg.ckpt_interval == 0 && st.step < cfg.total_steps)
            save_train_state(st, out_dir + "/checkpoint_step" + std::to_string(st.step) + ".kvcat");
    }

    TrainRunOutputs out;
    out.checkpoint_path = out_dir + "/checkpoint_final.kvcat";
    save_train_state(st, out.checkpoint_path);
    out.metrics_path = metrics_path;
    out.weights = std::move(st.weights);
    out.routers = std::move(st.routers);
    return out;
}

}  // namespace kvcat
