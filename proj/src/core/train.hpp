// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "model.hpp"
#include "optim.hpp"
#include "router.hpp"
#include "tensor.hpp"

namespace kvcat {

struct TrainConfig {
    double lambda_mask = 1.0;
    double lambda_anchor = 1.0;
    double lambda_budget = 0.1;
    double rho = 0.5;
    double peak_lr = 1e-3;
    double min_lr = 5e-5;
    int64_t warmup_steps = 100;
    int64_t total_steps = 2000;
    int64_t tokens_per_step = 1024;
    int64_t seq_len = 256;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    uint64_t seed = 42;
    SparsificationPolicy policy;
    int64_t router_dim = 64;
    double tau = 0.5;
    double eps_den = 1e-6;
    int64_t log_interval = 20;
    int64_t ckpt_interval = 0;  // 0 disables intermediate checkpoints
    double val_fraction = 0.05;
    int64_t val_sequences = 8;
    std::string init_checkpoint;

    int64_t batch_size() const { return tokens_per_step / seq_len; }
    // Normalizes and checks invariants; forces lambda_budget to 0 for the
    // fixed (rand/attn) policies, which satisfy the keep rate by construction.
    void validate_and_normalize();
};

struct LossBreakdown {
    double l_mask = 0.0, l_anchor = 0.0, l_budget = 0.0, total = 0.0;
    std::vector<std::pair<double, double>> router_fg;  // per site (F, G)

    double mean_f() const;
    double mean_g() const;
};

// --- loss surfaces (plain, per-operation contracts) ------------------------

// Mean KL(stop_grad(softmax(dense)) || softmax(masked)) over prediction
// rows (positions 2..T). No gradient path reaches the dense logits.
double loss_mask(const Tensor& dense_logits, const Tensor& masked_logits);

// rho^-1 F G + (1-rho)^-1 (1-F)(1-G), averaged over router sites.
double loss_budget(const std::vector<RouterTrace>& traces, double rho);

// Mean next-token cross entropy on the dense pass.
double loss_anchor(const Tensor& dense_logits, const std::vector<int64_t>& tokens);

// Linear warmup to peak over warmup_steps, then cosine decay to min_lr.
double lr_at(int64_t step, const TrainConfig& cfg);

// --- training loop ---------------------------------------------------------

struct TrainState {
    ModelConfig model_config;
    TransformerWeights weights;
    RouterParams routers;
    AdamW opt;
    int64_t step = 0;
};

TrainState init_train_state(const ModelConfig& mcfg, const TrainConfig& cfg);

// One optimizer step over a batch of fixed-length sequences: dense forward,
// masked forward under the active policy, Eq.-style combined loss, one
// backward, global-norm clip, joint AdamW update of model and routers.
LossBreakdown train_step(TrainState& st, const std::vector<std::vector<int64_t>>& batch,
                         const TrainConfig& cfg);

// Loss breakdown without any update (used for validation-style probes).
LossBreakdown eval_losses(TrainState& st, const std::vector<std::vector<int64_t>>& batch,
                          const TrainConfig& cfg, int64_t step_for_masks);

struct TrainRunOutputs {
    TransformerWeights weights;
    RouterParams routers;
    std::string checkpoint_path;
    std::string metrics_path;
};

// Full run over a byte corpus; emits metrics.jsonl (one record per
// log_interval steps) and checkpoint files under out_dir.
TrainRunOutputs train_run(const ModelConfig& mcfg, const TrainConfig& cfg,
                          const std::string& corpus_text, const std::string& out_dir,
                          bool resume = false);

// Train-state (de)serialization: a model checkpoint plus router arrays and
// optimizer moments in one KVCAT1 file.
void save_train_state(const TrainState& st, const std::string& path);
TrainState load_train_state(const std::string& path, const TrainConfig& cfg);

}  // namespace kvcat
