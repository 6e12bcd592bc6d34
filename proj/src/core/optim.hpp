// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace kvcat {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam with bias-corrected moments. One state entry
// per parameter, indexed positionally against a fixed parameter order.
class AdamW {
public:
    void init(const std::vector<Tensor*>& params);
    bool initialized() const { return !m_.empty(); }

    // Applies one update in place. `grads` must be positionally aligned
    // with `params`.
    void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
              const AdamWConfig& cfg);

    int64_t step_count() const { return t_; }
    std::vector<Tensor>& moments_m() { return m_; }
    std::vector<Tensor>& moments_v() { return v_; }
    void set_step_count(int64_t t) { t_ = t; }

private:
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    int64_t t_ = 0;
};

// Scales all gradients in place so the global L2 norm does not exceed
// max_norm. Returns the applied scale (1.0 when already within bound).
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

}  // namespace kvcat
