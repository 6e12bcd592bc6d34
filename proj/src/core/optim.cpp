// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include "optim.hpp"

#include <cmath>

#include "errors.hpp"

namespace kvcat {

void AdamW::init(const std::vector<Tensor*>& params) {
    m_.clear();
    v_.clear();
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Tensor* p : params) {
        m_.push_back(Tensor::zeros(p->shape()));
        v_.push_back(Tensor::zeros(p->shape()));
    }
    t_ = 0;
}

void AdamW::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                 const AdamWConfig& cfg) {
    if (params.size() != grads.size() || params.size() != m_.size())
        throw ShapeError("AdamW::step: parameter/gradient count mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
    for (size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = grads[k];
        if (!p.same_shape(g)) throw ShapeError("AdamW::step: gradient shape mismatch");
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double gi = g.at(i);
            m.at(i) = cfg.beta1 * m.at(i) + (1.0 - cfg.beta1) * gi;
            v.at(i) = cfg.beta2 * v.at(i) + (1.0 - cfg.beta2) * gi * gi;
            const double mhat = m.at(i) / bc1;
            const double vhat = v.at(i) / bc2;
            p.at(i) -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.at(i));
        }
    }
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
    if (max_norm <= 0.0) throw ValueError("clip_global_norm: max_norm must be positive");
    double sq = 0.0;
    for (const Tensor& g : grads)
        for (int64_t i = 0; i < g.numel(); ++i) sq += g.at(i) * g.at(i);
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return 1.0;
    const double scale = max_norm / norm;
    for (Tensor& g : grads)
        for (int64_t i = 0; i < g.numel(); ++i) g.at(i) *= scale;
    return scale;
}

}  // namespace kvcat
