// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include "graph.hpp"

#include <cmath>

namespace kvcat {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

double row_logsumexp(const double* row, int64_t n) {
    double mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    return mx + std::log(s);
}

}  // namespace

Graph::NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Graph::grad_slot(NodeId id) {
    Node& n = at(id);
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
}

Graph::NodeId Graph::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.op = Op::Leaf;
    n.requires_grad = requires_grad;
    return push(n);
}

Graph::NodeId Graph::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
    Node n;
    n.value = kvcat::matmul(value(a), value(b), trans_a, trans_b);
    n.op = Op::MatMul;
    n.parent0 = a;
    n.parent1 = b;
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::add(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw ShapeError("add shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
    Node n;
    n.value = Tensor::zeros(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) n.value.at(i) = ta.at(i) + tb.at(i);
    n.op = Op::Add;
    n.parent0 = a;
    n.parent1 = b;
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::add_rowvec(NodeId x, NodeId b) {
    const Tensor& tx = value(x);
    const Tensor& tb = value(b);
    if (tb.rank() != 1 || tb.dim(0) != tx.cols())
        throw ShapeError("add_rowvec expects row vector matching columns");
    Node n;
    n.value = Tensor::zeros(tx.shape());
    for (int64_t i = 0; i < tx.rows(); ++i)
        for (int64_t j = 0; j < tx.cols(); ++j) n.value.at(i, j) = tx.at(i, j) + tb.at(j);
    n.op = Op::AddRowVec;
    n.parent0 = x;
    n.parent1 = b;
    n.requires_grad = at(x).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::mul(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw ShapeError("mul shape mismatch");
    Node n;
    n.value = Tensor::zeros(ta.shape());
    for (int64_t i = 0; i < ta.numel(); ++i) n.value.at(i) = ta.at(i) * tb.at(i);
    n.op = Op::Mul;
    n.parent0 = a;
    n.parent1 = b;
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::mul_scalar(NodeId x, NodeId s) {
    const Tensor& tx = value(x);
    const Tensor& ts = value(s);
    if (ts.numel() != 1) throw ShapeError("mul_scalar expects scalar second operand");
    Node n;
    n.value = Tensor::zeros(tx.shape());
    const double sv = ts.at(0);
    for (int64_t i = 0; i < tx.numel(); ++i) n.value.at(i) = sv * tx.at(i);
    n.op = Op::MulScalar;
    n.parent0 = x;
    n.parent1 = s;
    n.requires_grad = at(x).requires_grad || at(s).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::affine(NodeId x, double a, double b) {
    const Tensor& tx = value(x);
    Node n;
    n.value = Tensor::zeros(tx.shape());
    for (int64_t i = 0; i < tx.numel(); ++i) n.value.at(i) = a * tx.at(i) + b;
    n.op = Op::Affine;
    n.parent0 = x;
    n.aux_a = a;
    n.aux_b = b;
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::concat_rows(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.cols() != tb.cols()) throw ShapeError("concat_rows column mismatch");
    Node n;
    n.value = Tensor::zeros({ta.rows() + tb.rows(), ta.cols()});
    for (int64_t i = 0; i < ta.rows(); ++i)
        for (int64_t j = 0; j < ta.cols(); ++j) n.value.at(i, j) = ta.at(i, j);
    for (int64_t i = 0; i < tb.rows(); ++i)
        for (int64_t j = 0; j < tb.cols(); ++j) n.value.at(ta.rows() + i, j) = tb.at(i, j);
    n.op = Op::ConcatRows;
    n.parent0 = a;
    n.parent1 = b;
    n.aux_i = ta.rows();
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::concat_cols(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.rows() != tb.rows()) throw ShapeError("concat_cols row mismatch");
    Node n;
    n.value = Tensor::zeros({ta.rows(), ta.cols() + tb.cols()});
    for (int64_t i = 0; i < ta.rows(); ++i) {
        for (int64_t j = 0; j < ta.cols(); ++j) n.value.at(i, j) = ta.at(i, j);
        for (int64_t j = 0; j < tb.cols(); ++j) n.value.at(i, ta.cols() + j) = tb.at(i, j);
    }
    n.op = Op::ConcatCols;
    n.parent0 = a;
    n.parent1 = b;
    n.aux_i = ta.cols();
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::slice_cols(NodeId x, int64_t start, int64_t len) {
    const Tensor& tx = value(x);
    if (start < 0 || len <= 0 || start + len > tx.cols()) throw ShapeError("slice_cols out of range");
    Node n;
    n.value = Tensor::zeros({tx.rows(), len});
    for (int64_t i = 0; i < tx.rows(); ++i)
        for (int64_t j = 0; j < len; ++j) n.value.at(i, j) = tx.at(i, start + j);
    n.op = Op::SliceCols;
    n.parent0 = x;
    n.aux_i = start;
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::slice_rows(NodeId x, int64_t start, int64_t len) {
    const Tensor& tx = value(x);
    if (start < 0 || len <= 0 || start + len > tx.rows()) throw ShapeError("slice_rows out of range");
    Node n;
    n.value = Tensor::zeros({len, tx.cols()});
    for (int64_t i = 0; i < len; ++i)
        for (int64_t j = 0; j < tx.cols(); ++j) n.value.at(i, j) = tx.at(start + i, j);
    n.op = Op::SliceRows;
    n.parent0 = x;
    n.aux_i = start;
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::masked_row_softmax(NodeId logits, const Tensor& mask, double scale) {
    const Tensor& tx = value(logits);
    if (!mask.same_shape(tx)) throw ShapeError("softmax mask shape mismatch");
    Node n;
    n.value = Tensor::zeros(tx.shape());
    const int64_t rows = tx.rows(), cols = tx.cols();
    for (int64_t i = 0; i < rows; ++i) {
        double mx = -HUGE_VAL;
        for (int64_t j = 0; j < cols; ++j)
            if (mask.at(i, j) != 0.0) mx = std::max(mx, scale * tx.at(i, j));
        if (mx == -HUGE_VAL) throw ValueError("masked_row_softmax: all-zero mask row");
        double z = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            if (mask.at(i, j) != 0.0) {
                double e = std::exp(scale * tx.at(i, j) - mx);
                n.value.at(i, j) = e;
                z += e;
            }
        }
        for (int64_t j = 0; j < cols; ++j)
            if (mask.at(i, j) != 0.0) n.value.at(i, j) /= z;
    }
    n.op = Op::MaskedRowSoftmax;
    n.parent0 = logits;
    n.aux_a = scale;
    n.aux_tensor = std::make_shared<Tensor>(mask);
    n.requires_grad = at(logits).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::gated_masked_softmax(NodeId logits, NodeId gate, const Tensor& mask, double scale,
                                          int64_t self_offset) {
    const Tensor& tx = value(logits);
    const Tensor& tg = value(gate);
    if (!mask.same_shape(tx)) throw ShapeError("gated softmax mask shape mismatch");
    if (tg.rank() != 1 || tg.dim(0) != tx.cols()) throw ShapeError("gate must match key columns");
    Node n;
    n.value = Tensor::zeros(tx.shape());
    const int64_t rows = tx.rows(), cols = tx.cols();
    for (int64_t i = 0; i < rows; ++i) {
        double mx = -HUGE_VAL;
        for (int64_t j = 0; j < cols; ++j)
            if (mask.at(i, j) != 0.0) mx = std::max(mx, scale * tx.at(i, j));
        if (mx == -HUGE_VAL) throw ValueError("gated_masked_softmax: all-zero mask row");
        double z = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            if (mask.at(i, j) == 0.0) continue;
            const bool self = self_offset >= 0 && j == i + self_offset;
            const double g = self ? 1.0 : tg.at(j);
            double e = g * std::exp(scale * tx.at(i, j) - mx);
            n.value.at(i, j) = e;
            z += e;
        }
        if (z <= 0.0) throw ValueError("gated_masked_softmax: row with zero total mass");
        for (int64_t j = 0; j < cols; ++j)
            if (mask.at(i, j) != 0.0) n.value.at(i, j) /= z;
    }
    n.op = Op::GatedMaskedSoftmax;
    n.parent0 = logits;
    n.parent1 = gate;
    n.aux_a = scale;
    n.aux_i = self_offset;
    n.aux_tensor = std::make_shared<Tensor>(mask);
    n.requires_grad = at(logits).requires_grad || at(gate).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::rms_norm(NodeId x, NodeId gain, double eps) {
    const Tensor& tx = value(x);
    const Tensor& tg = value(gain);
    const int64_t d = tx.cols();
    if (d <= 0) throw ShapeError("rms_norm requires positive feature dimension");
    if (tg.rank() != 1 || tg.dim(0) != d) throw ShapeError("rms_norm gain shape mismatch");
    Node n;
    n.value = Tensor::zeros(tx.shape());
    for (int64_t i = 0; i < tx.rows(); ++i) {
        double ms = 0.0;
        for (int64_t j = 0; j < d; ++j) ms += tx.at(i, j) * tx.at(i, j);
        const double r = std::sqrt(ms / static_cast<double>(d) + eps);
        for (int64_t j = 0; j < d; ++j) n.value.at(i, j) = tg.at(j) * tx.at(i, j) / r;
    }
    n.op = Op::RmsNorm;
    n.parent0 = x;
    n.parent1 = gain;
    n.aux_a = eps;
    n.requires_grad = at(x).requires_grad || at(gain).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::gelu(NodeId x) {
    const Tensor& tx = value(x);
    Node n;
    n.value = Tensor::zeros(tx.shape());
    for (int64_t i = 0; i < tx.numel(); ++i) {
        const double v = tx.at(i);
        const double u = kGeluC * (v + kGeluK * v * v * v);
        n.value.at(i) = 0.5 * v * (1.0 + std::tanh(u));
    }
    n.op = Op::Gelu;
    n.parent0 = x;
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::elu_plus_one(NodeId x) {
    const Tensor& tx = value(x);
    Node n;
    n.value = Tensor::zeros(tx.shape());
    for (int64_t i = 0; i < tx.numel(); ++i) {
        const double v = tx.at(i);
        n.value.at(i) = v >= 0.0 ? v + 1.0 : std::exp(v);
    }
    n.op = Op::EluPlusOne;
    n.parent0 = x;
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::gather_rows(NodeId table, const std::vector<int64_t>& ids) {
    const Tensor& tt = value(table);
    const int64_t v = tt.rows(), d = tt.cols();
    Node n;
    n.value = Tensor::zeros({static_cast<int64_t>(ids.size()), d});
    for (size_t t = 0; t < ids.size(); ++t) {
        const int64_t id = ids[t];
        if (id < 0 || id >= v) throw IndexError("gather_rows id out of range");
        for (int64_t j = 0; j < d; ++j) n.value.at(static_cast<int64_t>(t), j) = tt.at(id, j);
    }
    n.op = Op::GatherRows;
    n.parent0 = table;
    n.aux_ids = ids;
    n.requires_grad = at(table).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::row_sum(NodeId x) {
    const Tensor& tx = value(x);
    Node n;
    n.value = Tensor::zeros({tx.rows()});
    for (int64_t i = 0; i < tx.rows(); ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < tx.cols(); ++j) s += tx.at(i, j);
        n.value.at(i) = s;
    }
    n.op = Op::RowSum;
    n.parent0 = x;
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::row_div(NodeId x, NodeId denom, double eps) {
    const Tensor& tx = value(x);
    const Tensor& td = value(denom);
    if (td.rank() != 1 || td.dim(0) != tx.rows()) throw ShapeError("row_div denom shape mismatch");
    Node n;
    n.value = Tensor::zeros(tx.shape());
    for (int64_t i = 0; i < tx.rows(); ++i)
        for (int64_t j = 0; j < tx.cols(); ++j) n.value.at(i, j) = tx.at(i, j) / (td.at(i) + eps);
    n.op = Op::RowDiv;
    n.parent0 = x;
    n.parent1 = denom;
    n.aux_a = eps;
    n.requires_grad = at(x).requires_grad || at(denom).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::normalize_rows(NodeId x) {
    const Tensor& tx = value(x);
    Node n;
    n.value = Tensor::zeros(tx.shape());
    for (int64_t i = 0; i < tx.rows(); ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < tx.cols(); ++j) s += tx.at(i, j) * tx.at(i, j);
        const double norm = std::sqrt(s);
        if (norm == 0.0) throw ValueError("normalize_rows: zero-norm row");
        for (int64_t j = 0; j < tx.cols(); ++j) n.value.at(i, j) = tx.at(i, j) / norm;
    }
    n.op = Op::NormalizeRows;
    n.parent0 = x;
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::row_dot(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) throw ShapeError("row_dot shape mismatch");
    Node n;
    n.value = Tensor::zeros({ta.rows()});
    for (int64_t i = 0; i < ta.rows(); ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < ta.cols(); ++j) s += ta.at(i, j) * tb.at(i, j);
        n.value.at(i) = s;
    }
    n.op = Op::RowDot;
    n.parent0 = a;
    n.parent1 = b;
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::sum(NodeId x) {
    const Tensor& tx = value(x);
    Node n;
    double s = 0.0;
    for (int64_t i = 0; i < tx.numel(); ++i) s += tx.at(i);
    n.value = Tensor::scalar(s);
    n.op = Op::Sum;
    n.parent0 = x;
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::cross_entropy_rows(NodeId logits, const std::vector<int64_t>& targets) {
    const Tensor& tx = value(logits);
    if (targets.empty()) throw ValueError("cross_entropy_rows: empty target list");
    if (static_cast<int64_t>(targets.size()) != tx.rows())
        throw ShapeError("cross_entropy_rows: target count must match rows");
    const int64_t v = tx.cols();
    double total = 0.0;
    for (int64_t i = 0; i < tx.rows(); ++i) {
        const int64_t t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= v) throw IndexError("cross_entropy_rows: target out of range");
        const double lse = row_logsumexp(tx.data() + i * v, v);
        total += -(tx.at(i, t) - lse);
    }
    Node n;
    n.value = Tensor::scalar(total / static_cast<double>(tx.rows()));
    n.op = Op::CrossEntropyRows;
    n.parent0 = logits;
    n.aux_ids = targets;
    n.requires_grad = at(logits).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::kl_rows(NodeId q_logits, Tensor teacher_probs) {
    const Tensor& tq = value(q_logits);
    if (!teacher_probs.same_shape(tq)) throw ShapeError("kl_rows teacher shape mismatch");
    for (int64_t i = 0; i < teacher_probs.numel(); ++i)
        if (teacher_probs.at(i) < 0.0) throw ValueError("kl_rows: negative probability entry");
    // log p with the 0*log(0) := 0 convention handled at evaluation time.
    Tensor logp = Tensor::zeros(teacher_probs.shape());
    for (int64_t i = 0; i < teacher_probs.numel(); ++i)
        logp.at(i) = teacher_probs.at(i) > 0.0 ? std::log(teacher_probs.at(i)) : 0.0;
    Node n;
    n.op = Op::KlRows;
    n.parent0 = q_logits;
    n.aux_tensor = std::make_shared<Tensor>(std::move(teacher_probs));
    n.aux_tensor2 = std::make_shared<Tensor>(std::move(logp));
    n.requires_grad = at(q_logits).requires_grad;
    const Tensor& p = *n.aux_tensor;
    const Tensor& lp = *n.aux_tensor2;
    const int64_t v = tq.cols();
    double total = 0.0;
    for (int64_t i = 0; i < tq.rows(); ++i) {
        const double lse = row_logsumexp(tq.data() + i * v, v);
        double row = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            const double pij = p.at(i, j);
            if (pij > 0.0) row += pij * (lp.at(i, j) - (tq.at(i, j) - lse));
        }
        total += row;
    }
    n.value = Tensor::scalar(total / static_cast<double>(tq.rows()));
    return push(std::move(n));
}

Graph::NodeId Graph::kl_rows_from_logits(NodeId q_logits, Tensor teacher_logits) {
    const Tensor& tq = value(q_logits);
    if (!teacher_logits.same_shape(tq)) throw ShapeError("kl_rows teacher shape mismatch");
    const int64_t v = tq.cols();
    Tensor probs = Tensor::zeros(teacher_logits.shape());
    Tensor logp = Tensor::zeros(teacher_logits.shape());
    for (int64_t i = 0; i < teacher_logits.rows(); ++i) {
        const double lse = row_logsumexp(teacher_logits.data() + i * v, v);
        for (int64_t j = 0; j < v; ++j) {
            const double l = teacher_logits.at(i, j) - lse;
            logp.at(i, j) = l;
            probs.at(i, j) = std::exp(l);
        }
    }
    Node n;
    n.op = Op::KlRows;
    n.parent0 = q_logits;
    n.aux_tensor = std::make_shared<Tensor>(std::move(probs));
    n.aux_tensor2 = std::make_shared<Tensor>(std::move(logp));
    n.requires_grad = at(q_logits).requires_grad;
    const Tensor& p = *n.aux_tensor;
    const Tensor& lp = *n.aux_tensor2;
    double total = 0.0;
    for (int64_t i = 0; i < tq.rows(); ++i) {
        const double lse = row_logsumexp(tq.data() + i * v, v);
        double row = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            const double pij = p.at(i, j);
            if (pij > 0.0) row += pij * (lp.at(i, j) - (tq.at(i, j) - lse));
        }
        total += row;
    }
    n.value = Tensor::scalar(total / static_cast<double>(tq.rows()));
    return push(std::move(n));
}

Graph::NodeId Graph::ste_gate(NodeId p, double tau) {
    const Tensor& tp = value(p);
    Node n;
    n.value = Tensor::zeros(tp.shape());
    for (int64_t i = 0; i < tp.numel(); ++i) n.value.at(i) = tp.at(i) > tau ? 1.0 : 0.0;
    n.op = Op::SteGate;
    n.parent0 = p;
    n.aux_a = tau;
    n.requires_grad = at(p).requires_grad;
    return push(std::move(n));
}

void Graph::backward(NodeId root) {
    if (root < 0 || static_cast<size_t>(root) >= nodes_.size()) throw Error("backward: bad root id");
    if (value(root).numel() != 1) throw Error("backward: root must be a scalar node");
    for (Node& n : nodes_) n.grad = Tensor();
    grad_slot(root).at(0) = 1.0;
    for (NodeId id = root; id >= 0; --id) {
        const Node& n = at(id);
        if (n.grad.empty() || n.op == Op::Leaf) continue;
        backprop_node(id);
    }
}

Tensor Graph::grad(NodeId id) const {
    const Node& n = at(id);
    if (n.grad.empty()) return Tensor::zeros(n.value.shape());
    return n.grad;
}

void Graph::backprop_node(NodeId id) {
    Node& n = at(id);
    const Tensor& g = n.grad;
    const NodeId p0 = n.parent0;
    const NodeId p1 = n.parent1;
    const bool need0 = p0 >= 0 && at(p0).requires_grad;
    const bool need1 = p1 >= 0 && at(p1).requires_grad;
    if (!need0 && !need1) return;

    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::MatMul: {
            const Tensor& a = value(p0);
            const Tensor& b = value(p1);
            if (need0) {
                auto da = grad_slot(p0).mat();
                if (!n.trans_a && !n.trans_b)
                    da.noalias() += g.mat() * b.mat().transpose();
                else if (!n.trans_a && n.trans_b)
                    da.noalias() += g.mat() * b.mat();
                else if (n.trans_a && !n.trans_b)
                    da.noalias() += b.mat() * g.mat().transpose();
                else
                    da.noalias() += b.mat().transpose() * g.mat().transpose();
            }
            if (need1) {
                auto db = grad_slot(p1).mat();
                if (!n.trans_a && !n.trans_b)
                    db.noalias() += a.mat().transpose() * g.mat();
                else if (!n.trans_a && n.trans_b)
                    db.noalias() += g.mat().transpose() * a.mat();
                else if (n.trans_a && !n.trans_b)
                    db.noalias() += a.mat() * g.mat();
                else
                    db.noalias() += g.mat().transpose() * a.mat().transpose();
            }
            break;
        }
        case Op::Add: {
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.numel(); ++i) d.at(i) += g.at(i);
            }
            if (need1) {
                Tensor& d = grad_slot(p1);
                for (int64_t i = 0; i < g.numel(); ++i) d.at(i) += g.at(i);
            }
            break;
        }
        case Op::AddRowVec: {
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.numel(); ++i) d.at(i) += g.at(i);
            }
            if (need1) {
                Tensor& d = grad_slot(p1);
                for (int64_t i = 0; i < g.rows(); ++i)
                    for (int64_t j = 0; j < g.cols(); ++j) d.at(j) += g.at(i, j);
            }
            break;
        }
        case Op::Mul: {
            const Tensor& a = value(p0);
            const Tensor& b = value(p1);
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.numel(); ++i) d.at(i) += g.at(i) * b.at(i);
            }
            if (need1) {
                Tensor& d = grad_slot(p1);
                for (int64_t i = 0; i < g.numel(); ++i) d.at(i) += g.at(i) * a.at(i);
            }
            break;
        }
        case Op::MulScalar: {
            const Tensor& x = value(p0);
            const double s = value(p1).at(0);
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.numel(); ++i) d.at(i) += s * g.at(i);
            }
            if (need1) {
                double acc = 0.0;
                for (int64_t i = 0; i < g.numel(); ++i) acc += g.at(i) * x.at(i);
                grad_slot(p1).at(0) += acc;
            }
            break;
        }
        case Op::Affine: {
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.numel(); ++i) d.at(i) += n.aux_a * g.at(i);
            }
            break;
        }
        case Op::ConcatRows: {
            const int64_t split = n.aux_i;
            const int64_t cols = g.cols();
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < split; ++i)
                    for (int64_t j = 0; j < cols; ++j) d.at(i, j) += g.at(i, j);
            }
            if (need1) {
                Tensor& d = grad_slot(p1);
                for (int64_t i = split; i < g.rows(); ++i)
                    for (int64_t j = 0; j < cols; ++j) d.at(i - split, j) += g.at(i, j);
            }
            break;
        }
        case Op::ConcatCols: {
            const int64_t split = n.aux_i;
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.rows(); ++i)
                    for (int64_t j = 0; j < split; ++j) d.at(i, j) += g.at(i, j);
            }
            if (need1) {
                Tensor& d = grad_slot(p1);
                for (int64_t i = 0; i < g.rows(); ++i)
                    for (int64_t j = split; j < g.cols(); ++j) d.at(i, j - split) += g.at(i, j);
            }
            break;
        }
        case Op::SliceCols: {
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.rows(); ++i)
                    for (int64_t j = 0; j < g.cols(); ++j) d.at(i, n.aux_i + j) += g.at(i, j);
            }
            break;
        }
        case Op::SliceRows: {
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.rows(); ++i)
                    for (int64_t j = 0; j < g.cols(); ++j) d.at(n.aux_i + i, j) += g.at(i, j);
            }
            break;
        }
        case Op::MaskedRowSoftmax: {
            if (need0) {
                const Tensor& out = n.value;
                const double s = n.aux_a;
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.rows(); ++i) {
                    double dot = 0.0;
                    for (int64_t j = 0; j < g.cols(); ++j) dot += g.at(i, j) * out.at(i, j);
                    for (int64_t j = 0; j < g.cols(); ++j)
                        d.at(i, j) += s * out.at(i, j) * (g.at(i, j) - dot);
                }
            }
            break;
        }
        case Op::GatedMaskedSoftmax: {
            const Tensor& out = n.value;
            const Tensor& mask = *n.aux_tensor;
            const Tensor& gate = value(p1);
            const double s = n.aux_a;
            const int64_t self_offset = n.aux_i;
            Tensor* dscore = need0 ? &grad_slot(p0) : nullptr;
            Tensor* dgate = need1 ? &grad_slot(p1) : nullptr;
            for (int64_t i = 0; i < g.rows(); ++i) {
                double dot = 0.0;
                for (int64_t j = 0; j < g.cols(); ++j) dot += g.at(i, j) * out.at(i, j);
                for (int64_t j = 0; j < g.cols(); ++j) {
                    if (mask.at(i, j) == 0.0) continue;
                    if (dscore) dscore->at(i, j) += s * out.at(i, j) * (g.at(i, j) - dot);
                    if (dgate) {
                        const bool self = self_offset >= 0 && j == i + self_offset;
                        const double gj = self ? 1.0 : gate.at(j);
                        // Dropped slots (gate exactly 0) deliberately receive
                        // no attention-path gradient; the self slot is pinned.
                        if (!self && gj > 0.0) dgate->at(j) += (out.at(i, j) / gj) * (g.at(i, j) - dot);
                    }
                }
            }
            break;
        }
        case Op::RmsNorm: {
            const Tensor& x = value(p0);
            const Tensor& gain = value(p1);
            const int64_t dcols = x.cols();
            const double eps = n.aux_a;
            Tensor* dx = need0 ? &grad_slot(p0) : nullptr;
            Tensor* dgain = need1 ? &grad_slot(p1) : nullptr;
            for (int64_t i = 0; i < x.rows(); ++i) {
                double ms = 0.0;
                for (int64_t j = 0; j < dcols; ++j) ms += x.at(i, j) * x.at(i, j);
                const double r = std::sqrt(ms / static_cast<double>(dcols) + eps);
                double acc = 0.0;
                for (int64_t j = 0; j < dcols; ++j) acc += g.at(i, j) * gain.at(j) * x.at(i, j);
                for (int64_t j = 0; j < dcols; ++j) {
                    if (dx)
                        dx->at(i, j) += gain.at(j) * g.at(i, j) / r -
                                        x.at(i, j) * acc / (static_cast<double>(dcols) * r * r * r);
                    if (dgain) dgain->at(j) += g.at(i, j) * x.at(i, j) / r;
                }
            }
            break;
        }
        case Op::Gelu: {
            if (need0) {
                const Tensor& x = value(p0);
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.numel(); ++i) {
                    const double v = x.at(i);
                    const double u = kGeluC * (v + kGeluK * v * v * v);
                    const double th = std::tanh(u);
                    const double du = kGeluC * (1.0 + 3.0 * kGeluK * v * v);
                    d.at(i) += g.at(i) * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
                }
            }
            break;
        }
        case Op::EluPlusOne: {
            if (need0) {
                const Tensor& x = value(p0);
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.numel(); ++i)
                    d.at(i) += g.at(i) * (x.at(i) >= 0.0 ? 1.0 : n.value.at(i));
            }
            break;
        }
        case Op::GatherRows: {
            if (need0) {
                Tensor& d = grad_slot(p0);
                const int64_t cols = g.cols();
                for (size_t t = 0; t < n.aux_ids.size(); ++t)
                    for (int64_t j = 0; j < cols; ++j)
                        d.at(n.aux_ids[t], j) += g.at(static_cast<int64_t>(t), j);
            }
            break;
        }
        case Op::RowSum: {
            if (need0) {
                const Tensor& x = value(p0);
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < x.rows(); ++i)
                    for (int64_t j = 0; j < x.cols(); ++j) d.at(i, j) += g.at(i);
            }
            break;
        }
        case Op::RowDiv: {
            const Tensor& x = value(p0);
            const Tensor& den = value(p1);
            const double eps = n.aux_a;
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < x.rows(); ++i)
                    for (int64_t j = 0; j < x.cols(); ++j) d.at(i, j) += g.at(i, j) / (den.at(i) + eps);
            }
            if (need1) {
                Tensor& d = grad_slot(p1);
                for (int64_t i = 0; i < x.rows(); ++i) {
                    double acc = 0.0;
                    const double dv = den.at(i) + eps;
                    for (int64_t j = 0; j < x.cols(); ++j) acc += g.at(i, j) * x.at(i, j);
                    d.at(i) += -acc / (dv * dv);
                }
            }
            break;
        }
        case Op::NormalizeRows: {
            if (need0) {
                const Tensor& x = value(p0);
                const Tensor& out = n.value;
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < x.rows(); ++i) {
                    double s = 0.0;
                    for (int64_t j = 0; j < x.cols(); ++j) s += x.at(i, j) * x.at(i, j);
                    const double norm = std::sqrt(s);
                    double dot = 0.0;
                    for (int64_t j = 0; j < x.cols(); ++j) dot += g.at(i, j) * out.at(i, j);
                    for (int64_t j = 0; j < x.cols(); ++j)
                        d.at(i, j) += (g.at(i, j) - out.at(i, j) * dot) / norm;
                }
            }
            break;
        }
        case Op::RowDot: {
            const Tensor& a = value(p0);
            const Tensor& b = value(p1);
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < a.rows(); ++i)
                    for (int64_t j = 0; j < a.cols(); ++j) d.at(i, j) += g.at(i) * b.at(i, j);
            }
            if (need1) {
                Tensor& d = grad_slot(p1);
                for (int64_t i = 0; i < a.rows(); ++i)
                    for (int64_t j = 0; j < a.cols(); ++j) d.at(i, j) += g.at(i) * a.at(i, j);
            }
            break;
        }
        case Op::Sum: {
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < d.numel(); ++i) d.at(i) += g.at(0);
            }
            break;
        }
        case Op::CrossEntropyRows: {
            if (need0) {
                const Tensor& x = value(p0);
                const int64_t v = x.cols();
                const double inv = 1.0 / static_cast<double>(x.rows());
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < x.rows(); ++i) {
                    const double lse = row_logsumexp(x.data() + i * v, v);
                    for (int64_t j = 0; j < v; ++j) {
                        double sm = std::exp(x.at(i, j) - lse);
                        double delta = j == n.aux_ids[static_cast<size_t>(i)] ? 1.0 : 0.0;
                        d.at(i, j) += g.at(0) * inv * (sm - delta);
                    }
                }
            }
            break;
        }
        case Op::KlRows: {
            if (need0) {
                const Tensor& x = value(p0);
                const Tensor& p = *n.aux_tensor;
                const int64_t v = x.cols();
                const double inv = 1.0 / static_cast<double>(x.rows());
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < x.rows(); ++i) {
                    double prow = 0.0;
                    for (int64_t j = 0; j < v; ++j) prow += p.at(i, j);
                    const double lse = row_logsumexp(x.data() + i * v, v);
                    for (int64_t j = 0; j < v; ++j) {
                        const double sm = std::exp(x.at(i, j) - lse);
                        d.at(i, j) += g.at(0) * inv * (prow * sm - p.at(i, j));
                    }
                }
            }
            break;
        }
        case Op::SteGate: {
            if (need0) {
                Tensor& d = grad_slot(p0);
                for (int64_t i = 0; i < g.numel(); ++i) d.at(i) += g.at(i);
            }
            break;
        }
    }
}

}  // namespace kvcat
