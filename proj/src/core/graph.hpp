// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "tensor.hpp"

namespace kvcat {

// Reverse-mode tape over a fixed operation vocabulary. Every adjoint is
// hand-written; there is no general closure mechanism. Graphs are single
// threaded and append-only: parents always precede children, so the node
// order is already topological.
class Graph {
public:
    using NodeId = int32_t;

    enum class Op : uint8_t {
        Leaf,
        MatMul,
        Add,
        AddRowVec,
        Mul,
        MulScalar,
        Affine,
        ConcatRows,
        ConcatCols,
        SliceCols,
        SliceRows,
        MaskedRowSoftmax,
        GatedMaskedSoftmax,
        RmsNorm,
        Gelu,
        EluPlusOne,
        GatherRows,
        RowSum,
        RowDiv,
        NormalizeRows,
        RowDot,
        Sum,
        CrossEntropyRows,
        KlRows,
        SteGate,
    };

    NodeId leaf(Tensor value, bool requires_grad = true);
    NodeId constant(Tensor value) { return leaf(std::move(value), false); }
    NodeId scalar(double v) { return constant(Tensor::scalar(v)); }

    NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
    NodeId add(NodeId a, NodeId b);
    // x[MxN] + row vector b[N] broadcast over rows.
    NodeId add_rowvec(NodeId x, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    // x * s where s is a scalar node of shape {1}.
    NodeId mul_scalar(NodeId x, NodeId s);
    // a*x + b with compile-time constants a, b.
    NodeId affine(NodeId x, double a, double b);
    NodeId concat_rows(NodeId a, NodeId b);
    NodeId concat_cols(NodeId a, NodeId b);
    NodeId slice_cols(NodeId x, int64_t start, int64_t len);
    NodeId slice_rows(NodeId x, int64_t start, int64_t len);

    // Row softmax of scale*logits restricted to mask==1 positions; masked
    // entries are exactly zero. A row with an all-zero mask is an error.
    NodeId masked_row_softmax(NodeId logits, const Tensor& mask, double scale);

    // Softmax whose unnormalized weights are multiplied by gate[j] before
    // renormalization. When self_offset >= 0, column i+self_offset of row i
    // is treated as the query's own slot and its gate is pinned to 1.
    // Slots whose gate is exactly zero receive no gradient through this op.
    NodeId gated_masked_softmax(NodeId logits, NodeId gate, const Tensor& mask, double scale,
                                int64_t self_offset);

    NodeId rms_norm(NodeId x, NodeId gain, double eps);
    NodeId gelu(NodeId x);
    NodeId elu_plus_one(NodeId x);
    NodeId gather_rows(NodeId table, const std::vector<int64_t>& ids);
    NodeId row_sum(NodeId x);
    // out[i][j] = x[i][j] / (denom[i] + eps)
    NodeId row_div(NodeId x, NodeId denom, double eps);
    NodeId normalize_rows(NodeId x);
    NodeId row_dot(NodeId a, NodeId b);
    NodeId sum(NodeId x);
    NodeId cross_entropy_rows(NodeId logits, const std::vector<int64_t>& targets);

    // Mean-over-rows KL(p || softmax(q_logits)). `teacher_probs` is a plain
    // tensor, never a node: no gradient reaches the teacher. When
    // `teacher_logits` is supplied, log p is evaluated as logits - logsumexp
    // so that bit-identical student logits give an exact zero.
    NodeId kl_rows(NodeId q_logits, Tensor teacher_probs);
    NodeId kl_rows_from_logits(NodeId q_logits, Tensor teacher_logits);

    // Straight-through gate: value 1{p > tau}, backward d(gate)/d(p) = 1.
    NodeId ste_gate(NodeId p, double tau);

    const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool requires_grad(NodeId id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    // Reverse-mode accumulation from a scalar root. Gradients from any
    // previous backward call are discarded first.
    void backward(NodeId root);

    // Gradient of the last backward root w.r.t. `id` (zeros if unreachable).
    Tensor grad(NodeId id) const;

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;  // empty until touched by backward
        Op op = Op::Leaf;
        NodeId parent0 = -1;
        NodeId parent1 = -1;
        bool requires_grad = false;
        bool trans_a = false, trans_b = false;
        double aux_a = 0.0, aux_b = 0.0;
        int64_t aux_i = 0;
        std::shared_ptr<Tensor> aux_tensor;   // mask / teacher probs
        std::shared_ptr<Tensor> aux_tensor2;  // teacher log-probs
        std::vector<int64_t> aux_ids;         // gather ids / CE targets
    };

    NodeId push(Node n);
    Node& at(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& at(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    Tensor& grad_slot(NodeId id);
    void backprop_node(NodeId id);

    std::vector<Node> nodes_;
};

}  // namespace kvcat
