// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "zlora/matrix.hpp"

namespace zlora {

enum class Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Hadamard,
    ScaleConst,
    Sigmoid,
    Silu,
    Relu,
    ConcatCols,
    SelectCols,
    DiagScaleCols,
    LayerNormCols,
    SoftmaxRows,
    Transpose,
    Sum,
    MeanCols,
    AddBiasCols,
    StackCols,
    SteThreshold,
};

const char* op_name(Op op);

using NodeId = int;

/// Reverse-mode tape over a fixed op set. Values are computed eagerly at
/// record time; backward() fills adjoints in reverse creation order.
/// Nodes are appended only, so creation order is a topological order.
class Tape {
public:
    struct Node {
        Op op;
        std::vector<NodeId> inputs;
        Matrix value;
        Matrix adjoint;
        double scalar = 0.0; // ScaleConst factor, LayerNormCols eps, SteThreshold tau
        int i0 = 0;          // SelectCols start, StackCols factor
        int i1 = 0;          // SelectCols length
    };

    NodeId leaf(Matrix v);

    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId hadamard(NodeId a, NodeId b);
    NodeId scale(NodeId a, double s);
    NodeId sigmoid(NodeId a);
    NodeId silu(NodeId a);
    NodeId relu(NodeId a);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    NodeId select_cols(NodeId m, int start, int len);
    NodeId diag_scale_cols(NodeId m, NodeId w);
    NodeId layernorm_cols(NodeId x, NodeId gamma, NodeId beta, double eps);
    NodeId softmax_rows(NodeId a);
    NodeId transpose(NodeId a);
    NodeId sum(NodeId a);
    NodeId mean_cols(NodeId a);
    NodeId add_bias_cols(NodeId m, NodeId v);
    NodeId stack_cols(NodeId m, int factor);
    /// Elementwise 0/1 gate: 1 where value >= tau. Backward passes the
    /// upstream adjoint through unchanged (straight-through estimator).
    NodeId ste_threshold(NodeId a, double tau);

    const Matrix& value(NodeId id) const;
    /// Adjoint of a node after backward(). Shape equals the node's value.
    const Matrix& grad(NodeId id) const;

    /// Seeds the loss adjoint with 1 and propagates in reverse order.
    /// The loss node must be 1x1.
    void backward(NodeId loss);

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }
    void reserve(std::size_t n) { nodes_.reserve(n); }

    /// Test hook: corrupt the backward rule of one op so gradient checks
    /// detect and name it. Cleared with std::nullopt.
    static void set_backward_fault(std::optional<Op> op);
    static std::optional<Op> backward_fault();

private:
    std::vector<Node> nodes_;

    const Node& at(NodeId id) const;
    NodeId push(Node n);
};

/// Central finite difference (f(p+h e) - f(p-h e)) / 2h for every entry of p.
Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& p,
                        double h = 1e-5);

/// max|a-b| / max(max|a|, max|b|, 1e-12); shape mismatch is an error.
double relative_error(const Matrix& a, const Matrix& b);

} // namespace zlora
