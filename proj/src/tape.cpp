// SPDX-License-Identifier: Apache-2.0

#include "zlora/tape.hpp"

#include <cmath>

#include "zlora/errors.hpp"

namespace zlora {

namespace {
std::optional<Op> g_backward_fault;
} // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::MatMul: return "matmul";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Hadamard: return "hadamard";
        case Op::ScaleConst: return "scale";
        case Op::Sigmoid: return "sigmoid";
        case Op::Silu: return "silu";
        case Op::Relu: return "relu";
        case Op::ConcatCols: return "concat_cols";
        case Op::SelectCols: return "select_cols";
        case Op::DiagScaleCols: return "diag_scale_cols";
        case Op::LayerNormCols: return "layernorm_cols";
        case Op::SoftmaxRows: return "softmax_rows";
        case Op::Transpose: return "transpose";
        case Op::Sum: return "sum";
        case Op::MeanCols: return "mean_cols";
        case Op::AddBiasCols: return "add_bias_cols";
        case Op::StackCols: return "stack_cols";
        case Op::SteThreshold: return "ste_threshold";
    }
    return "unknown";
}

void Tape::set_backward_fault(std::optional<Op> op) { g_backward_fault = op; }
std::optional<Op> Tape::backward_fault() { return g_backward_fault; }

const Tape::Node& Tape::at(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
        throw ContractError("tape: node id " + std::to_string(id) + " out of range");
    }
    return nodes_[static_cast<std::size_t>(id)];
}

NodeId Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Matrix v) { return push(Node{Op::Leaf, {}, std::move(v), Matrix()}); }

NodeId Tape::matmul(NodeId a, NodeId b) {
    Matrix v = zlora::matmul(at(a).value, at(b).value);
    return push(Node{Op::MatMul, {a, b}, std::move(v), Matrix()});
}

NodeId Tape::add(NodeId a, NodeId b) {
    Matrix v = zlora::add(at(a).value, at(b).value);
    return push(Node{Op::Add, {a, b}, std::move(v), Matrix()});
}

NodeId Tape::sub(NodeId a, NodeId b) {
    Matrix v = zlora::sub(at(a).value, at(b).value);
    return push(Node{Op::Sub, {a, b}, std::move(v), Matrix()});
}

NodeId Tape::hadamard(NodeId a, NodeId b) {
    Matrix v = zlora::hadamard(at(a).value, at(b).value);
    return push(Node{Op::Hadamard, {a, b}, std::move(v), Matrix()});
}

NodeId Tape::scale(NodeId a, double s) {
    Matrix v = zlora::scale(at(a).value, s);
    Node n{Op::ScaleConst, {a}, std::move(v), Matrix()};
    n.scalar = s;
    return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId a) {
    Matrix v = zlora::sigmoid(at(a).value);
    return push(Node{Op::Sigmoid, {a}, std::move(v), Matrix()});
}

NodeId Tape::silu(NodeId a) {
    Matrix v = zlora::silu(at(a).value);
    return push(Node{Op::Silu, {a}, std::move(v), Matrix()});
}

NodeId Tape::relu(NodeId a) {
    Matrix v = zlora::relu(at(a).value);
    return push(Node{Op::Relu, {a}, std::move(v), Matrix()});
}

NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
    std::vector<Matrix> vals;
    vals.reserve(parts.size());
    for (NodeId id : parts) {
        vals.push_back(at(id).value);
    }
    Matrix v = zlora::concat_cols(vals);
    return push(Node{Op::ConcatCols, parts, std::move(v), Matrix()});
}

NodeId Tape::select_cols(NodeId m, int start, int len) {
    Matrix v = zlora::select_cols(at(m).value, start, len);
    Node n{Op::SelectCols, {m}, std::move(v), Matrix()};
    n.i0 = start;
    n.i1 = len;
    return push(std::move(n));
}

NodeId Tape::diag_scale_cols(NodeId m, NodeId w) {
    Matrix v = zlora::diag_scale_cols(at(m).value, at(w).value);
    return push(Node{Op::DiagScaleCols, {m, w}, std::move(v), Matrix()});
}

NodeId Tape::layernorm_cols(NodeId x, NodeId gamma, NodeId beta, double eps) {
    Matrix v = zlora::layernorm_cols(at(x).value, at(gamma).value, at(beta).value, eps);
    Node n{Op::LayerNormCols, {x, gamma, beta}, std::move(v), Matrix()};
    n.scalar = eps;
    return push(std::move(n));
}

NodeId Tape::softmax_rows(NodeId a) {
    Matrix v = zlora::softmax_rows(at(a).value);
    return push(Node{Op::SoftmaxRows, {a}, std::move(v), Matrix()});
}

NodeId Tape::transpose(NodeId a) {
    Matrix v = zlora::transpose(at(a).value);
    return push(Node{Op::Transpose, {a}, std::move(v), Matrix()});
}

NodeId Tape::sum(NodeId a) {
    Matrix v(1, 1);
    v(0, 0) = zlora::sum(at(a).value);
    return push(Node{Op::Sum, {a}, std::move(v), Matrix()});
}

NodeId Tape::mean_cols(NodeId a) {
    Matrix v = zlora::mean_cols(at(a).value);
    return push(Node{Op::MeanCols, {a}, std::move(v), Matrix()});
}

NodeId Tape::add_bias_cols(NodeId m, NodeId v) {
    Matrix out = zlora::add_bias_cols(at(m).value, at(v).value);
    return push(Node{Op::AddBiasCols, {m, v}, std::move(out), Matrix()});
}

NodeId Tape::stack_cols(NodeId m, int factor) {
    Matrix v = zlora::stack_cols(at(m).value, factor);
    Node n{Op::StackCols, {m}, std::move(v), Matrix()};
    n.i0 = factor;
    return push(std::move(n));
}

NodeId Tape::ste_threshold(NodeId a, double tau) {
    const Matrix& x = at(a).value;
    Matrix v(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        v.data()[i] = x.data()[i] >= tau ? 1.0 : 0.0;
    }
    Node n{Op::SteThreshold, {a}, std::move(v), Matrix()};
    n.scalar = tau;
    return push(std::move(n));
}

const Matrix& Tape::value(NodeId id) const { return at(id).value; }

const Matrix& Tape::grad(NodeId id) const {
    const Node& n = at(id);
    if (!n.adjoint.same_shape(n.value)) {
        throw ContractError("tape: grad requested before backward");
    }
    return n.adjoint;
}

void Tape::backward(NodeId loss) {
    const Node& ln = at(loss);
    if (ln.value.rows() != 1 || ln.value.cols() != 1) {
        throw ContractError("backward: loss node must be 1x1, got " + ln.value.shape_str());
    }
    for (Node& n : nodes_) {
        n.adjoint = Matrix(n.value.rows(), n.value.cols());
    }
    nodes_[static_cast<std::size_t>(loss)].adjoint(0, 0) = 1.0;

    for (NodeId id = loss; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        const Matrix& g = n.adjoint;
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::MatMul: {
                Node& a = nodes_[n.inputs[0]];
                Node& b = nodes_[n.inputs[1]];
                a.adjoint = zlora::add(a.adjoint, zlora::matmul(g, zlora::transpose(b.value)));
                b.adjoint = zlora::add(b.adjoint, zlora::matmul(zlora::transpose(a.value), g));
                break;
            }
            case Op::Add: {
                Node& a = nodes_[n.inputs[0]];
                Node& b = nodes_[n.inputs[1]];
                a.adjoint = zlora::add(a.adjoint, g);
                b.adjoint = zlora::add(b.adjoint, g);
                break;
            }
            case Op::Sub: {
                Node& a = nodes_[n.inputs[0]];
                Node& b = nodes_[n.inputs[1]];
                a.adjoint = zlora::add(a.adjoint, g);
                b.adjoint = zlora::sub(b.adjoint, g);
                break;
            }
            case Op::Hadamard: {
                Node& a = nodes_[n.inputs[0]];
                Node& b = nodes_[n.inputs[1]];
                a.adjoint = zlora::add(a.adjoint, zlora::hadamard(g, b.value));
                b.adjoint = zlora::add(b.adjoint, zlora::hadamard(g, a.value));
                break;
            }
            case Op::ScaleConst: {
                Node& a = nodes_[n.inputs[0]];
                a.adjoint = zlora::add(a.adjoint, zlora::scale(g, n.scalar));
                break;
            }
            case Op::Sigmoid: {
                Node& a = nodes_[n.inputs[0]];
                Matrix d(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double y = n.value.data()[i];
                    d.data()[i] = g.data()[i] * y * (1.0 - y);
                }
                a.adjoint = zlora::add(a.adjoint, d);
                break;
            }
            case Op::Silu: {
                Node& a = nodes_[n.inputs[0]];
                Matrix d(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double x = a.value.data()[i];
                    const double s = 1.0 / (1.0 + std::exp(-x));
                    d.data()[i] = g.data()[i] * s * (1.0 + x * (1.0 - s));
                }
                a.adjoint = zlora::add(a.adjoint, d);
                break;
            }
            case Op::Relu: {
                Node& a = nodes_[n.inputs[0]];
                Matrix d(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.size(); ++i) {
                    d.data()[i] = a.value.data()[i] > 0.0 ? g.data()[i] : 0.0;
                }
                a.adjoint = zlora::add(a.adjoint, d);
                break;
            }
            case Op::ConcatCols: {
                int off = 0;
                for (NodeId pid : n.inputs) {
                    Node& p = nodes_[pid];
                    p.adjoint =
                        zlora::add(p.adjoint, zlora::select_cols(g, off, p.value.cols()));
                    off += p.value.cols();
                }
                break;
            }
            case Op::SelectCols: {
                Node& m = nodes_[n.inputs[0]];
                for (int i = 0; i < g.rows(); ++i) {
                    for (int j = 0; j < g.cols(); ++j) {
                        m.adjoint(i, n.i0 + j) += g(i, j);
                    }
                }
                break;
            }
            case Op::DiagScaleCols: {
                Node& m = nodes_[n.inputs[0]];
                Node& w = nodes_[n.inputs[1]];
                m.adjoint = zlora::add(m.adjoint, zlora::diag_scale_cols(g, w.value));
                for (int j = 0; j < g.cols(); ++j) {
                    double s = 0.0;
                    for (int i = 0; i < g.rows(); ++i) {
                        s += g(i, j) * m.value(i, j);
                    }
                    w.adjoint(j, 0) += s;
                }
                break;
            }
            case Op::LayerNormCols: {
                Node& x = nodes_[n.inputs[0]];
                Node& gm = nodes_[n.inputs[1]];
                Node& bt = nodes_[n.inputs[2]];
                const int d = x.value.rows();
                for (int j = 0; j < x.value.cols(); ++j) {
                    double mean = 0.0;
                    for (int i = 0; i < d; ++i) {
                        mean += x.value(i, j);
                    }
                    mean /= d;
                    double var = 0.0;
                    for (int i = 0; i < d; ++i) {
                        const double c = x.value(i, j) - mean;
                        var += c * c;
                    }
                    var /= d;
                    const double inv = 1.0 / std::sqrt(var + n.scalar);
                    // xhat reconstructed per column; dxhat = g * gamma.
                    double m1 = 0.0, m2 = 0.0;
                    std::vector<double> xhat(d), dxhat(d);
                    for (int i = 0; i < d; ++i) {
                        xhat[i] = (x.value(i, j) - mean) * inv;
                        dxhat[i] = g(i, j) * gm.value(i, 0);
                        m1 += dxhat[i];
                        m2 += dxhat[i] * xhat[i];
                        gm.adjoint(i, 0) += g(i, j) * xhat[i];
                        bt.adjoint(i, 0) += g(i, j);
                    }
                    m1 /= d;
                    m2 /= d;
                    for (int i = 0; i < d; ++i) {
                        x.adjoint(i, j) += inv * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                break;
            }
            case Op::SoftmaxRows: {
                Node& a = nodes_[n.inputs[0]];
                for (int i = 0; i < g.rows(); ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < g.cols(); ++j) {
                        dot += g(i, j) * n.value(i, j);
                    }
                    for (int j = 0; j < g.cols(); ++j) {
                        a.adjoint(i, j) += n.value(i, j) * (g(i, j) - dot);
                    }
                }
                break;
            }
            case Op::Transpose: {
                Node& a = nodes_[n.inputs[0]];
                a.adjoint = zlora::add(a.adjoint, zlora::transpose(g));
                break;
            }
            case Op::Sum: {
                Node& a = nodes_[n.inputs[0]];
                const double s = g(0, 0);
                for (std::size_t i = 0; i < a.adjoint.size(); ++i) {
                    a.adjoint.data()[i] += s;
                }
                break;
            }
            case Op::MeanCols: {
                Node& a = nodes_[n.inputs[0]];
                const double invn = 1.0 / a.value.cols();
                for (int i = 0; i < a.value.rows(); ++i) {
                    for (int j = 0; j < a.value.cols(); ++j) {
                        a.adjoint(i, j) += g(i, 0) * invn;
                    }
                }
                break;
            }
            case Op::AddBiasCols: {
                Node& m = nodes_[n.inputs[0]];
                Node& v = nodes_[n.inputs[1]];
                m.adjoint = zlora::add(m.adjoint, g);
                for (int i = 0; i < g.rows(); ++i) {
                    double s = 0.0;
                    for (int j = 0; j < g.cols(); ++j) {
                        s += g(i, j);
                    }
                    v.adjoint(i, 0) += s;
                }
                break;
            }
            case Op::StackCols: {
                Node& m = nodes_[n.inputs[0]];
                const int d = m.value.rows();
                const int f = n.i0;
                for (int c = 0; c < m.value.cols(); ++c) {
                    const int grp = c / f;
                    const int q = c % f;
                    for (int i = 0; i < d; ++i) {
                        m.adjoint(i, c) += g(q * d + i, grp);
                    }
                }
                break;
            }
            case Op::SteThreshold: {
                // Straight-through: gate treated as identity in backward.
                Node& a = nodes_[n.inputs[0]];
                a.adjoint = zlora::add(a.adjoint, g);
                break;
            }
        }
        if (g_backward_fault && n.op == *g_backward_fault && !n.inputs.empty()) {
            Node& a = nodes_[n.inputs[0]];
            if (a.adjoint.size() > 0) {
                a.adjoint.data()[0] += 1.0;
            }
        }
    }
}

Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& p,
                        double h) {
    if (h <= 0.0) {
        throw ContractError("finite_diff_grad: h must be positive");
    }
    Matrix grad(p.rows(), p.cols());
    Matrix q = p;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = q.data()[i];
        q.data()[i] = orig + h;
        const double fp = f(q);
        q.data()[i] = orig - h;
        const double fm = f(q);
        q.data()[i] = orig;
        grad.data()[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

double relative_error(const Matrix& a, const Matrix& b) {
    const double denom = std::max({max_abs(a), max_abs(b), 1e-12});
    return max_abs_diff(a, b) / denom;
}

} // namespace zlora
