// SPDX-License-Identifier: Apache-2.0

#include "zlora/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "zlora/errors.hpp"

namespace zlora {

namespace {

[[noreturn]] void throw_shape(const std::string& op, const Matrix& a, const Matrix& b) {
    std::ostringstream os;
    os << op << ": incompatible shapes " << a.shape_str() << " and " << b.shape_str();
    throw ShapeError(os.str());
}

void require_same_shape(const std::string& op, const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw_shape(op, a, b);
    }
}

template <typename F>
Matrix unary_map(const Matrix& a, F f) {
    Matrix out(a.rows(), a.cols());
    const double* src = a.data();
    double* dst = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        dst[i] = f(src[i]);
    }
    return out;
}

} // namespace

Matrix::Matrix(int rows, int cols) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0) {
        throw ShapeError("Matrix: negative dimension (" + std::to_string(rows) + "x" +
                         std::to_string(cols) + ")");
    }
    data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
}

Matrix::Matrix(int rows, int cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows < 0 || cols < 0 ||
        data_.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
        throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

std::string Matrix::shape_str() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

bool Matrix::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

Matrix Matrix::filled(int rows, int cols, double v) {
    Matrix m(rows, cols);
    std::fill(m.data_.begin(), m.data_.end(), v);
    return m;
}

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::column(const std::vector<double>& v) {
    return Matrix(static_cast<int>(v.size()), 1, v);
}

Matrix Matrix::gaussian(int rows, int cols, SplitMix64& rng, double stddev) {
    Matrix m(rows, cols);
    for (double& v : m.data_) {
        v = rng.gaussian(0.0, stddev);
    }
    return m;
}

Matrix Matrix::uniform(int rows, int cols, SplitMix64& rng, double lo, double hi) {
    Matrix m(rows, cols);
    for (double& v : m.data_) {
        v = rng.uniform(lo, hi);
    }
    return m;
}

bool operator==(const Matrix& a, const Matrix& b) {
    return a.same_shape(b) && a.vec() == b.vec();
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw_shape("matmul", a, b);
    }
    Matrix c(a.rows(), b.cols());
    const int n = a.rows(), k = a.cols(), m = b.cols();
    // ikj order: streams over rows of b and c.
    for (int i = 0; i < n; ++i) {
        double* crow = c.data() + static_cast<std::size_t>(i) * m;
        const double* arow = a.data() + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = b.data() + static_cast<std::size_t>(p) * m;
            for (int j = 0; j < m; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return c;
}

Matrix add(const Matrix& a, const Matrix& b) {
    require_same_shape("add", a, b);
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.data()[i] = a.data()[i] + b.data()[i];
    }
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    require_same_shape("sub", a, b);
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.data()[i] = a.data()[i] - b.data()[i];
    }
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape("hadamard", a, b);
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.data()[i] = a.data()[i] * b.data()[i];
    }
    return out;
}

Matrix scale(const Matrix& a, double s) {
    return unary_map(a, [s](double v) { return v * s; });
}

Matrix sigmoid(const Matrix& a) {
    // Clamped one ulp inside (0,1) so the open-interval range holds even
    // where f64 saturates (|x| beyond ~37).
    static const double hi = std::nextafter(1.0, 0.0);
    static const double lo = std::numeric_limits<double>::denorm_min();
    return unary_map(a, [](double v) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return std::min(hi, std::max(lo, s));
    });
}

Matrix silu(const Matrix& a) {
    return unary_map(a, [](double v) { return v / (1.0 + std::exp(-v)); });
}

Matrix relu(const Matrix& a) {
    return unary_map(a, [](double v) { return v > 0.0 ? v : 0.0; });
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

Matrix concat_cols(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw_shape("concat_cols", a, b);
    }
    Matrix out(a.rows(), a.cols() + b.cols());
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < a.cols(); ++j) {
            out(i, j) = a(i, j);
        }
        for (int j = 0; j < b.cols(); ++j) {
            out(i, a.cols() + j) = b(i, j);
        }
    }
    return out;
}

Matrix concat_cols(const std::vector<Matrix>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_cols: empty part list");
    }
    int total = 0;
    for (const Matrix& p : parts) {
        if (p.rows() != parts[0].rows()) {
            throw_shape("concat_cols", parts[0], p);
        }
        total += p.cols();
    }
    Matrix out(parts[0].rows(), total);
    int off = 0;
    for (const Matrix& p : parts) {
        for (int i = 0; i < p.rows(); ++i) {
            for (int j = 0; j < p.cols(); ++j) {
                out(i, off + j) = p(i, j);
            }
        }
        off += p.cols();
    }
    return out;
}

Matrix select_cols(const Matrix& m, int start, int len) {
    if (start < 0 || len < 0 || start + len > m.cols()) {
        throw ShapeError("select_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of " + m.shape_str());
    }
    Matrix out(m.rows(), len);
    for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < len; ++j) {
            out(i, j) = m(i, start + j);
        }
    }
    return out;
}

Matrix diag_scale_cols(const Matrix& m, const Matrix& w) {
    if (w.cols() != 1 || w.rows() != m.cols()) {
        throw_shape("diag_scale_cols", m, w);
    }
    Matrix out(m.rows(), m.cols());
    for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < m.cols(); ++j) {
            out(i, j) = m(i, j) * w(j, 0);
        }
    }
    return out;
}

Matrix layernorm_cols(const Matrix& m, const Matrix& gamma, const Matrix& beta, double eps) {
    if (gamma.cols() != 1 || beta.cols() != 1 || gamma.rows() != m.rows() ||
        beta.rows() != m.rows()) {
        throw ShapeError("layernorm_cols: affine shapes " + gamma.shape_str() + "/" +
                         beta.shape_str() + " do not match input " + m.shape_str());
    }
    if (eps <= 0.0) {
        throw ContractError("layernorm_cols: eps must be positive");
    }
    const int d = m.rows();
    Matrix out(d, m.cols());
    for (int j = 0; j < m.cols(); ++j) {
        double mean = 0.0;
        for (int i = 0; i < d; ++i) {
            mean += m(i, j);
        }
        mean /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) {
            const double c = m(i, j) - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < d; ++i) {
            out(i, j) = gamma(i, 0) * ((m(i, j) - mean) * inv) + beta(i, 0);
        }
    }
    return out;
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (int i = 0; i < m.rows(); ++i) {
        double mx = m(i, 0);
        for (int j = 1; j < m.cols(); ++j) {
            mx = std::max(mx, m(i, j));
        }
        double z = 0.0;
        for (int j = 0; j < m.cols(); ++j) {
            const double e = std::exp(m(i, j) - mx);
            out(i, j) = e;
            z += e;
        }
        for (int j = 0; j < m.cols(); ++j) {
            out(i, j) /= z;
        }
    }
    return out;
}

Matrix stack_cols(const Matrix& m, int factor) {
    if (factor < 1) {
        throw ContractError("stack_cols: factor must be >= 1");
    }
    const int groups = (m.cols() + factor - 1) / factor;
    Matrix out(m.rows() * factor, groups);
    for (int g = 0; g < groups; ++g) {
        for (int q = 0; q < factor; ++q) {
            const int src = g * factor + q;
            if (src >= m.cols()) {
                break; // zero padding
            }
            for (int i = 0; i < m.rows(); ++i) {
                out(q * m.rows() + i, g) = m(i, src);
            }
        }
    }
    return out;
}

Matrix mean_cols(const Matrix& m) {
    if (m.cols() == 0) {
        throw ContractError("mean_cols: no columns");
    }
    Matrix out(m.rows(), 1);
    for (int i = 0; i < m.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < m.cols(); ++j) {
            s += m(i, j);
        }
        out(i, 0) = s / m.cols();
    }
    return out;
}

Matrix add_bias_cols(const Matrix& m, const Matrix& v) {
    if (v.cols() != 1 || v.rows() != m.rows()) {
        throw_shape("add_bias_cols", m, v);
    }
    Matrix out(m.rows(), m.cols());
    for (int i = 0; i < m.rows(); ++i) {
        for (int j = 0; j < m.cols(); ++j) {
            out(i, j) = m(i, j) + v(i, 0);
        }
    }
    return out;
}

double sum(const Matrix& m) {
    double s = 0.0;
    for (double v : m.vec()) {
        s += v;
    }
    return s;
}

double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.vec()) {
        s += v * v;
    }
    return std::sqrt(s);
}

double frobenius_inner(const Matrix& a, const Matrix& b) {
    require_same_shape("frobenius_inner", a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a.data()[i] * b.data()[i];
    }
    return s;
}

double max_abs(const Matrix& m) {
    double s = 0.0;
    for (double v : m.vec()) {
        s = std::max(s, std::abs(v));
    }
    return s;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape("max_abs_diff", a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s = std::max(s, std::abs(a.data()[i] - b.data()[i]));
    }
    return s;
}

void sym_eigen(const Matrix& s, std::vector<double>& eigenvalues, Matrix& eigenvectors) {
    const int n = s.rows();
    if (s.cols() != n) {
        throw ShapeError("sym_eigen: matrix " + s.shape_str() + " is not square");
    }
    Matrix a = s;
    Matrix v = Matrix::identity(n);
    // Cyclic Jacobi sweeps; more than enough for the small matrices used here.
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                off += a(p, q) * a(p, q);
            }
        }
        if (off < 1e-26) {
            break;
        }
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) {
                    continue;
                }
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * c;
                for (int i = 0; i < n; ++i) {
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - sn * aiq;
                    a(i, q) = sn * aip + c * aiq;
                }
                for (int j = 0; j < n; ++j) {
                    const double apj = a(p, j), aqj = a(q, j);
                    a(p, j) = c * apj - sn * aqj;
                    a(q, j) = sn * apj + c * aqj;
                }
                for (int i = 0; i < n; ++i) {
                    const double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - sn * viq;
                    v(i, q) = sn * vip + c * viq;
                }
            }
        }
    }
    // Sort ascending by eigenvalue, carrying eigenvector columns along.
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&](int x, int y) { return a(x, x) < a(y, y); });
    eigenvalues.assign(n, 0.0);
    eigenvectors = Matrix(n, n);
    for (int k = 0; k < n; ++k) {
        eigenvalues[k] = a(order[k], order[k]);
        for (int i = 0; i < n; ++i) {
            eigenvectors(i, k) = v(i, order[k]);
        }
    }
}

std::vector<double> singular_values(const Matrix& m) {
    const bool wide = m.cols() > m.rows();
    const Matrix g = wide ? matmul(m, transpose(m)) : matmul(transpose(m), m);
    std::vector<double> eig;
    Matrix vecs;
    sym_eigen(g, eig, vecs);
    std::vector<double> sv(eig.size());
    for (std::size_t i = 0; i < eig.size(); ++i) {
        sv[i] = std::sqrt(std::max(0.0, eig[eig.size() - 1 - i]));
    }
    return sv;
}

int numerical_rank(const Matrix& m, double rel_tol) {
    if (m.size() == 0) {
        return 0;
    }
    const std::vector<double> sv = singular_values(m);
    const double top = sv.empty() ? 0.0 : sv.front();
    if (top == 0.0) {
        return 0;
    }
    int r = 0;
    for (double s : sv) {
        if (s > rel_tol * top) {
            ++r;
        }
    }
    return r;
}

} // namespace zlora
