// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "zlora/rng.hpp"

namespace zlora {

/// Dense 2-D array of 64-bit reals, row-major. The single numeric carrier
/// for weights, activations and gradients. Matrices are plain values;
/// once built they are safe to share read-only across threads.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols);                            // zero-filled
    Matrix(int rows, int cols, std::vector<double> data);  // takes ownership

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(int i, int j) { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
    double operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    const std::vector<double>& vec() const { return data_; }
    std::vector<double>& vec() { return data_; }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    std::string shape_str() const;

    bool all_finite() const;

    static Matrix zeros(int rows, int cols) { return Matrix(rows, cols); }
    static Matrix filled(int rows, int cols, double v);
    static Matrix identity(int n);
    /// Column vector from values.
    static Matrix column(const std::vector<double>& v);
    static Matrix gaussian(int rows, int cols, SplitMix64& rng, double stddev = 1.0);
    static Matrix uniform(int rows, int cols, SplitMix64& rng, double lo, double hi);

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

bool operator==(const Matrix& a, const Matrix& b);

// ---- eager kernels -------------------------------------------------------
// These are the single source of arithmetic truth; the autodiff tape calls
// them for its forward values. All throw ShapeError naming both shapes on
// mismatch.

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
Matrix sigmoid(const Matrix& a);
Matrix silu(const Matrix& a);
Matrix relu(const Matrix& a);
Matrix transpose(const Matrix& a);

/// Columns of `a` first, then columns of `b`. Zero-column operands are legal
/// neutral elements.
Matrix concat_cols(const Matrix& a, const Matrix& b);
Matrix concat_cols(const std::vector<Matrix>& parts);

/// Contiguous column slice [start, start+len).
Matrix select_cols(const Matrix& m, int start, int len);

/// Column i of the result is w(i) * column i of m; w is a column vector of
/// length m.cols (rank-wise scaling, i.e. m * diag(w)).
Matrix diag_scale_cols(const Matrix& m, const Matrix& w);

/// Per-column LayerNorm with population variance: each column is centered,
/// divided by sqrt(var + eps), then scaled/shifted by gamma/beta (column
/// vectors of length m.rows).
Matrix layernorm_cols(const Matrix& m, const Matrix& gamma, const Matrix& beta, double eps);

/// Row-wise softmax (max-shifted).
Matrix softmax_rows(const Matrix& m);

/// Stack groups of `factor` consecutive columns into single tall columns;
/// the final group is zero-padded. (d x T) -> (factor*d x ceil(T/factor)).
Matrix stack_cols(const Matrix& m, int factor);

/// Column vector of row means (mean over columns).
Matrix mean_cols(const Matrix& m);

/// Add column vector v to every column of m.
Matrix add_bias_cols(const Matrix& m, const Matrix& v);

double sum(const Matrix& m);
double frobenius_norm(const Matrix& m);
double frobenius_inner(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

// ---- small symmetric eigensolver ----------------------------------------

/// Eigenvalues (ascending) and eigenvectors (columns of V) of a symmetric
/// matrix, by cyclic Jacobi rotations. Intended for small n (similarity
/// matrices, rank checks).
void sym_eigen(const Matrix& s, std::vector<double>& eigenvalues, Matrix& eigenvectors);

/// Singular values (descending), via eigenvalues of m^T m or m m^T.
std::vector<double> singular_values(const Matrix& m);

/// Counts singular values above rel_tol times the largest one. Resolution is
/// limited to about 1e-8 relative by the Gram-matrix construction.
int numerical_rank(const Matrix& m, double rel_tol = 1e-6);

} // namespace zlora
