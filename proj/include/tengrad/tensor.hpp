// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <initializer_list>
#include <memory>
#include <vector>

#include "tengrad/errors.hpp"
#include "tengrad/flops.hpp"

// ---------------------------------------------------------------------------
// Dense tensor core.
//
// Tensor is a row-major N-dimensional array of doubles; everything else in
// the project moves values through it. Operations are pure: operands are
// never mutated, results are freshly allocated, and each call adds its
// nominal multiply-add count to the thread-local counter (see flops.hpp).
//
// Matrix convention: a 2-D tensor with shape {r, c} stores element (i, j) at
// data[i * c + j].
// ---------------------------------------------------------------------------

namespace tengrad {

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor ones(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values);
    static Tensor identity(std::size_t n);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }

    // 2-D accessors; ShapeError when the tensor is not a matrix.
    std::size_t rows() const;
    std::size_t cols() const;
    double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }

    // General N-d accessor.
    double at(std::initializer_list<std::size_t> idx) const;
    double& at(std::initializer_list<std::size_t> idx);

    const double* data() const { return data_.data(); }
    double* data() { return data_.data(); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    // Reinterpret the buffer with a new shape of identical element count.
    Tensor reshaped(std::vector<std::size_t> shape) const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// --- shape helpers ---------------------------------------------------------

// Output spatial extent of a convolution: floor((in + 2p - d) / s) + 1.
// ShapeError when the kernel cannot be placed at least once.
std::size_t conv_out_dim(std::size_t in, std::size_t d, std::size_t s, std::size_t p);

// --- arithmetic ------------------------------------------------------------

// (r x k)(k x c) matrix product. Counts r*k*c multiply-adds.
Tensor matmul(const Tensor& a, const Tensor& b);

// Transposed copy. Free of multiply-adds.
Tensor transpose(const Tensor& a);

// Elementwise product of same-shape tensors. Counts one multiply per element.
Tensor hadamard(const Tensor& a, const Tensor& b);

// sum(a .* b) over all elements. Counts one multiply-add per element.
double hadamard_reduce(const Tensor& a, const Tensor& b);

// a + b and a - b. Free of multiply-adds.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);

// s * a. Counts one multiply per element.
Tensor scale(const Tensor& a, double s);

// a + alpha I for square a. Free of multiply-adds.
Tensor add_scaled_identity(const Tensor& a, double alpha);

// Column sums of a matrix, returned as a 1 x c row. Additive, not counted.
Tensor col_sums(const Tensor& a);

// Inner product of two same-shape tensors. Counts one multiply-add per element.
double dot(const Tensor& a, const Tensor& b);

// Scale each column j of a by v(0, j); v is 1 x c. Counts r*c multiplies.
Tensor scale_cols(const Tensor& a, const Tensor& v);

// Frobenius norm. Counted as size() multiply-adds.
double frobenius_norm(const Tensor& a);

// Largest absolute entry. Not counted.
double max_abs(const Tensor& a);

// Column-wise Khatri-Rao product of d_i x m and d_o x m matrices: column j of
// the (d_i * d_o) x m result is the Kronecker product g_j (x) i_j, i.e. the
// column-major vec of i_j g_j^T. Counts d_i*d_o*m multiplies.
Tensor khatri_rao_cols(const Tensor& i_mat, const Tensor& g_mat);

// --- SPD solves ------------------------------------------------------------

// Cached symmetric triangular factorization of an SPD matrix. Copyable; the
// factor is shared and immutable.
class SpdFactor {
public:
    SpdFactor() = default;

    std::size_t dim() const;
    bool valid() const { return impl_ != nullptr; }

    // Solve A x = b for b with dim() rows. Counts trisolve_madds(dim, cols);
    // verifies the residual against 1e-9 * max|b| and finiteness.
    Tensor solve(const Tensor& b) const;

private:
    friend SpdFactor spd_factor(const Tensor& a);
    struct Impl;
    std::shared_ptr<const Impl> impl_;
};

// Factor a symmetric positive definite matrix. Symmetry is required within
// 1e-12 absolute (ContractError otherwise); a non-positive pivot raises
// DampingError. Counts cholesky_madds(n).
SpdFactor spd_factor(const Tensor& a);

// One-shot factor + solve.
Tensor solve_spd(const Tensor& a, const Tensor& b);

// Smallest eigenvalue of a symmetric matrix (symmetric within 1e-12,
// ContractError otherwise). Relative accuracy 1e-8. Diagnostic; not counted.
double sym_eig_min(const Tensor& a);

// Largest eigenvalue, same contract as sym_eig_min.
double sym_eig_max(const Tensor& a);

// --- convolution unfolding ---------------------------------------------------

// Unfold a single sample x (flattened c_in x h x w, channel-major) into the
// patch matrix of shape (h_out * w_out) x (c_in * d * d) for a d x d kernel
// with stride s and zero padding p. Row r is the receptive field of output
// position r = oy * w_out + ox; columns are ordered channel-major, then
// kernel row, then kernel column. Pure data movement, not counted, and
// bit-stable: the same input always produces the identical buffer.
Tensor unfold_conv(const Tensor& x, std::size_t c_in, std::size_t h, std::size_t w,
                   std::size_t d, std::size_t s, std::size_t p);

}  // namespace tengrad
