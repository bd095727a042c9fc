// SPDX-License-Identifier: Apache-2.0
#include "tengrad/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <utility>

namespace tengrad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapConstRow = Eigen::Map<const RowMat>;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::size_t b) { return a * b; });
}

std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

void require_matrix(const Tensor& t, const char* name) {
    if (t.ndim() != 2) {
        throw ShapeError(std::string(name) + " must be 2-D, got shape " + shape_string(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
    }
}

// Symmetry gate for SPD/eigen routines: 1e-12 absolute.
void require_symmetric(const Tensor& a, const char* op) {
    require_matrix(a, op);
    if (a.rows() != a.cols()) {
        throw ShapeError(std::string(op) + ": matrix must be square, got " + shape_string(a.shape()));
    }
    const std::size_t n = a.rows();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (std::abs(a(i, j) - a(j, i)) > 1e-12) {
                std::ostringstream os;
                os << op << ": operand asymmetric at (" << i << "," << j << "): "
                   << a(i, j) << " vs " << a(j, i);
                throw NumericError(os.str());
            }
        }
    }
}

void require_finite(const Tensor& a, const char* op) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(a.data()[i])) {
            throw NumericError(std::string(op) + ": non-finite entry at flat index " +
                               std::to_string(i));
        }
    }
}

}  // namespace

// --- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_.assign(shape_product(t.shape_), 0.0);
    return t;
}

Tensor Tensor::ones(std::vector<std::size_t> shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_.assign(shape_product(t.shape_), value);
    return t;
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values) {
    if (shape_product(shape) != values.size()) {
        throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                         " values for shape " + shape_string(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    return t;
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
}

std::size_t Tensor::rows() const {
    require_matrix(*this, "tensor");
    return shape_[0];
}

std::size_t Tensor::cols() const {
    require_matrix(*this, "tensor");
    return shape_[1];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
    return const_cast<Tensor*>(this)->at(idx);
}

double& Tensor::at(std::initializer_list<std::size_t> idx) {
    if (idx.size() != shape_.size()) {
        throw ShapeError("at: " + std::to_string(idx.size()) + " indices for " +
                         std::to_string(shape_.size()) + "-D tensor");
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
        if (i >= shape_[axis]) {
            throw ShapeError("at: index " + std::to_string(i) + " out of range on axis " +
                             std::to_string(axis));
        }
        flat = flat * shape_[axis] + i;
        ++axis;
    }
    return data_[flat];
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    if (shape_product(shape) != size()) {
        throw ShapeError("reshaped: element count mismatch, " + shape_string(shape_) +
                         " to " + shape_string(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
}

// --- shape helpers -----------------------------------------------------------

std::size_t conv_out_dim(std::size_t in, std::size_t d, std::size_t s, std::size_t p) {
    if (d == 0 || s == 0) throw ShapeError("conv_out_dim: kernel and stride must be positive");
    if (in + 2 * p < d) {
        throw ShapeError("conv_out_dim: kernel " + std::to_string(d) +
                         " larger than padded input " + std::to_string(in + 2 * p));
    }
    return (in + 2 * p - d) / s + 1;
}

// --- arithmetic --------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul lhs");
    require_matrix(b, "matmul rhs");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()));
    }
    Tensor out = Tensor::zeros({a.rows(), b.cols()});
    MapConstRow ma(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    MapConstRow mb(b.data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
    MapRow mo(out.data(), static_cast<Eigen::Index>(out.rows()), static_cast<Eigen::Index>(out.cols()));
    mo.noalias() = ma * mb;
    flops::add(static_cast<std::uint64_t>(a.rows()) * a.cols() * b.cols());
    return out;
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    Tensor out = Tensor::zeros({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    }
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    flops::add(a.size());
    return out;
}

double hadamard_reduce(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard_reduce");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i] * b.data()[i];
    flops::add(a.size());
    return acc;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = s * a.data()[i];
    flops::add(a.size());
    return out;
}

Tensor add_scaled_identity(const Tensor& a, double alpha) {
    require_matrix(a, "add_scaled_identity");
    if (a.rows() != a.cols()) {
        throw ShapeError("add_scaled_identity: matrix must be square");
    }
    Tensor out = a;
    for (std::size_t i = 0; i < a.rows(); ++i) out(i, i) += alpha;
    return out;
}

Tensor col_sums(const Tensor& a) {
    require_matrix(a, "col_sums");
    Tensor out = Tensor::zeros({1, a.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
    }
    return out;
}

double dot(const Tensor& a, const Tensor& b) { return hadamard_reduce(a, b); }

Tensor scale_cols(const Tensor& a, const Tensor& v) {
    require_matrix(a, "scale_cols");
    require_matrix(v, "scale_cols weights");
    if (v.rows() != 1 || v.cols() != a.cols()) {
        throw ShapeError("scale_cols: weights must be 1 x " + std::to_string(a.cols()));
    }
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j) * v(0, j);
    }
    flops::add(a.size());
    return out;
}

double frobenius_norm(const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i] * a.data()[i];
    flops::add(a.size());
    return std::sqrt(acc);
}

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i]));
    return m;
}

Tensor khatri_rao_cols(const Tensor& i_mat, const Tensor& g_mat) {
    require_matrix(i_mat, "khatri_rao_cols lhs");
    require_matrix(g_mat, "khatri_rao_cols rhs");
    if (i_mat.cols() != g_mat.cols()) {
        throw ShapeError("khatri_rao_cols: column counts " + std::to_string(i_mat.cols()) +
                         " vs " + std::to_string(g_mat.cols()));
    }
    const std::size_t di = i_mat.rows();
    const std::size_t dg = g_mat.rows();
    const std::size_t m = i_mat.cols();
    // Column j is g_j (x) i_j: entry (a * di + b) holds g(a, j) * i(b, j),
    // i.e. the column-major vec of i_j g_j^T.
    Tensor out = Tensor::zeros({di * dg, m});
    for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t a = 0; a < dg; ++a) {
            const double g = g_mat(a, j);
            for (std::size_t b = 0; b < di; ++b) out(a * di + b, j) = g * i_mat(b, j);
        }
    }
    flops::add(static_cast<std::uint64_t>(di) * dg * m);
    return out;
}

// --- SPD solves ----------------------------------------------------------------

struct SpdFactor::Impl {
    Eigen::LLT<Eigen::MatrixXd> llt;
    Eigen::MatrixXd a;
    std::size_t n = 0;
};

std::size_t SpdFactor::dim() const { return impl_ ? impl_->n : 0; }

Tensor SpdFactor::solve(const Tensor& b) const {
    if (!impl_) throw ContractError("SpdFactor::solve: factor is empty");
    require_matrix(b, "SpdFactor::solve rhs");
    if (b.rows() != impl_->n) {
        throw ShapeError("SpdFactor::solve: rhs has " + std::to_string(b.rows()) +
                         " rows, factor dimension is " + std::to_string(impl_->n));
    }
    MapConstRow mb(b.data(), static_cast<Eigen::Index>(b.rows()), static_cast<Eigen::Index>(b.cols()));
    Eigen::MatrixXd x = impl_->llt.solve(mb);
    flops::add(flops::trisolve_madds(impl_->n, b.cols()));

    // Residual gate: ||A x - b||_inf <= 1e-9 * ||b||_inf.
    const double bnorm = mb.cwiseAbs().maxCoeff();
    const double resid = (impl_->a * x - mb).cwiseAbs().maxCoeff();
    if (!std::isfinite(resid) || resid > 1e-9 * std::max(bnorm, 1e-300)) {
        std::ostringstream os;
        os << "SpdFactor::solve: residual " << resid << " exceeds 1e-9 * " << bnorm;
        throw NumericError(os.str());
    }

    Tensor out = Tensor::zeros({b.rows(), b.cols()});
    MapRow mo(out.data(), static_cast<Eigen::Index>(out.rows()), static_cast<Eigen::Index>(out.cols()));
    mo = x;
    return out;
}

SpdFactor spd_factor(const Tensor& a) {
    require_symmetric(a, "spd_factor");
    require_finite(a, "spd_factor");
    auto impl = std::make_shared<SpdFactor::Impl>();
    impl->n = a.rows();
    impl->a.resize(static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    MapConstRow ma(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    impl->a = ma;
    impl->llt.compute(impl->a);
    if (impl->llt.info() != Eigen::Success) {
        throw DampingError(
            "spd_factor: matrix is not positive definite at working precision; "
            "increase the damping term");
    }
    flops::add(flops::cholesky_madds(a.rows()));
    SpdFactor f;
    f.impl_ = std::move(impl);
    return f;
}

Tensor solve_spd(const Tensor& a, const Tensor& b) { return spd_factor(a).solve(b); }

double sym_eig_min(const Tensor& a) {
    require_symmetric(a, "sym_eig_min");
    require_finite(a, "sym_eig_min");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    MapConstRow ma(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    m = ma;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) {
        throw NumericError("sym_eig_min: eigenvalue iteration failed to converge");
    }
    return es.eigenvalues()(0);
}

double sym_eig_max(const Tensor& a) {
    require_symmetric(a, "sym_eig_max");
    require_finite(a, "sym_eig_max");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    MapConstRow ma(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
    m = ma;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) {
        throw NumericError("sym_eig_max: eigenvalue iteration failed to converge");
    }
    return es.eigenvalues()(es.eigenvalues().size() - 1);
}

// --- convolution unfolding ------------------------------------------------------

Tensor unfold_conv(const Tensor& x, std::size_t c_in, std::size_t h, std::size_t w,
                   std::size_t d, std::size_t s, std::size_t p) {
    if (x.size() != c_in * h * w) {
        throw ShapeError("unfold_conv: sample has " + std::to_string(x.size()) +
                         " values, expected " + std::to_string(c_in * h * w));
    }
    const std::size_t h_out = conv_out_dim(h, d, s, p);
    const std::size_t w_out = conv_out_dim(w, d, s, p);
    Tensor out = Tensor::zeros({h_out * w_out, c_in * d * d});
    const double* px = x.data();
    for (std::size_t oy = 0; oy < h_out; ++oy) {
        for (std::size_t ox = 0; ox < w_out; ++ox) {
            const std::size_t r = oy * w_out + ox;
            for (std::size_t c = 0; c < c_in; ++c) {
                for (std::size_t kr = 0; kr < d; ++kr) {
                    const std::ptrdiff_t iy =
                        static_cast<std::ptrdiff_t>(oy * s + kr) - static_cast<std::ptrdiff_t>(p);
                    for (std::size_t kc = 0; kc < d; ++kc) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * s + kc) - static_cast<std::ptrdiff_t>(p);
                        double v = 0.0;
                        if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                            ix < static_cast<std::ptrdiff_t>(w)) {
                            v = px[c * h * w + static_cast<std::size_t>(iy) * w +
                                   static_cast<std::size_t>(ix)];
                        }
                        out(r, c * d * d + kr * d + kc) = v;
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace tengrad
