// SPDX-License-Identifier: Apache-2.0
#include "tengrad/fisher.hpp"

#include <cmath>
#include <cstddef>
#include <string>

#include "tengrad/errors.hpp"
#include "tengrad/flops.hpp"

namespace tengrad {

namespace {

// Gram entries of (i,j) and (j,i) are reduced independently and may disagree
// in the last bits; the factorization contract wants an exactly symmetric
// matrix. Checks the drift is rounding-sized, then averages. Not counted.
void enforce_symmetry(Tensor& a, const char* what) {
    const std::size_t n = a.rows();
    if (n != a.cols()) throw ShapeError(std::string(what) + ": expected a square matrix");
    const double tol = 1e-10 * std::max(1.0, max_abs(a));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double x = a(i, j);
            const double y = a(j, i);
            if (std::abs(x - y) > tol) {
                throw NumericError(std::string(what) + ": asymmetry " +
                                   std::to_string(std::abs(x - y)) + " exceeds tolerance");
            }
            const double v = 0.5 * (x + y);
            a(i, j) = v;
            a(j, i) = v;
        }
    }
}

void require_finite(const Tensor& a, const char* what) {
    const double* p = a.data();
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (!std::isfinite(p[k])) {
            throw NumericError(std::string(what) + ": non-finite entry");
        }
    }
}

// Validates a conv cache pair: equal sample counts, per-sample shapes
// (spatial x f) and (spatial x c_out), all consistent.
struct ConvDims {
    std::size_t m = 0;
    std::size_t spatial = 0;
    std::size_t f = 0;
    std::size_t c_out = 0;
};

ConvDims conv_dims(const std::vector<Tensor>& i_samples, const std::vector<Tensor>& g_samples,
                   const char* what) {
    if (i_samples.empty() || i_samples.size() != g_samples.size()) {
        throw ShapeError(std::string(what) + ": patch and derivative sample counts differ");
    }
    ConvDims d;
    d.m = i_samples.size();
    d.spatial = i_samples[0].rows();
    d.f = i_samples[0].cols();
    d.c_out = g_samples[0].cols();
    for (std::size_t i = 0; i < d.m; ++i) {
        if (i_samples[i].rows() != d.spatial || i_samples[i].cols() != d.f ||
            g_samples[i].rows() != d.spatial || g_samples[i].cols() != d.c_out) {
            throw ShapeError(std::string(what) + ": ragged per-sample shapes at sample " +
                             std::to_string(i));
        }
    }
    return d;
}

const LayerCache& cache_layer(const BatchCache& cache, std::size_t pl, const char* what) {
    if (!cache.has_derivatives) {
        throw ContractError(std::string(what) + ": cache has no derivatives; run backward first");
    }
    if (pl >= cache.layers.size()) {
        throw ContractError(std::string(what) + ": parameterized layer index " +
                            std::to_string(pl) + " out of range (have " +
                            std::to_string(cache.layers.size()) + ")");
    }
    return cache.layers[pl];
}

}  // namespace

// --- covariance factorizations ---------------------------------------------

DenseFactorization covfactor_dense(const Tensor& i_mat, const Tensor& g_mat) {
    if (i_mat.cols() != g_mat.cols()) {
        throw ShapeError("covfactor_dense: cache column counts differ");
    }
    DenseFactorization f;
    f.c1 = matmul(transpose(i_mat), i_mat);
    f.c2 = matmul(transpose(g_mat), g_mat);
    f.gram = hadamard(f.c1, f.c2);
    require_finite(f.gram, "covfactor_dense");
    enforce_symmetry(f.gram, "covfactor_dense");
    if (testhook::corrupt_dense_gram.load()) {
        f.gram(0, 0) = -f.gram(0, 0);
    }
    return f;
}

ConvFactorization covfactor_conv(const std::vector<Tensor>& i_samples,
                                 const std::vector<Tensor>& g_samples, ConvGramMode mode) {
    const ConvDims d = conv_dims(i_samples, g_samples, "covfactor_conv");
    ConvFactorization out;
    out.gram = Tensor::zeros({d.m, d.m});

    if (mode == ConvGramMode::Materialized) {
        // Covariance tensors written out entry by entry; quadratic in both m
        // and the spatial extent, intended for small cross-check instances.
        out.c1 = Tensor::zeros({d.m, d.m, d.spatial, d.spatial});
        out.c2 = Tensor::zeros({d.m, d.m, d.spatial, d.spatial});
        double* c1p = out.c1.data();
        double* c2p = out.c2.data();
        for (std::size_t i = 0; i < d.m; ++i) {
            for (std::size_t j = 0; j < d.m; ++j) {
                const double* ip = i_samples[i].data();
                const double* jp = i_samples[j].data();
                const double* gi = g_samples[i].data();
                const double* gj = g_samples[j].data();
                const std::size_t base = (i * d.m + j) * d.spatial * d.spatial;
                double acc = 0.0;
                for (std::size_t s = 0; s < d.spatial; ++s) {
                    for (std::size_t t = 0; t < d.spatial; ++t) {
                        double a = 0.0;
                        for (std::size_t q = 0; q < d.f; ++q) {
                            a += ip[s * d.f + q] * jp[t * d.f + q];
                        }
                        double b = 0.0;
                        for (std::size_t v = 0; v < d.c_out; ++v) {
                            b += gi[s * d.c_out + v] * gj[t * d.c_out + v];
                        }
                        c1p[base + s * d.spatial + t] = a;
                        c2p[base + s * d.spatial + t] = b;
                        acc += a * b;
                    }
                }
                out.gram(i, j) = acc;
                flops::add(d.spatial * d.spatial * (d.f + d.c_out + 1));
            }
        }
    } else {
        // Row-blocked: stack all samples once, then one matmul per sample
        // against the stack gives every (i, j) covariance block of that row.
        Tensor i_stack_t = Tensor::zeros({d.f, d.m * d.spatial});
        Tensor g_stack_t = Tensor::zeros({d.c_out, d.m * d.spatial});
        for (std::size_t j = 0; j < d.m; ++j) {
            for (std::size_t s = 0; s < d.spatial; ++s) {
                for (std::size_t q = 0; q < d.f; ++q) {
                    i_stack_t(q, j * d.spatial + s) = i_samples[j](s, q);
                }
                for (std::size_t v = 0; v < d.c_out; ++v) {
                    g_stack_t(v, j * d.spatial + s) = g_samples[j](s, v);
                }
            }
        }
        std::vector<double> row(d.m);
        for (std::size_t i = 0; i < d.m; ++i) {
            const Tensor mi = matmul(i_samples[i], i_stack_t);  // spatial x (m spatial)
            const Tensor ni = matmul(g_samples[i], g_stack_t);
            const double* mp = mi.data();
            const double* np = ni.data();
            std::fill(row.begin(), row.end(), 0.0);
            const std::size_t width = d.m * d.spatial;
            for (std::size_t r = 0; r < d.spatial; ++r) {
                const double* mrow = mp + r * width;
                const double* nrow = np + r * width;
                for (std::size_t c = 0; c < width; ++c) {
                    row[c / d.spatial] += mrow[c] * nrow[c];
                }
            }
            for (std::size_t j = 0; j < d.m; ++j) {
                out.gram(i, j) = row[j];
            }
            flops::add(d.m * d.spatial * d.spatial);
        }
    }

    require_finite(out.gram, "covfactor_conv");
    enforce_symmetry(out.gram, "covfactor_conv");
    return out;
}

std::size_t GeneralSchema::n_common() const {
    std::size_t n = 1;
    for (const std::size_t e : common) n *= e;
    return n;
}

std::size_t GeneralSchema::n_independent() const {
    std::size_t n = 1;
    for (const std::size_t e : independent) n *= e;
    return n;
}

Tensor covfactor_general(const GeneralSchema& schema, const Tensor& ihat, const Tensor& g) {
    const std::size_t nc = schema.n_common();
    const std::size_t ni = schema.n_independent();
    const std::size_t nv = schema.free_dim;
    if (nc == 0 || ni == 0 || nv == 0) {
        throw ContractError("covfactor_general: schema extents must be positive");
    }
    if (ihat.shape().size() != 3 || ihat.shape()[1] != nc || ihat.shape()[2] != ni) {
        throw ShapeError("covfactor_general: ihat must be (m, n_common, n_independent)");
    }
    if (g.shape().size() != 3 || g.shape()[1] != nv || g.shape()[2] != nc) {
        throw ShapeError("covfactor_general: g must be (m, free_dim, n_common)");
    }
    const std::size_t m = ihat.shape()[0];
    if (g.shape()[0] != m) {
        throw ShapeError("covfactor_general: operand sample counts differ");
    }

    Tensor gram = Tensor::zeros({m, m});
    const double* ih = ihat.data();
    const double* gp = g.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < nc; ++t) {
                const double* it = ih + (i * nc + t) * ni;
                for (std::size_t u = 0; u < nc; ++u) {
                    const double* ju = ih + (j * nc + u) * ni;
                    double a = 0.0;
                    for (std::size_t q = 0; q < ni; ++q) a += it[q] * ju[q];
                    double b = 0.0;
                    for (std::size_t v = 0; v < nv; ++v) {
                        b += gp[(i * nv + v) * nc + t] * gp[(j * nv + v) * nc + u];
                    }
                    acc += a * b;
                }
            }
            gram(i, j) = acc;
            flops::add(nc * nc * (ni + nv + 1));
        }
    }
    require_finite(gram, "covfactor_general");
    enforce_symmetry(gram, "covfactor_general");
    return gram;
}

GeneralOperands general_from_dense(const Tensor& i_mat, const Tensor& g_mat) {
    if (i_mat.cols() != g_mat.cols()) {
        throw ShapeError("general_from_dense: cache column counts differ");
    }
    const std::size_t m = i_mat.cols();
    const std::size_t d_in = i_mat.rows();
    const std::size_t d_out = g_mat.rows();
    GeneralOperands out;
    out.schema.common = {};
    out.schema.independent = {d_in};
    out.schema.free_dim = d_out;
    out.ihat = Tensor::zeros({m, 1, d_in});
    out.g = Tensor::zeros({m, d_out, 1});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t q = 0; q < d_in; ++q) out.ihat.at({i, 0, q}) = i_mat(q, i);
        for (std::size_t v = 0; v < d_out; ++v) out.g.at({i, v, 0}) = g_mat(v, i);
    }
    return out;
}

GeneralOperands general_from_conv(const std::vector<Tensor>& i_samples,
                                  const std::vector<Tensor>& g_samples) {
    const ConvDims d = conv_dims(i_samples, g_samples, "general_from_conv");
    GeneralOperands out;
    out.schema.common = {d.spatial};
    out.schema.independent = {d.f};
    out.schema.free_dim = d.c_out;
    out.ihat = Tensor::zeros({d.m, d.spatial, d.f});
    out.g = Tensor::zeros({d.m, d.c_out, d.spatial});
    for (std::size_t i = 0; i < d.m; ++i) {
        for (std::size_t s = 0; s < d.spatial; ++s) {
            for (std::size_t q = 0; q < d.f; ++q) {
                out.ihat.at({i, s, q}) = i_samples[i](s, q);
            }
            for (std::size_t v = 0; v < d.c_out; ++v) {
                out.g.at({i, v, s}) = g_samples[i](s, v);
            }
        }
    }
    return out;
}

// --- Jacobian-vector products ------------------------------------------------

Tensor jvp_dense(const Tensor& i_mat, const Tensor& g_mat, const Tensor& v) {
    if (v.rows() != i_mat.rows() || v.cols() != g_mat.rows()) {
        throw ShapeError("jvp_dense: operand must match the layer parameter shape");
    }
    const Tensor v1 = matmul(transpose(v), i_mat);  // d_out x m
    const Tensor v2 = hadamard(v1, g_mat);
    return transpose(col_sums(v2));  // m x 1
}

Tensor vjp_dense(const Tensor& i_mat, const Tensor& g_mat, const Tensor& v) {
    if (v.rows() != i_mat.cols() || v.cols() != 1) {
        throw ShapeError("vjp_dense: operand must be an m x 1 column");
    }
    const Tensor scaled = scale_cols(g_mat, transpose(v));
    return matmul(i_mat, transpose(scaled));  // d_in x d_out
}

Tensor jvp_conv(const std::vector<Tensor>& i_samples, const std::vector<Tensor>& g_samples,
                const Tensor& v) {
    const ConvDims d = conv_dims(i_samples, g_samples, "jvp_conv");
    if (v.rows() != d.f || v.cols() != d.c_out) {
        throw ShapeError("jvp_conv: operand must match the layer parameter shape");
    }
    Tensor jv = Tensor::zeros({d.m, 1});
    const Tensor vt = transpose(v);
    for (std::size_t i = 0; i < d.m; ++i) {
        const Tensor q = matmul(g_samples[i], vt);  // spatial x f
        jv(i, 0) = hadamard_reduce(q, i_samples[i]);
    }
    return jv;
}

Tensor vjp_conv(const std::vector<Tensor>& i_samples, const std::vector<Tensor>& g_samples,
                const Tensor& v) {
    const ConvDims d = conv_dims(i_samples, g_samples, "vjp_conv");
    if (v.rows() != d.m || v.cols() != 1) {
        throw ShapeError("vjp_conv: operand must be an m x 1 column");
    }
    Tensor acc = Tensor::zeros({d.f, d.c_out});
    for (std::size_t i = 0; i < d.m; ++i) {
        const Tensor gs = scale(g_samples[i], v(i, 0));
        acc = add(acc, matmul(transpose(i_samples[i]), gs));
    }
    return acc;
}

Tensor jvp(const BatchCache& cache, std::size_t pl, const Tensor& v) {
    const LayerCache& lc = cache_layer(cache, pl, "jvp");
    return lc.is_conv ? jvp_conv(lc.i_samples, lc.g_samples, v)
                      : jvp_dense(lc.i_mat, lc.g_mat, v);
}

Tensor vjp(const BatchCache& cache, std::size_t pl, const Tensor& v) {
    const LayerCache& lc = cache_layer(cache, pl, "vjp");
    return lc.is_conv ? vjp_conv(lc.i_samples, lc.g_samples, v)
                      : vjp_dense(lc.i_mat, lc.g_mat, v);
}

// --- Fisher blocks -------------------------------------------------------------

void refresh_block(FisherBlock& block, const Network& net, const BatchCache& cache,
                   std::size_t pl, double alpha, ConvGramMode mode) {
    net.check_cache(cache);
    const LayerCache& lc = cache_layer(cache, pl, "refresh_block");
    if (!(alpha > 0.0)) {
        throw ContractError("refresh_block: damping must be positive");
    }
    const flops::Meter meter;
    if (lc.is_conv) {
        ConvFactorization f = covfactor_conv(lc.i_samples, lc.g_samples, mode);
        block.c1 = std::move(f.c1);
        block.c2 = std::move(f.c2);
        block.gram = std::move(f.gram);
        block.conv_path = true;
        block.i0_samples = lc.i_samples;
        block.g0_samples = lc.g_samples;
        block.i0 = Tensor();
        block.g0 = Tensor();
    } else {
        DenseFactorization f = covfactor_dense(lc.i_mat, lc.g_mat);
        block.c1 = std::move(f.c1);
        block.c2 = std::move(f.c2);
        block.gram = std::move(f.gram);
        block.conv_path = false;
        block.i0 = lc.i_mat;
        block.g0 = lc.g_mat;
        block.i0_samples.clear();
        block.g0_samples.clear();
    }
    block.m = cache.m;
    const Tensor damped =
        add_scaled_identity(scale(block.gram, 1.0 / static_cast<double>(block.m)), alpha);
    block.damped = spd_factor(damped);
    block.layer = pl;
    block.alpha = alpha;
    block.staleness = 0;
    block.refresh_madds = meter.elapsed();
}

Tensor woodbury_direction(const FisherBlock& block, const Tensor& g) {
    if (!block.valid()) {
        throw ContractError("woodbury_direction: block was never refreshed");
    }
    const Tensor jv = block.conv_path ? jvp_conv(block.i0_samples, block.g0_samples, g)
                                      : jvp_dense(block.i0, block.g0, g);
    const Tensor t = block.damped.solve(jv);
    const Tensor w = block.conv_path ? vjp_conv(block.i0_samples, block.g0_samples, t)
                                     : vjp_dense(block.i0, block.g0, t);
    Tensor dir = sub(g, scale(w, 1.0 / static_cast<double>(block.m)));
    dir = scale(dir, 1.0 / block.alpha);
    return dir;
}

bool refresh_due(std::size_t k, std::size_t freq) {
    if (freq == 0) {
        throw ContractError("refresh_due: inversion frequency must be at least 1");
    }
    return k % freq == 0;
}

// --- cost model ------------------------------------------------------------------

LayerFlopReport dense_flop_report(std::size_t d_in, std::size_t d_out, std::size_t m) {
    const std::uint64_t mm = static_cast<std::uint64_t>(m) * m;
    const std::uint64_t dd = static_cast<std::uint64_t>(d_in) * d_out;
    LayerFlopReport r;
    r.tengrad_curvature = dense_gram_madds(d_in, d_out, m) + mm + flops::cholesky_madds(m);
    r.explicit_gram = mm * dd;
    r.tengrad_step = 2 * m * dd + 2 * static_cast<std::uint64_t>(m) * d_out +
                     flops::trisolve_madds(m, 1) + 2 * dd;
    r.tengrad_storage = static_cast<std::uint64_t>(m) * d_in +
                        static_cast<std::uint64_t>(m) * d_out + mm;
    return r;
}

LayerFlopReport conv_flop_report(std::size_t spatial, std::size_t f, std::size_t c_out,
                                 std::size_t m) {
    const std::uint64_t mm = static_cast<std::uint64_t>(m) * m;
    const std::uint64_t sf = static_cast<std::uint64_t>(spatial) * f;
    const std::uint64_t sc = static_cast<std::uint64_t>(spatial) * c_out;
    const std::uint64_t sfc = sf * c_out;
    LayerFlopReport r;
    r.tengrad_curvature = conv_gram_madds(spatial, f, c_out, m) + mm + flops::cholesky_madds(m);
    r.explicit_gram = mm * static_cast<std::uint64_t>(f) * c_out +
                      static_cast<std::uint64_t>(m) * sfc;
    r.tengrad_step = static_cast<std::uint64_t>(m) * (sfc + sf) + flops::trisolve_madds(m, 1) +
                     static_cast<std::uint64_t>(m) * (sc + sfc) +
                     2 * static_cast<std::uint64_t>(f) * c_out;
    r.tengrad_storage = static_cast<std::uint64_t>(m) * sf + static_cast<std::uint64_t>(m) * sc + mm;
    return r;
}

}  // namespace tengrad
