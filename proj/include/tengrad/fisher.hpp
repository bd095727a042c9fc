// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstdint>
#include <vector>

#include "tengrad/net.hpp"
#include "tengrad/tensor.hpp"

// ---------------------------------------------------------------------------
// Per-layer Fisher blocks via covariance factorization of the Gram Jacobian.
//
// For a dense layer with cached inputs I (d_i x m) and pre-activation
// derivatives G (d_o x m), the per-sample gradient matrix is the column-wise
// Khatri-Rao product J^T = I * G, and the m x m Gram factors as
//
//   J J^T = (I^T I) .* (G^T G) = C1 .* C2
//
// so the Gram costs m^2 (d_i + d_o) + m^2 multiply-adds instead of the
// m^2 d_i d_o an explicit J J^T would. For a conv layer with per-sample
// unfolded patches I_i (S x F) and derivatives G_i (S x c_out),
//
//   [J J^T]_{ij} = sum_{s,s'} (I_i I_j^T) .* (G_i G_j^T)
//
// which costs m^2 S^2 (F + c_out) + m^2 S^2. Both are instances of one
// factorization over a layer schema that splits index sets into dimensions
// common to both operands, dimensions independent between them, and the free
// output dimension; covfactor_general computes that form directly.
//
// The damped block inverse (J^T J / m + alpha I)^{-1} g is never formed:
// jvp/vjp give J g and J^T v cheaply from the cached factors, and the identity
//
//   (J^T J / m + alpha I)^{-1} g
//     = (1/alpha) (g - (1/m) J^T (J J^T / m + alpha I)^{-1} J g)
//
// turns the solve into one factorization of an m x m matrix. A block keeps
// the refresh batch's I and G alongside that factor, so between refreshes it
// applies one fixed symmetric positive definite map to fresh gradients; the
// stored doubles are exactly the m d_i + m d_o + m^2 of the cost model.
// ---------------------------------------------------------------------------

namespace tengrad {

// --- covariance factorizations ---------------------------------------------

struct DenseFactorization {
    Tensor c1;    // I^T I, m x m
    Tensor c2;    // G^T G, m x m
    Tensor gram;  // C1 .* C2 == J J^T
};

// Factor the Gram of a dense layer from its caches. Column counts must match.
DenseFactorization covfactor_dense(const Tensor& i_mat, const Tensor& g_mat);

enum class ConvGramMode {
    Blocked,       // per-sample row blocks, never materializes m x m x S x S
    Materialized,  // builds the full covariance tensors; small inputs only
};

struct ConvFactorization {
    Tensor gram;  // m x m
    // Filled in Materialized mode: covariance tensors with layout
    // (i, j, s, s'); c1 from the patch rows, c2 from the derivative rows.
    Tensor c1;
    Tensor c2;
};

ConvFactorization covfactor_conv(const std::vector<Tensor>& i_samples,
                                 const std::vector<Tensor>& g_samples,
                                 ConvGramMode mode = ConvGramMode::Blocked);

// Layer schema for the general factorization: extents of the index sets the
// two operands share (common), the sets each owns alone (independent lives on
// the patch side), and the free output extent on the derivative side.
struct GeneralSchema {
    std::vector<std::size_t> common;
    std::vector<std::size_t> independent;
    std::size_t free_dim = 1;

    std::size_t n_common() const;
    std::size_t n_independent() const;
};

// ihat is (m, n_common, n_independent); g is (m, free_dim, n_common).
// gram[i][j] = sum_{t,t'} <ihat[i,t,:], ihat[j,t',:]> * <g[i,:,t], g[j,:,t']>.
Tensor covfactor_general(const GeneralSchema& schema, const Tensor& ihat, const Tensor& g);

// Repack dense / conv caches into the general schema (test and cross-check
// path; the specialized routines above are the production path).
struct GeneralOperands {
    GeneralSchema schema;
    Tensor ihat;
    Tensor g;
};
GeneralOperands general_from_dense(const Tensor& i_mat, const Tensor& g_mat);
GeneralOperands general_from_conv(const std::vector<Tensor>& i_samples,
                                  const std::vector<Tensor>& g_samples);

// --- Jacobian-vector products ------------------------------------------------

// J vec(v) for a dense layer: (v^T I .* G) summed over rows; m x 1.
Tensor jvp_dense(const Tensor& i_mat, const Tensor& g_mat, const Tensor& v);

// J^T v for a dense layer: I (v-row .* G)^T reshaped to d_i x d_o.
Tensor vjp_dense(const Tensor& i_mat, const Tensor& g_mat, const Tensor& v);

// Conv counterparts; v is (F x c_out) for jvp, m x 1 for vjp.
Tensor jvp_conv(const std::vector<Tensor>& i_samples, const std::vector<Tensor>& g_samples,
                const Tensor& v);
Tensor vjp_conv(const std::vector<Tensor>& i_samples, const std::vector<Tensor>& g_samples,
                const Tensor& v);

// Cache-level dispatch across dense/conv layers.
Tensor jvp(const BatchCache& cache, std::size_t pl, const Tensor& v);
Tensor vjp(const BatchCache& cache, std::size_t pl, const Tensor& v);

// --- Fisher blocks -------------------------------------------------------------

// One layer's damped curvature state: the refresh batch's Jacobian factors
// plus the factored damped Gram. Together they realize the fixed map
// (J^T J / m + alpha I)^{-1}, applied to fresh gradients between refreshes
// while staleness counts the iterations since the factorization. Parameter
// updates do not invalidate the block; drifting away from the refresh point
// is what the inversion frequency trades off.
struct FisherBlock {
    std::size_t layer = 0;
    std::size_t m = 0;
    double alpha = 0.0;
    std::size_t staleness = 0;
    bool conv_path = false;
    // Refresh-batch Jacobian factors: I and G for a dense layer, the
    // per-sample patch and derivative stacks for conv.
    Tensor i0;
    Tensor g0;
    std::vector<Tensor> i0_samples;
    std::vector<Tensor> g0_samples;
    Tensor c1;    // dense path only
    Tensor c2;    // dense path only
    Tensor gram;  // J J^T
    SpdFactor damped;  // factor of J J^T / m + alpha I
    std::uint64_t refresh_madds = 0;  // instrumented cost of the last refresh

    bool valid() const { return damped.valid(); }
};

// Recompute the block from a backward-completed cache: covariance-factorized
// Gram, damping, symmetric factorization, Jacobian factor snapshot. Resets
// staleness.
void refresh_block(FisherBlock& block, const Network& net, const BatchCache& cache,
                   std::size_t pl, double alpha, ConvGramMode mode = ConvGramMode::Blocked);

// Damped natural-gradient direction (J^T J / m + alpha I)^{-1} g with J and
// the factor both taken from the block's last refresh.
Tensor woodbury_direction(const FisherBlock& block, const Tensor& g);

// Refresh on iterations k = 0, freq, 2 freq, ...
bool refresh_due(std::size_t k, std::size_t freq);

// --- cost model ------------------------------------------------------------------

// Gram multiply-add closed forms; the instrumented counters of the
// factorization routines equal these exactly.
constexpr std::uint64_t dense_gram_madds(std::size_t d_in, std::size_t d_out, std::size_t m) {
    const std::uint64_t mm = static_cast<std::uint64_t>(m) * m;
    return mm * d_in + mm * d_out + mm;
}

constexpr std::uint64_t conv_gram_madds(std::size_t spatial, std::size_t f, std::size_t c_out,
                                        std::size_t m) {
    const std::uint64_t block = static_cast<std::uint64_t>(m) * m * spatial * spatial;
    return block * (f + c_out) + block;
}

constexpr std::uint64_t general_gram_madds(std::size_t n_common, std::size_t n_independent,
                                           std::size_t free_dim, std::size_t m) {
    const std::uint64_t block = static_cast<std::uint64_t>(m) * m * n_common * n_common;
    return block * (n_independent + free_dim) + block;
}

struct LayerFlopReport {
    std::uint64_t tengrad_curvature = 0;  // refresh: gram + damping + factorization
    std::uint64_t explicit_gram = 0;      // baseline that materializes J
    std::uint64_t tengrad_step = 0;       // one preconditioned direction
    std::uint64_t tengrad_storage = 0;    // doubles held between refreshes
};

LayerFlopReport dense_flop_report(std::size_t d_in, std::size_t d_out, std::size_t m);
LayerFlopReport conv_flop_report(std::size_t spatial, std::size_t f, std::size_t c_out,
                                 std::size_t m);

// --- test hooks --------------------------------------------------------------------

namespace testhook {
// When set, covfactor_dense flips the sign of gram(0,0). Exists so the
// verification suites can prove they catch a corrupted build.
inline std::atomic<bool> corrupt_dense_gram{false};
}  // namespace testhook

}  // namespace tengrad
