// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tengrad/tensor.hpp"

// ---------------------------------------------------------------------------
// Feed-forward networks of Dense / Conv2d / ReLU layers.
//
// Every parameterized layer is a pure linear map against an input matrix that
// the forward pass caches:
//
//   Dense:  O = W^T I        I is (d_in [+1]) x m, W is (d_in [+1]) x d_out
//   Conv2d: O_i = I_i W      I_i is S x (F [+1]) unfolded patches, per sample
//
// Bias is realized by augmenting I with a constant-one row (dense) or column
// (conv), so gradients, Jacobians, and curvature all see one weight matrix
// per layer. ReLU is a separate layer; its derivative at exactly zero is
// taken as zero.
//
// Activations flow between layers as (features x m) matrices, feature index
// channel-major for image shapes. The backward pass stores per-layer
// pre-activation derivatives G next to the cached I, which is exactly the
// pairing the covariance factorization of the Gram Jacobian consumes.
// ---------------------------------------------------------------------------

namespace tengrad {

enum class LayerKind { Dense, Conv2d, Relu };

struct LayerSpec {
    LayerKind kind = LayerKind::Dense;
    // Dense.
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    // Conv2d: d x d kernel, stride s, zero padding p.
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    std::size_t d = 0;
    std::size_t s = 1;
    std::size_t p = 0;
    bool with_bias = false;

    static LayerSpec dense(std::size_t d_in, std::size_t d_out, bool with_bias = false);
    static LayerSpec conv2d(std::size_t c_in, std::size_t c_out, std::size_t d, std::size_t s,
                            std::size_t p, bool with_bias = false);
    static LayerSpec relu();

    bool parameterized() const { return kind != LayerKind::Relu; }
};

enum class LossKind { SquaredError, CrossEntropy };

// Either a flat feature vector or a (channels, height, width) image.
struct InputShape {
    std::size_t flat = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    static InputShape vector(std::size_t dim) { return {dim, 0, 0, 0}; }
    static InputShape image(std::size_t c, std::size_t h, std::size_t w) { return {0, c, h, w}; }
    bool is_image() const { return c > 0; }
    std::size_t features() const { return is_image() ? c * h * w : flat; }
};

struct NetworkSpec {
    InputShape input;
    std::vector<LayerSpec> layers;
    LossKind loss = LossKind::SquaredError;

    // Shape-chains the layer list; ConfigError naming the offending layer on
    // any incompatibility.
    void validate() const;
    std::size_t output_dim() const;
    std::size_t param_layer_count() const;
};

// Forward/backward cache for one mini-batch at one parameter version.
struct LayerCache {
    bool is_conv = false;
    // Dense: cached inputs with bias row if any, (d_in [+1]) x m; after
    // backward, pre-activation derivatives d_out x m.
    Tensor i_mat;
    Tensor g_mat;
    // Conv: per-sample unfolded patches S x (F [+1]) and derivatives S x c_out.
    std::vector<Tensor> i_samples;
    std::vector<Tensor> g_samples;
    std::size_t spatial = 0;   // S = h_out * w_out
    std::size_t f_eff = 0;     // F (+1 with bias)
    std::size_t c_out = 0;
};

struct BatchCache {
    std::uint64_t params_version = 0;
    std::size_t m = 0;
    Tensor output;                      // network outputs, d_L x m
    std::vector<LayerCache> layers;     // one per parameterized layer
    std::vector<Tensor> relu_masks;     // one per ReLU layer, in layer order
    std::vector<Tensor> layer_inputs;   // activation entering each raw layer
    bool has_derivatives = false;       // set once backward has run
};

class Network {
public:
    explicit Network(NetworkSpec spec);

    // He-style init: weights N(0, 2 / fan_in), bias rows zero.
    static Network init(NetworkSpec spec, std::uint64_t seed);

    const NetworkSpec& spec() const { return spec_; }
    std::uint64_t version() const { return version_; }

    std::size_t num_param_layers() const { return params_.size(); }
    const Tensor& params(std::size_t pl) const;
    void set_params(std::size_t pl, Tensor w);  // bumps the version
    std::size_t param_count() const;

    // Forward pass on x (input features x m). Caches layer inputs; verifies
    // activations stay finite.
    BatchCache forward(const Tensor& x) const;

    // Backpropagate an upstream derivative (output_dim x m) through the
    // cache, filling per-layer G and returning the per-layer mean gradients
    // (1/m sum of per-sample gradients), shaped like the parameters.
    // ContractError if the cache is stale or from another batch shape.
    std::vector<Tensor> backward(BatchCache& cache, const Tensor& upstream) const;

    void check_cache(const BatchCache& cache) const;

private:
    NetworkSpec spec_;
    std::vector<Tensor> params_;
    std::vector<std::size_t> param_layer_index_;  // param layer -> raw layer
    std::uint64_t version_ = 0;
};

struct LossResult {
    double loss = 0.0;  // batch total
    Tensor grad;        // per-sample derivative d loss_i / d u_i, d_L x m
};

// SquaredError: sum over samples of 0.5 ||u_i - y_i||^2, gradient u - y.
// CrossEntropy: softmax + negative log-likelihood summed over samples; y is a
// 1 x m row of integer class labels; gradient is softmax(u) minus one-hot.
LossResult loss_and_grad(LossKind kind, const Tensor& u, const Tensor& y);

// Fraction of columns whose argmax equals the label.
double accuracy(const Tensor& u, const Tensor& labels);

// Brute-force per-sample Jacobian of parameter layer pl: row i is the
// column-major vec of sample i's gradient matrix (I_:i G_:i^T for dense,
// I_i^T G_i for conv), so J^T J / m is the layer's Fisher block. Requires a
// backward-completed cache. Reference path for tests and block dumps; cost
// grows with the full parameter count.
Tensor per_sample_jacobian_oracle(const Network& net, const BatchCache& cache, std::size_t pl);

// Central finite differences of the mean loss, step h per coordinate.
std::vector<Tensor> finite_diff_gradient(const Network& net, const Tensor& x, const Tensor& y,
                                         double h);

// Parameter checkpoint: magic "TGRD", u32 version, u32 layer count, then per
// layer a u32 rank + u32 dims header and the row-major float64 payload, all
// little-endian.
void save_checkpoint(const Network& net, const std::string& path);
void load_checkpoint(Network& net, const std::string& path);

}  // namespace tengrad
