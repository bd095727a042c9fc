// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "tengrad/fisher.hpp"
#include "tengrad/net.hpp"
#include "tengrad/tensor.hpp"

// ---------------------------------------------------------------------------
// Optimizers over Network parameters. All three methods share one momentum
// and weight-decay scheme applied to an update direction dir:
//
//   buf   <- momentum * buf + (dir + weight_decay * param)
//   param <- param - lr * buf
//
// Sgd uses the mean gradient as dir. Tengrad preconditions it with the
// damped per-layer Fisher block, refreshing the factored Gram every
// inversion_freq steps and reusing it in between. ExactNgd materializes the
// per-sample Jacobian and solves the damped system directly; it is the
// reference the factorized path must match when refreshed every step, and is
// capped to small layers by construction.
// ---------------------------------------------------------------------------

namespace tengrad {

enum class Method { Sgd, Tengrad, ExactNgd };

struct OptimConfig {
    Method method = Method::Sgd;
    double lr = 0.01;
    double momentum = 0.0;
    double weight_decay = 0.0;
    double damping = 0.0;            // alpha; the NGD methods require > 0
    std::size_t inversion_freq = 1;  // Tengrad refresh period
    ConvGramMode gram_mode = ConvGramMode::Blocked;

    void validate() const;  // ConfigError naming the offending field
};

struct OptimState {
    OptimConfig config;
    std::size_t step_count = 0;
    std::vector<Tensor> momentum_buf;  // one per parameterized layer
    std::vector<FisherBlock> blocks;   // Tengrad only

    OptimState(const Network& net, OptimConfig cfg);
};

// One Sgd update from the mean gradients.
void sgd_step(Network& net, OptimState& state, const std::vector<Tensor>& grads);

// One Tengrad update. Refreshes the Fisher blocks from the cache when the
// step count hits the refresh schedule, otherwise reuses the stored factors
// against the current batch's Jacobian products.
void tengrad_step(Network& net, OptimState& state, const BatchCache& cache,
                  const std::vector<Tensor>& grads);

// One exact damped natural-gradient update via the explicit per-sample
// Jacobian. ContractError above 4096 parameters in a layer.
void exact_ngd_step(Network& net, OptimState& state, const BatchCache& cache,
                    const std::vector<Tensor>& grads);

// Dispatch on state.config.method.
void optimizer_step(Network& net, OptimState& state, const BatchCache& cache,
                    const std::vector<Tensor>& grads);

}  // namespace tengrad
