// SPDX-License-Identifier: Apache-2.0
#include "tengrad/optim.hpp"

#include <string>

#include "tengrad/errors.hpp"
#include "tengrad/flops.hpp"

namespace tengrad {

namespace {

constexpr std::size_t kExactNgdParamCap = 4096;

void check_grads(const Network& net, const std::vector<Tensor>& grads, const char* what) {
    if (grads.size() != net.num_param_layers()) {
        throw ContractError(std::string(what) + ": expected one gradient per parameterized layer");
    }
    for (std::size_t pl = 0; pl < grads.size(); ++pl) {
        if (!grads[pl].same_shape(net.params(pl))) {
            throw ShapeError(std::string(what) + ": gradient shape mismatch at layer " +
                             std::to_string(pl));
        }
    }
}

// Shared momentum / weight-decay scheme; writes the updated parameters.
void apply_direction(Network& net, OptimState& state, std::size_t pl, const Tensor& dir) {
    const OptimConfig& cfg = state.config;
    const Tensor& param = net.params(pl);
    Tensor update = dir;
    if (cfg.weight_decay != 0.0) {
        update = add(update, scale(param, cfg.weight_decay));
    }
    Tensor& buf = state.momentum_buf[pl];
    if (cfg.momentum != 0.0) {
        buf = add(scale(buf, cfg.momentum), update);
    } else {
        buf = update;
    }
    net.set_params(pl, sub(param, scale(buf, cfg.lr)));
}

Tensor vec_cm(const Tensor& a) {
    Tensor v = Tensor::zeros({a.rows() * a.cols(), 1});
    for (std::size_t c = 0; c < a.cols(); ++c) {
        for (std::size_t r = 0; r < a.rows(); ++r) v(c * a.rows() + r, 0) = a(r, c);
    }
    return v;
}

Tensor unvec_cm(const Tensor& v, std::size_t rows, std::size_t cols) {
    Tensor a = Tensor::zeros({rows, cols});
    for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t r = 0; r < rows; ++r) a(r, c) = v(c * rows + r, 0);
    }
    return a;
}

}  // namespace

void OptimConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optimizer.momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("optimizer.weight_decay must be nonnegative");
    if (method != Method::Sgd && !(damping > 0.0)) {
        throw ConfigError("optimizer.damping must be positive for the natural-gradient methods");
    }
    if (inversion_freq == 0) throw ConfigError("optimizer.inversion_freq must be at least 1");
}

OptimState::OptimState(const Network& net, OptimConfig cfg) : config(cfg) {
    config.validate();
    momentum_buf.reserve(net.num_param_layers());
    for (std::size_t pl = 0; pl < net.num_param_layers(); ++pl) {
        momentum_buf.push_back(Tensor::zeros(net.params(pl).shape()));
    }
    if (config.method == Method::Tengrad) {
        blocks.resize(net.num_param_layers());
    }
}

void sgd_step(Network& net, OptimState& state, const std::vector<Tensor>& grads) {
    check_grads(net, grads, "sgd_step");
    for (std::size_t pl = 0; pl < grads.size(); ++pl) {
        apply_direction(net, state, pl, grads[pl]);
    }
    ++state.step_count;
}

void tengrad_step(Network& net, OptimState& state, const BatchCache& cache,
                  const std::vector<Tensor>& grads) {
    check_grads(net, grads, "tengrad_step");
    if (state.blocks.size() != net.num_param_layers()) {
        throw ContractError("tengrad_step: state was not built for the Tengrad method");
    }
    const bool refresh = refresh_due(state.step_count, state.config.inversion_freq);
    for (std::size_t pl = 0; pl < net.num_param_layers(); ++pl) {
        FisherBlock& block = state.blocks[pl];
        if (refresh) {
            refresh_block(block, net, cache, pl, state.config.damping, state.config.gram_mode);
        } else {
            if (block.staleness + 1 > state.config.inversion_freq) {
                throw ContractError("tengrad_step: factored Gram outlived its refresh period");
            }
            ++block.staleness;
        }
    }
    for (std::size_t pl = 0; pl < grads.size(); ++pl) {
        apply_direction(net, state, pl, woodbury_direction(state.blocks[pl], grads[pl]));
    }
    ++state.step_count;
}

void exact_ngd_step(Network& net, OptimState& state, const BatchCache& cache,
                    const std::vector<Tensor>& grads) {
    check_grads(net, grads, "exact_ngd_step");
    net.check_cache(cache);
    const double alpha = state.config.damping;
    if (!(alpha > 0.0)) {
        throw ContractError("exact_ngd_step: damping must be positive");
    }
    std::vector<Tensor> dirs;
    dirs.reserve(grads.size());
    for (std::size_t pl = 0; pl < grads.size(); ++pl) {
        const std::size_t p = grads[pl].rows() * grads[pl].cols();
        if (p > kExactNgdParamCap) {
            throw ContractError("exact_ngd_step: layer " + std::to_string(pl) + " has " +
                                std::to_string(p) + " parameters, above the cap of " +
                                std::to_string(kExactNgdParamCap));
        }
        const Tensor j = per_sample_jacobian_oracle(net, cache, pl);
        Tensor a = matmul(transpose(j), j);
        a = add_scaled_identity(scale(a, 1.0 / static_cast<double>(cache.m)), alpha);
        const Tensor x = solve_spd(a, vec_cm(grads[pl]));
        dirs.push_back(unvec_cm(x, grads[pl].rows(), grads[pl].cols()));
    }
    for (std::size_t pl = 0; pl < grads.size(); ++pl) {
        apply_direction(net, state, pl, dirs[pl]);
    }
    ++state.step_count;
}

void optimizer_step(Network& net, OptimState& state, const BatchCache& cache,
                    const std::vector<Tensor>& grads) {
    switch (state.config.method) {
        case Method::Sgd:
            sgd_step(net, state, grads);
            return;
        case Method::Tengrad:
            tengrad_step(net, state, cache, grads);
            return;
        case Method::ExactNgd:
            exact_ngd_step(net, state, cache, grads);
            return;
    }
    throw ContractError("optimizer_step: unknown method");
}

}  // namespace tengrad
