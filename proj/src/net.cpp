// SPDX-License-Identifier: Apache-2.0
#include "tengrad/net.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tengrad/errors.hpp"
#include "tengrad/rng.hpp"

namespace tengrad {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written little-endian via raw stores");

// Activation shape flowing between layers.
struct Flow {
    bool image = false;
    std::size_t c = 0, h = 0, w = 0;
    std::size_t features = 0;
};

Flow input_flow(const InputShape& in) {
    Flow f;
    f.image = in.is_image();
    f.c = in.c;
    f.h = in.h;
    f.w = in.w;
    f.features = in.features();
    return f;
}

std::string layer_tag(std::size_t idx) { return "network.layers[" + std::to_string(idx) + "]"; }

// Walks the layer list, returning the activation shape entering each layer
// plus the final output shape (size layers + 1). Throws ConfigError naming
// the first incompatible layer.
std::vector<Flow> flow_chain(const NetworkSpec& spec) {
    std::vector<Flow> chain;
    Flow cur = input_flow(spec.input);
    if (cur.features == 0) throw ConfigError("network.input: zero features");
    chain.push_back(cur);
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        switch (l.kind) {
            case LayerKind::Dense: {
                if (l.d_in == 0 || l.d_out == 0) {
                    throw ConfigError(layer_tag(i) + ": dense dimensions must be positive");
                }
                if (cur.features != l.d_in) {
                    throw ConfigError(layer_tag(i) + ": dense expects " + std::to_string(l.d_in) +
                                      " features, incoming activation has " +
                                      std::to_string(cur.features));
                }
                cur = Flow{false, 0, 0, 0, l.d_out};
                break;
            }
            case LayerKind::Conv2d: {
                if (l.c_in == 0 || l.c_out == 0 || l.d == 0 || l.s == 0) {
                    throw ConfigError(layer_tag(i) + ": conv dimensions must be positive");
                }
                if (!cur.image) {
                    throw ConfigError(layer_tag(i) + ": conv layer needs an image activation, "
                                                     "incoming activation is flat");
                }
                if (cur.c != l.c_in) {
                    throw ConfigError(layer_tag(i) + ": conv expects " + std::to_string(l.c_in) +
                                      " channels, incoming activation has " + std::to_string(cur.c));
                }
                std::size_t h_out = 0, w_out = 0;
                try {
                    h_out = conv_out_dim(cur.h, l.d, l.s, l.p);
                    w_out = conv_out_dim(cur.w, l.d, l.s, l.p);
                } catch (const ShapeError& e) {
                    throw ConfigError(layer_tag(i) + ": " + e.what());
                }
                cur = Flow{true, l.c_out, h_out, w_out, l.c_out * h_out * w_out};
                break;
            }
            case LayerKind::Relu:
                break;
        }
        chain.push_back(cur);
    }
    return chain;
}

Tensor append_ones_row(const Tensor& a) {
    Tensor out = Tensor::zeros({a.rows() + 1, a.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
    }
    for (std::size_t j = 0; j < a.cols(); ++j) out(a.rows(), j) = 1.0;
    return out;
}

Tensor drop_last_row(const Tensor& a) {
    Tensor out = Tensor::zeros({a.rows() - 1, a.cols()});
    for (std::size_t i = 0; i + 1 < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a(i, j);
    }
    return out;
}

// ReLU selection; derivative at exactly zero is zero. Pure data selection,
// not counted as multiply-adds.
Tensor relu_mask(const Tensor& a) {
    Tensor mask = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) mask.data()[i] = a.data()[i] > 0.0 ? 1.0 : 0.0;
    return mask;
}

Tensor apply_mask(const Tensor& a, const Tensor& mask) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out.data()[i] = mask.data()[i] != 0.0 ? a.data()[i] : 0.0;
    }
    return out;
}

void require_finite_activations(const Tensor& a, std::size_t layer_idx) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(a.data()[i])) {
            throw NumericError("forward: non-finite activation after layer " +
                               std::to_string(layer_idx));
        }
    }
}

Tensor column(const Tensor& a, std::size_t j) {
    Tensor out = Tensor::zeros({a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i) out.data()[i] = a(i, j);
    return out;
}

}  // namespace

// --- specs -------------------------------------------------------------------

LayerSpec LayerSpec::dense(std::size_t d_in, std::size_t d_out, bool with_bias) {
    LayerSpec l;
    l.kind = LayerKind::Dense;
    l.d_in = d_in;
    l.d_out = d_out;
    l.with_bias = with_bias;
    return l;
}

LayerSpec LayerSpec::conv2d(std::size_t c_in, std::size_t c_out, std::size_t d, std::size_t s,
                            std::size_t p, bool with_bias) {
    LayerSpec l;
    l.kind = LayerKind::Conv2d;
    l.c_in = c_in;
    l.c_out = c_out;
    l.d = d;
    l.s = s;
    l.p = p;
    l.with_bias = with_bias;
    return l;
}

LayerSpec LayerSpec::relu() {
    LayerSpec l;
    l.kind = LayerKind::Relu;
    return l;
}

void NetworkSpec::validate() const {
    if (layers.empty()) throw ConfigError("network.layers: empty layer list");
    flow_chain(*this);
}

std::size_t NetworkSpec::output_dim() const { return flow_chain(*this).back().features; }

std::size_t NetworkSpec::param_layer_count() const {
    std::size_t n = 0;
    for (const LayerSpec& l : layers) n += l.parameterized() ? 1 : 0;
    return n;
}

// --- network -------------------------------------------------------------------

Network::Network(NetworkSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const LayerSpec& l = spec_.layers[i];
        if (!l.parameterized()) continue;
        param_layer_index_.push_back(i);
        if (l.kind == LayerKind::Dense) {
            params_.push_back(Tensor::zeros({l.d_in + (l.with_bias ? 1 : 0), l.d_out}));
        } else {
            params_.push_back(
                Tensor::zeros({l.c_in * l.d * l.d + (l.with_bias ? 1 : 0), l.c_out}));
        }
    }
}

Network Network::init(NetworkSpec spec, std::uint64_t seed) {
    Network net(std::move(spec));
    Rng rng(seed);
    for (std::size_t pl = 0; pl < net.params_.size(); ++pl) {
        const LayerSpec& l = net.spec_.layers[net.param_layer_index_[pl]];
        const std::size_t fan_in =
            l.kind == LayerKind::Dense ? l.d_in : l.c_in * l.d * l.d;
        const double beta = std::sqrt(2.0 / static_cast<double>(fan_in));
        Tensor& w = net.params_[pl];
        // Bias rows (the augmented last row) start at zero.
        for (std::size_t r = 0; r < fan_in; ++r) {
            for (std::size_t c = 0; c < w.cols(); ++c) w(r, c) = rng.normal(0.0, beta);
        }
    }
    net.version_ = 1;
    return net;
}

const Tensor& Network::params(std::size_t pl) const {
    if (pl >= params_.size()) {
        throw ContractError("params: layer index " + std::to_string(pl) + " out of range");
    }
    return params_[pl];
}

void Network::set_params(std::size_t pl, Tensor w) {
    if (pl >= params_.size()) {
        throw ContractError("set_params: layer index " + std::to_string(pl) + " out of range");
    }
    if (!w.same_shape(params_[pl])) {
        throw ShapeError("set_params: wrong shape for parameter layer " + std::to_string(pl));
    }
    params_[pl] = std::move(w);
    ++version_;
}

std::size_t Network::param_count() const {
    std::size_t n = 0;
    for (const Tensor& w : params_) n += w.size();
    return n;
}

void Network::check_cache(const BatchCache& cache) const {
    if (cache.params_version != version_) {
        throw ContractError("cache is stale: parameters were updated after the forward pass");
    }
}

BatchCache Network::forward(const Tensor& x) const {
    const std::vector<Flow> chain = flow_chain(spec_);
    if (x.ndim() != 2 || x.rows() != chain.front().features) {
        throw ShapeError("forward: input must be " + std::to_string(chain.front().features) +
                         " x m");
    }
    const std::size_t m = x.cols();
    if (m == 0) throw ShapeError("forward: empty batch");

    BatchCache cache;
    cache.params_version = version_;
    cache.m = m;

    Tensor cur = x;
    std::size_t pl = 0;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const LayerSpec& l = spec_.layers[i];
        cache.layer_inputs.push_back(cur);
        switch (l.kind) {
            case LayerKind::Dense: {
                LayerCache lc;
                lc.is_conv = false;
                lc.i_mat = l.with_bias ? append_ones_row(cur) : cur;
                cur = matmul(transpose(params_[pl]), lc.i_mat);
                cache.layers.push_back(std::move(lc));
                ++pl;
                break;
            }
            case LayerKind::Conv2d: {
                const Flow& in = chain[i];
                const Flow& out = chain[i + 1];
                const std::size_t spatial = out.h * out.w;
                LayerCache lc;
                lc.is_conv = true;
                lc.spatial = spatial;
                lc.f_eff = l.c_in * l.d * l.d + (l.with_bias ? 1 : 0);
                lc.c_out = l.c_out;
                lc.i_samples.reserve(m);
                Tensor next = Tensor::zeros({out.features, m});
                for (std::size_t j = 0; j < m; ++j) {
                    Tensor patches = unfold_conv(column(cur, j), l.c_in, in.h, in.w, l.d, l.s, l.p);
                    if (l.with_bias) {
                        Tensor aug = Tensor::ones({spatial, lc.f_eff});
                        for (std::size_t r = 0; r < spatial; ++r) {
                            for (std::size_t c = 0; c + 1 < lc.f_eff; ++c) aug(r, c) = patches(r, c);
                        }
                        patches = std::move(aug);
                    }
                    Tensor o = matmul(patches, params_[pl]);
                    for (std::size_t oc = 0; oc < l.c_out; ++oc) {
                        for (std::size_t r = 0; r < spatial; ++r) next(oc * spatial + r, j) = o(r, oc);
                    }
                    lc.i_samples.push_back(std::move(patches));
                }
                cur = std::move(next);
                cache.layers.push_back(std::move(lc));
                ++pl;
                break;
            }
            case LayerKind::Relu: {
                Tensor mask = relu_mask(cur);
                cur = apply_mask(cur, mask);
                cache.relu_masks.push_back(std::move(mask));
                break;
            }
        }
        require_finite_activations(cur, i);
    }
    cache.output = std::move(cur);
    return cache;
}

std::vector<Tensor> Network::backward(BatchCache& cache, const Tensor& upstream) const {
    check_cache(cache);
    const std::vector<Flow> chain = flow_chain(spec_);
    if (upstream.ndim() != 2 || upstream.rows() != chain.back().features ||
        upstream.cols() != cache.m) {
        throw ShapeError("backward: upstream derivative must be " +
                         std::to_string(chain.back().features) + " x " + std::to_string(cache.m));
    }
    if (cache.layers.size() != params_.size()) {
        throw ContractError("backward: cache does not match this network");
    }

    std::vector<Tensor> grads(params_.size());
    Tensor g = upstream;
    std::size_t pl = params_.size();
    std::size_t mask_idx = cache.relu_masks.size();
    const double inv_m = 1.0 / static_cast<double>(cache.m);

    for (std::size_t ri = spec_.layers.size(); ri-- > 0;) {
        const LayerSpec& l = spec_.layers[ri];
        switch (l.kind) {
            case LayerKind::Dense: {
                --pl;
                LayerCache& lc = cache.layers[pl];
                lc.g_mat = g;
                grads[pl] = scale(matmul(lc.i_mat, transpose(g)), inv_m);
                Tensor down = matmul(params_[pl], g);
                g = l.with_bias ? drop_last_row(down) : std::move(down);
                break;
            }
            case LayerKind::Conv2d: {
                --pl;
                LayerCache& lc = cache.layers[pl];
                const Flow& in = chain[ri];
                const std::size_t spatial = lc.spatial;
                lc.g_samples.clear();
                lc.g_samples.reserve(cache.m);
                Tensor acc = Tensor::zeros({lc.f_eff, l.c_out});
                Tensor down = Tensor::zeros({in.features, cache.m});
                Tensor w_t = transpose(params_[pl]);
                for (std::size_t j = 0; j < cache.m; ++j) {
                    Tensor gi = Tensor::zeros({spatial, l.c_out});
                    for (std::size_t oc = 0; oc < l.c_out; ++oc) {
                        for (std::size_t r = 0; r < spatial; ++r) gi(r, oc) = g(oc * spatial + r, j);
                    }
                    acc = add(acc, matmul(transpose(lc.i_samples[j]), gi));
                    // Scatter the patch derivatives back onto the input grid.
                    Tensor di = matmul(gi, w_t);  // spatial x f_eff
                    const std::size_t w_out = conv_out_dim(in.w, l.d, l.s, l.p);
                    for (std::size_t r = 0; r < spatial; ++r) {
                        const std::size_t oy = r / w_out;
                        const std::size_t ox = r % w_out;
                        for (std::size_t c = 0; c < l.c_in; ++c) {
                            for (std::size_t kr = 0; kr < l.d; ++kr) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * l.s + kr) -
                                    static_cast<std::ptrdiff_t>(l.p);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
                                for (std::size_t kc = 0; kc < l.d; ++kc) {
                                    const std::ptrdiff_t ix =
                                        static_cast<std::ptrdiff_t>(ox * l.s + kc) -
                                        static_cast<std::ptrdiff_t>(l.p);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(in.w)) continue;
                                    down(c * in.h * in.w + static_cast<std::size_t>(iy) * in.w +
                                             static_cast<std::size_t>(ix),
                                         j) += di(r, c * l.d * l.d + kr * l.d + kc);
                                }
                            }
                        }
                    }
                    lc.g_samples.push_back(std::move(gi));
                }
                grads[pl] = scale(acc, inv_m);
                g = std::move(down);
                break;
            }
            case LayerKind::Relu: {
                --mask_idx;
                g = apply_mask(g, cache.relu_masks[mask_idx]);
                break;
            }
        }
    }
    cache.has_derivatives = true;
    return grads;
}

// --- losses --------------------------------------------------------------------

LossResult loss_and_grad(LossKind kind, const Tensor& u, const Tensor& y) {
    LossResult res;
    if (kind == LossKind::SquaredError) {
        if (!u.same_shape(y)) {
            throw ShapeError("loss_and_grad: squared error needs matching shapes");
        }
        double acc = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            const double d = u.data()[i] - y.data()[i];
            acc += d * d;
        }
        flops::add(u.size());
        res.loss = 0.5 * acc;
        res.grad = sub(u, y);
        return res;
    }

    // Cross entropy: stabilized softmax, negative log-likelihood, gradient
    // softmax(u) minus one-hot.
    if (y.ndim() != 2 || y.rows() != 1 || y.cols() != u.cols()) {
        throw ShapeError("loss_and_grad: labels must be 1 x m");
    }
    const std::size_t k = u.rows();
    const std::size_t m = u.cols();
    res.grad = Tensor::zeros({k, m});
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        const double raw = y(0, j);
        const auto label = static_cast<std::ptrdiff_t>(raw);
        if (raw != static_cast<double>(label) || label < 0 ||
            label >= static_cast<std::ptrdiff_t>(k)) {
            throw InputError("loss_and_grad: class label " + std::to_string(raw) +
                             " invalid for " + std::to_string(k) + " classes (sample " +
                             std::to_string(j) + ")");
        }
        double mx = u(0, j);
        for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, u(i, j));
        double z = 0.0;
        for (std::size_t i = 0; i < k; ++i) z += std::exp(u(i, j) - mx);
        total += std::log(z) - (u(static_cast<std::size_t>(label), j) - mx);
        for (std::size_t i = 0; i < k; ++i) {
            res.grad(i, j) = std::exp(u(i, j) - mx) / z -
                             (i == static_cast<std::size_t>(label) ? 1.0 : 0.0);
        }
    }
    flops::add(u.size());
    res.loss = total;
    return res;
}

double accuracy(const Tensor& u, const Tensor& labels) {
    if (labels.ndim() != 2 || labels.rows() != 1 || labels.cols() != u.cols()) {
        throw ShapeError("accuracy: labels must be 1 x m");
    }
    std::size_t hits = 0;
    for (std::size_t j = 0; j < u.cols(); ++j) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < u.rows(); ++i) {
            if (u(i, j) > u(best, j)) best = i;
        }
        if (static_cast<double>(best) == labels(0, j)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(u.cols());
}

// --- jacobian oracle -------------------------------------------------------------

Tensor per_sample_jacobian_oracle(const Network& net, const BatchCache& cache, std::size_t pl) {
    net.check_cache(cache);
    if (pl >= net.num_param_layers()) {
        throw ContractError("per_sample_jacobian_oracle: layer index " + std::to_string(pl) +
                            " out of range");
    }
    if (!cache.has_derivatives) {
        throw ContractError("per_sample_jacobian_oracle: cache has no derivatives; run backward");
    }
    const LayerCache& lc = cache.layers[pl];
    if (!lc.is_conv) {
        // Row i is vec(I_:i G_:i^T), column-major over the (d_in x d_out)
        // gradient matrix: exactly the columns of the Khatri-Rao product.
        return transpose(khatri_rao_cols(lc.i_mat, lc.g_mat));
    }
    const std::size_t p_count = lc.f_eff * lc.c_out;
    Tensor j = Tensor::zeros({cache.m, p_count});
    for (std::size_t i = 0; i < cache.m; ++i) {
        Tensor a = matmul(transpose(lc.i_samples[i]), lc.g_samples[i]);  // f_eff x c_out
        for (std::size_t col = 0; col < lc.c_out; ++col) {
            for (std::size_t row = 0; row < lc.f_eff; ++row) {
                j(i, col * lc.f_eff + row) = a(row, col);
            }
        }
    }
    return j;
}

// --- finite differences -----------------------------------------------------------

std::vector<Tensor> finite_diff_gradient(const Network& net, const Tensor& x, const Tensor& y,
                                         double h) {
    if (h <= 0.0) throw ContractError("finite_diff_gradient: step must be positive");
    Network probe = net;
    const double inv_m = 1.0 / static_cast<double>(x.cols());
    const LossKind kind = net.spec().loss;

    auto mean_loss = [&]() {
        BatchCache c = probe.forward(x);
        return loss_and_grad(kind, c.output, y).loss * inv_m;
    };

    std::vector<Tensor> grads;
    for (std::size_t pl = 0; pl < net.num_param_layers(); ++pl) {
        Tensor g = Tensor::zeros(net.params(pl).shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
            Tensor w = net.params(pl);
            const double w0 = w.data()[i];
            w.data()[i] = w0 + h;
            probe.set_params(pl, w);
            const double up = mean_loss();
            w = net.params(pl);
            w.data()[i] = w0 - h;
            probe.set_params(pl, w);
            const double down = mean_loss();
            g.data()[i] = (up - down) / (2.0 * h);
        }
        probe.set_params(pl, net.params(pl));
        grads.push_back(std::move(g));
    }
    return grads;
}

// --- checkpoints -------------------------------------------------------------------

namespace {

void write_u32(std::ofstream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::ifstream& is, const std::string& path, std::size_t& offset) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) {
        throw FormatError(path + ": truncated checkpoint at byte offset " + std::to_string(offset));
    }
    offset += sizeof(v);
    return v;
}

constexpr char kMagic[4] = {'T', 'G', 'R', 'D'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const Network& net, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError(path + ": cannot open for writing");
    os.write(kMagic, 4);
    write_u32(os, kVersion);
    write_u32(os, static_cast<std::uint32_t>(net.num_param_layers()));
    for (std::size_t pl = 0; pl < net.num_param_layers(); ++pl) {
        const Tensor& w = net.params(pl);
        write_u32(os, static_cast<std::uint32_t>(w.ndim()));
        for (std::size_t d : w.shape()) write_u32(os, static_cast<std::uint32_t>(d));
        os.write(reinterpret_cast<const char*>(w.data()),
                 static_cast<std::streamsize>(w.size() * sizeof(double)));
    }
    if (!os) throw FormatError(path + ": short write while saving checkpoint");
}

void load_checkpoint(Network& net, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(path + ": cannot open for reading");
    std::size_t offset = 0;

    char magic[4] = {0, 0, 0, 0};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(path + ": bad magic at byte offset 0, expected \"TGRD\"");
    }
    offset = 4;

    const std::uint32_t version = read_u32(is, path, offset);
    if (version != kVersion) {
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version) +
                          " at byte offset 4");
    }
    const std::uint32_t count = read_u32(is, path, offset);
    if (count != net.num_param_layers()) {
        throw ContractError(path + ": checkpoint has " + std::to_string(count) +
                            " parameter layers, network has " +
                            std::to_string(net.num_param_layers()));
    }
    for (std::size_t pl = 0; pl < count; ++pl) {
        const std::uint32_t rank = read_u32(is, path, offset);
        std::vector<std::size_t> dims;
        for (std::uint32_t i = 0; i < rank; ++i) dims.push_back(read_u32(is, path, offset));
        if (dims != net.params(pl).shape()) {
            throw ContractError(path + ": parameter layer " + std::to_string(pl) +
                                " shape mismatch");
        }
        Tensor w = Tensor::zeros(dims);
        is.read(reinterpret_cast<char*>(w.data()),
                static_cast<std::streamsize>(w.size() * sizeof(double)));
        if (!is) {
            throw FormatError(path + ": truncated payload at byte offset " +
                              std::to_string(offset));
        }
        offset += w.size() * sizeof(double);
        net.set_params(pl, std::move(w));
    }
}

}  // namespace tengrad
