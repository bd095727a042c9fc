// SPDX-License-Identifier: Apache-2.0
#include "tengrad/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "tengrad/convlab.hpp"
#include "tengrad/errors.hpp"
#include "tengrad/fisher.hpp"
#include "tengrad/flops.hpp"
#include "tengrad/net.hpp"
#include "tengrad/rng.hpp"
#include "tengrad/tensor.hpp"

namespace tengrad {

namespace {

VerifyCheck make_check(std::string name, double measured, double bound,
                       CheckKind kind = CheckKind::AtMost) {
    VerifyCheck c;
    c.name = std::move(name);
    c.measured = measured;
    c.bound = bound;
    c.kind = kind;
    c.pass = kind == CheckKind::AtMost ? measured <= bound : measured >= bound;
    return c;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal();
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    return max_abs(sub(a, b));
}

// Column-major vec of a matrix, as a p x 1 column. Matches the row layout of
// the explicit per-sample Jacobian.
Tensor vec_cm(const Tensor& t) {
    const std::size_t r = t.rows();
    const std::size_t c = t.cols();
    Tensor v = Tensor::zeros({r * c, 1});
    for (std::size_t j = 0; j < c; ++j) {
        for (std::size_t i = 0; i < r; ++i) v(j * r + i, 0) = t(i, j);
    }
    return v;
}

// Plain Gaussian elimination with partial pivoting; the primal reference
// deliberately shares nothing with the SPD factorization it checks.
Tensor gauss_solve(Tensor a, Tensor b) {
    const std::size_t n = a.rows();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
        }
        if (piv != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(a(col, c), a(piv, c));
            std::swap(b(col, 0), b(piv, 0));
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a(r, col) / a(col, col);
            for (std::size_t c = col; c < n; ++c) a(r, c) -= f * a(col, c);
            b(r, 0) -= f * b(col, 0);
        }
    }
    Tensor x = Tensor::zeros({n, 1});
    for (std::size_t ri = n; ri-- > 0;) {
        double s = b(ri, 0);
        for (std::size_t c = ri + 1; c < n; ++c) s -= a(ri, c) * x(c, 0);
        x(ri, 0) = s / a(ri, ri);
    }
    return x;
}

// Explicit m x m Gram of a dense layer: entry (i, j) is the inner product of
// the vectorized per-sample gradients I_:i G_:i^T and I_:j G_:j^T.
Tensor explicit_dense_gram(const Tensor& i_mat, const Tensor& g_mat) {
    const std::size_t m = i_mat.cols();
    const std::size_t d_i = i_mat.rows();
    const std::size_t d_o = g_mat.rows();
    Tensor gram = Tensor::zeros({m, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t a = 0; a < d_i; ++a) {
                for (std::size_t b = 0; b < d_o; ++b) {
                    s += i_mat(a, i) * g_mat(b, i) * i_mat(a, j) * g_mat(b, j);
                }
            }
            gram(i, j) = s;
        }
    }
    return gram;
}

// Explicit conv Gram: per-sample gradient matrices I_i^T G_i compared by
// Frobenius inner product.
Tensor explicit_conv_gram(const std::vector<Tensor>& i_samples,
                          const std::vector<Tensor>& g_samples) {
    const std::size_t m = i_samples.size();
    std::vector<Tensor> grads;
    grads.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
        grads.push_back(matmul(transpose(i_samples[i]), g_samples[i]));
    }
    Tensor gram = Tensor::zeros({m, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) gram(i, j) = dot(grads[i], grads[j]);
    }
    return gram;
}

struct DenseInstance {
    Tensor i_mat;
    Tensor g_mat;
};

DenseInstance dense_instance(Rng& rng) {
    const std::size_t d_i = 1 + rng.below(32);
    const std::size_t d_o = 1 + rng.below(16);
    const std::size_t m = 1 + rng.below(16);
    return {random_tensor({d_i, m}, rng), random_tensor({d_o, m}, rng)};
}

struct ConvInstance {
    std::vector<Tensor> i_samples;
    std::vector<Tensor> g_samples;
};

ConvInstance conv_instance(Rng& rng) {
    const std::size_t s = 1 + rng.below(9);
    const std::size_t f = 1 + rng.below(12);
    const std::size_t c_out = 1 + rng.below(4);
    const std::size_t m = 1 + rng.below(6);
    ConvInstance inst;
    for (std::size_t i = 0; i < m; ++i) {
        inst.i_samples.push_back(random_tensor({s, f}, rng));
        inst.g_samples.push_back(random_tensor({s, c_out}, rng));
    }
    return inst;
}

// The three fixture networks the cache-level suites share: a biased dense
// stack, a plain dense map, and a conv head over a small image.
std::vector<NetworkSpec> fixture_specs() {
    NetworkSpec a;
    a.input = InputShape::vector(6);
    a.layers = {LayerSpec::dense(6, 4, true), LayerSpec::relu(), LayerSpec::dense(4, 3)};

    NetworkSpec b;
    b.input = InputShape::vector(5);
    b.layers = {LayerSpec::dense(5, 8)};

    NetworkSpec c;
    c.input = InputShape::image(1, 5, 5);
    c.layers = {LayerSpec::conv2d(1, 2, 3, 1, 0, true), LayerSpec::relu(),
                LayerSpec::dense(18, 2)};
    return {a, b, c};
}

struct Fixture {
    Network net;
    BatchCache cache;
};

Fixture make_fixture(const NetworkSpec& spec, std::uint64_t seed, std::size_t m, Rng& rng) {
    Fixture fx{Network::init(spec, seed), {}};
    const Tensor x = random_tensor({spec.input.features(), m}, rng);
    fx.cache = fx.net.forward(x);
    const Tensor upstream = random_tensor({spec.output_dim(), m}, rng);
    fx.net.backward(fx.cache, upstream);
    return fx;
}

VerifyReport suite_factorization() {
    VerifyReport report;
    report.suite = "factorization";
    Rng rng(4001);

    double worst_dense = 0.0;
    for (int i = 0; i < 20; ++i) {
        const DenseInstance inst = dense_instance(rng);
        const DenseFactorization f = covfactor_dense(inst.i_mat, inst.g_mat);
        worst_dense = std::max(worst_dense,
                               max_abs_diff(f.gram, explicit_dense_gram(inst.i_mat, inst.g_mat)));
    }
    report.checks.push_back(make_check("dense-gram-vs-explicit", worst_dense, 1e-10));

    double worst_conv = 0.0;
    double worst_modes = 0.0;
    for (int i = 0; i < 8; ++i) {
        const ConvInstance inst = conv_instance(rng);
        const ConvFactorization blocked =
            covfactor_conv(inst.i_samples, inst.g_samples, ConvGramMode::Blocked);
        const ConvFactorization mat =
            covfactor_conv(inst.i_samples, inst.g_samples, ConvGramMode::Materialized);
        worst_conv = std::max(
            worst_conv, max_abs_diff(blocked.gram, explicit_conv_gram(inst.i_samples,
                                                                      inst.g_samples)));
        worst_modes = std::max(worst_modes, max_abs_diff(blocked.gram, mat.gram));
    }
    report.checks.push_back(make_check("conv-gram-vs-explicit", worst_conv, 1e-9));
    report.checks.push_back(make_check("materialized-matches-blocked", worst_modes, 1e-12));
    return report;
}

VerifyReport suite_woodbury() {
    VerifyReport report;
    report.suite = "woodbury";
    Rng rng(4007);

    double worst = 0.0;
    const double alphas[3] = {1e-3, 1e-1, 1.0};
    std::uint64_t seed = 300;
    for (const NetworkSpec& spec : fixture_specs()) {
        Fixture fx = make_fixture(spec, seed++, 7, rng);
        for (const double alpha : alphas) {
            for (std::size_t pl = 0; pl < fx.net.num_param_layers(); ++pl) {
                FisherBlock block;
                refresh_block(block, fx.net, fx.cache, pl, alpha);
                const Tensor g = random_tensor(fx.net.params(pl).shape(), rng);
                const Tensor dir = woodbury_direction(block, g);

                const Tensor jac = per_sample_jacobian_oracle(fx.net, fx.cache, pl);
                Tensor a = scale(matmul(transpose(jac), jac), 1.0 / double(fx.cache.m));
                a = add_scaled_identity(a, alpha);
                const Tensor ref = gauss_solve(a, vec_cm(g));
                const double err = frobenius_norm(sub(vec_cm(dir), ref));
                worst = std::max(worst, err / frobenius_norm(ref));
            }
        }
    }
    report.checks.push_back(make_check("woodbury-vs-primal", worst, 1e-8));
    return report;
}

VerifyReport suite_jvpvjp() {
    VerifyReport report;
    report.suite = "jvpvjp";
    Rng rng(4013);

    double worst_jvp = 0.0;
    double worst_vjp = 0.0;
    double worst_adj = 0.0;
    std::uint64_t seed = 400;
    for (const NetworkSpec& spec : fixture_specs()) {
        Fixture fx = make_fixture(spec, seed++, 6, rng);
        for (std::size_t pl = 0; pl < fx.net.num_param_layers(); ++pl) {
            const Tensor jac = per_sample_jacobian_oracle(fx.net, fx.cache, pl);
            const Tensor v = random_tensor(fx.net.params(pl).shape(), rng);
            const Tensor w = random_tensor({fx.cache.m, 1}, rng);

            const Tensor jv = jvp(fx.cache, pl, v);
            worst_jvp = std::max(worst_jvp, max_abs_diff(jv, matmul(jac, vec_cm(v))));

            const Tensor jtw = vjp(fx.cache, pl, w);
            worst_vjp =
                std::max(worst_vjp, max_abs_diff(vec_cm(jtw), matmul(transpose(jac), w)));

            const double lhs = dot(jv, w);
            const double rhs = dot(vec_cm(v), vec_cm(jtw));
            worst_adj = std::max(worst_adj, std::abs(lhs - rhs) / (std::abs(lhs) + 1.0));
        }
    }
    report.checks.push_back(make_check("jvp-vs-explicit", worst_jvp, 1e-10));
    report.checks.push_back(make_check("vjp-vs-explicit", worst_vjp, 1e-10));
    report.checks.push_back(make_check("jvp-vjp-adjoint", worst_adj, 1e-12));
    return report;
}

VerifyReport suite_general() {
    VerifyReport report;
    report.suite = "general";
    Rng rng(4019);

    double worst_dense = 0.0;
    for (int i = 0; i < 10; ++i) {
        const DenseInstance inst = dense_instance(rng);
        const GeneralOperands ops = general_from_dense(inst.i_mat, inst.g_mat);
        const Tensor gram = covfactor_general(ops.schema, ops.ihat, ops.g);
        worst_dense =
            std::max(worst_dense, max_abs_diff(gram, covfactor_dense(inst.i_mat, inst.g_mat).gram));
    }
    report.checks.push_back(make_check("general-matches-dense", worst_dense, 1e-12));

    double worst_conv = 0.0;
    for (int i = 0; i < 6; ++i) {
        const ConvInstance inst = conv_instance(rng);
        const GeneralOperands ops = general_from_conv(inst.i_samples, inst.g_samples);
        const Tensor gram = covfactor_general(ops.schema, ops.ihat, ops.g);
        worst_conv = std::max(
            worst_conv, max_abs_diff(gram, covfactor_conv(inst.i_samples, inst.g_samples).gram));
    }
    report.checks.push_back(make_check("general-matches-conv", worst_conv, 1e-12));
    return report;
}

VerifyReport suite_gradients() {
    VerifyReport report;
    report.suite = "gradients";
    Rng rng(4021);

    std::vector<NetworkSpec> specs = fixture_specs();
    specs[0].loss = LossKind::SquaredError;
    specs[1].loss = LossKind::SquaredError;
    specs[2].loss = LossKind::CrossEntropy;

    double worst = 0.0;
    std::uint64_t seed = 500;
    for (const NetworkSpec& spec : specs) {
        const std::size_t m = 5;
        Network net = Network::init(spec, seed++);
        const Tensor x = random_tensor({spec.input.features(), m}, rng);
        Tensor y;
        if (spec.loss == LossKind::CrossEntropy) {
            y = Tensor::zeros({1, m});
            for (std::size_t j = 0; j < m; ++j) y(0, j) = double(rng.below(spec.output_dim()));
        } else {
            y = random_tensor({spec.output_dim(), m}, rng);
        }
        BatchCache cache = net.forward(x);
        const LossResult res = loss_and_grad(spec.loss, cache.output, y);
        const std::vector<Tensor> grads = net.backward(cache, res.grad);
        const std::vector<Tensor> fd = finite_diff_gradient(net, x, y, 1e-5);
        for (std::size_t pl = 0; pl < grads.size(); ++pl) {
            const double scale_ref = std::max(max_abs(fd[pl]), 1e-12);
            worst = std::max(worst, max_abs_diff(grads[pl], fd[pl]) / scale_ref);
        }
    }
    report.checks.push_back(make_check("backward-vs-finite-diff", worst, 1e-5));
    return report;
}

VerifyReport suite_flops() {
    VerifyReport report;
    report.suite = "flops";
    Rng rng(4027);

    double worst_dense = 0.0;
    for (int i = 0; i < 5; ++i) {
        const DenseInstance inst = dense_instance(rng);
        flops::reset();
        covfactor_dense(inst.i_mat, inst.g_mat);
        const std::uint64_t counted = flops::count();
        const std::uint64_t predicted =
            dense_gram_madds(inst.i_mat.rows(), inst.g_mat.rows(), inst.i_mat.cols());
        worst_dense = std::max(
            worst_dense, std::abs(double(counted) - double(predicted)));
    }
    report.checks.push_back(make_check("dense-gram-counter", worst_dense, 0.0));

    double worst_conv = 0.0;
    for (int i = 0; i < 3; ++i) {
        const ConvInstance inst = conv_instance(rng);
        flops::reset();
        covfactor_conv(inst.i_samples, inst.g_samples);
        const std::uint64_t counted = flops::count();
        const std::uint64_t predicted =
            conv_gram_madds(inst.i_samples[0].rows(), inst.i_samples[0].cols(),
                            inst.g_samples[0].cols(), inst.i_samples.size());
        worst_conv = std::max(worst_conv, std::abs(double(counted) - double(predicted)));
    }
    report.checks.push_back(make_check("conv-gram-counter", worst_conv, 0.0));

    double worst_general = 0.0;
    for (int i = 0; i < 3; ++i) {
        const DenseInstance inst = dense_instance(rng);
        const GeneralOperands ops = general_from_dense(inst.i_mat, inst.g_mat);
        flops::reset();
        covfactor_general(ops.schema, ops.ihat, ops.g);
        const std::uint64_t counted = flops::count();
        const std::uint64_t predicted =
            general_gram_madds(ops.schema.n_common(), ops.schema.n_independent(),
                               ops.schema.free_dim, inst.i_mat.cols());
        worst_general = std::max(worst_general, std::abs(double(counted) - double(predicted)));
    }
    report.checks.push_back(make_check("general-gram-counter", worst_general, 0.0));
    flops::reset();

    const LayerFlopReport big = dense_flop_report(1024, 1024, 128);
    const double ratio = double(big.explicit_gram) / double(big.tengrad_curvature);
    report.checks.push_back(make_check("curvature-cost-ratio", ratio, 100.0, CheckKind::AtLeast));
    return report;
}

VerifyReport suite_convergence() {
    VerifyReport report;
    report.suite = "convergence";
    Rng rng(4049);

    // Smooth linear stack on exactly orthonormal inputs with targets near the
    // initial outputs: the regime where every side condition is measurable and
    // expected to hold.
    const std::size_t d_in = 6;
    const std::size_t n = 6;
    NetworkSpec spec;
    spec.input = InputShape::vector(d_in);
    spec.layers = {LayerSpec::dense(d_in, 32), LayerSpec::dense(32, 1)};

    Tensor x = random_tensor({d_in, n}, rng);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t prev = 0; prev < j; ++prev) {
            double proj = 0.0;
            for (std::size_t i = 0; i < d_in; ++i) proj += x(i, j) * x(i, prev);
            for (std::size_t i = 0; i < d_in; ++i) x(i, j) -= proj * x(i, prev);
        }
        double norm = 0.0;
        for (std::size_t i = 0; i < d_in; ++i) norm += x(i, j) * x(i, j);
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < d_in; ++i) x(i, j) /= norm;
    }

    const std::uint64_t seed = 7;
    Tensor y;
    double lambda0 = 0.0;
    {
        Network probe = Network::init(spec, seed);
        const Tensor u0 = probe.forward(x).output;
        y = Tensor::zeros({1, n});
        for (std::size_t j = 0; j < n; ++j) y(0, j) = u0(0, j) + 0.1 * rng.normal();
        ConvlabRunConfig peek;
        peek.eta = 0.0;
        peek.alpha = 1e-3;
        peek.k_max = 0;
        lambda0 = full_batch_ngd_run(probe, x, y, peek).lambda0;
    }

    const double alpha = std::min(0.1, 4.0 * lambda0 / (9.0 * double(n)));
    const TheoremBounds bounds = theorem_bounds(lambda0, n, 2.0, alpha, 0.5);
    report.checks.push_back(make_check("bounds-feasible", bounds.feasible ? 1.0 : 0.0, 1.0,
                                       CheckKind::AtLeast));
    if (!bounds.feasible) return report;

    Network net = Network::init(spec, seed);
    ConvlabRunConfig run;
    run.eta = std::min(bounds.eta_max, 0.99);
    run.alpha = alpha;
    run.k_max = 40;
    ConvergenceTrace trace = full_batch_ngd_run(net, x, y, run);
    const MonitorReport monitor = assumption_monitor(trace);
    const RateCheck rate = rate_check(trace);

    double worst_excess = 0.0;
    const double residual0 = trace.rows.front().residual_sq;
    for (const TraceRow& row : trace.rows) {
        worst_excess = std::max(worst_excess, (row.residual_sq - row.rate_bound) / residual0);
    }
    report.checks.push_back(make_check("rate-bound-holds", std::max(worst_excess, 0.0), 0.0));

    const double violations = double(monitor.first_a1 != MonitorReport::npos) +
                              double(monitor.first_a2 != MonitorReport::npos) +
                              double(monitor.first_lemma2 != MonitorReport::npos);
    report.checks.push_back(make_check("drift-monitors-clean", violations, 0.0));
    report.checks.push_back(make_check("drift-within-assumed-c", monitor.smallest_c,
                                       trace.assumed_c));
    report.checks.push_back(make_check("rate-holds-through",
                                       double(rate.holds_through), double(run.k_max),
                                       CheckKind::AtLeast));
    return report;
}

}  // namespace

bool VerifyReport::all_pass() const {
    return pass_count() == checks.size();
}

std::size_t VerifyReport::pass_count() const {
    std::size_t n = 0;
    for (const VerifyCheck& c : checks) n += c.pass ? 1 : 0;
    return n;
}

VerifyReport run_suite(const std::string& suite) {
    if (suite == "factorization") return suite_factorization();
    if (suite == "woodbury") return suite_woodbury();
    if (suite == "jvpvjp") return suite_jvpvjp();
    if (suite == "general") return suite_general();
    if (suite == "gradients") return suite_gradients();
    if (suite == "flops") return suite_flops();
    if (suite == "convergence") return suite_convergence();
    if (suite == "all") {
        VerifyReport all;
        all.suite = "all";
        for (const char* name : {"factorization", "woodbury", "jvpvjp", "general", "gradients",
                                 "flops", "convergence"}) {
            VerifyReport part = run_suite(name);
            all.checks.insert(all.checks.end(), part.checks.begin(), part.checks.end());
        }
        return all;
    }
    throw ConfigError("unknown verify suite '" + suite +
                      "' (want factorization, woodbury, jvpvjp, general, gradients, flops, "
                      "convergence, or all)");
}

void print_report(std::ostream& os, const VerifyReport& report) {
    os << "suite " << report.suite << "\n";
    for (const VerifyCheck& c : report.checks) {
        char line[160];
        std::snprintf(line, sizeof(line), "  %s  %-28s %12.6g %s %.6g\n",
                      c.pass ? "pass" : "FAIL", c.name.c_str(), c.measured,
                      c.kind == CheckKind::AtMost ? "<=" : ">=", c.bound);
        os << line;
    }
    os << "verify " << report.suite << ": " << (report.all_pass() ? "PASS" : "FAIL") << " ("
       << report.pass_count() << "/" << report.checks.size() << " checks)\n";
}

}  // namespace tengrad
