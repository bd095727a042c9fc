// SPDX-License-Identifier: Apache-2.0
#include "tengrad/convlab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>

#include "tengrad/errors.hpp"
#include "tengrad/fisher.hpp"

namespace tengrad {

namespace {

// ||d||_2 via the smaller Gram side; exact to eigensolver accuracy.
double spectral_norm(const Tensor& d) {
    const Tensor g =
        d.rows() <= d.cols() ? matmul(d, transpose(d)) : matmul(transpose(d), d);
    const Tensor sym = scale(add(g, transpose(g)), 0.5);
    return std::sqrt(std::max(0.0, sym_eig_max(sym)));
}

Tensor gram_of(const LayerCache& lc) {
    return lc.is_conv ? covfactor_conv(lc.i_samples, lc.g_samples).gram
                      : covfactor_dense(lc.i_mat, lc.g_mat).gram;
}

void put_g17(std::ostream& os, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf;
}

}  // namespace

TheoremBounds theorem_bounds(double lambda0, std::size_t n, double lip_l, double alpha,
                             double assumed_c) {
    if (!(assumed_c > 0.0) || assumed_c > 0.5) {
        throw ContractError("theorem_bounds: assumed_c must lie in (0, 1/2]");
    }
    if (n == 0) throw ContractError("theorem_bounds: n must be positive");
    if (!(lip_l > 0.0)) throw ContractError("theorem_bounds: lip_l must be positive");
    if (alpha < 0.0) throw ContractError("theorem_bounds: alpha must be nonnegative");

    TheoremBounds b;
    b.lambda0 = lambda0;
    b.assumed_c = assumed_c;
    if (!(lambda0 > 0.0)) {
        return b;  // infeasible report, never an exception
    }
    b.alpha_max = 4.0 * lambda0 / (9.0 * static_cast<double>(n));
    b.gamma = lambda0 / (lambda0 + 2.25 * static_cast<double>(n) * alpha);
    const double root_l = std::sqrt(lip_l);
    const double num = 2.0 * lip_l * b.gamma - 1.0 - 2.0 * assumed_c * root_l * b.gamma;
    const double den = lip_l + assumed_c * root_l * b.gamma;
    b.eta_max = num / (den * den);
    b.feasible = alpha <= b.alpha_max && b.eta_max > 0.0;
    return b;
}

ConvergenceTrace full_batch_ngd_run(Network& net, const Tensor& x, const Tensor& y,
                                    const ConvlabRunConfig& cfg) {
    if (net.spec().loss != LossKind::SquaredError) {
        throw ContractError("full_batch_ngd_run: the lab objective is squared error");
    }
    if (net.spec().output_dim() != 1) {
        throw ContractError("full_batch_ngd_run: single-output networks only");
    }
    if (y.rows() != 1 || y.cols() != x.cols()) {
        throw ShapeError("full_batch_ngd_run: y must be 1 x n matching the batch");
    }
    if (cfg.eta < 0.0 || cfg.eta > 1.0) {
        throw ContractError("full_batch_ngd_run: eta must lie in [0, 1]");
    }
    if (!(cfg.alpha > 0.0)) {
        throw ContractError("full_batch_ngd_run: alpha must be positive");
    }

    const std::size_t layers = net.num_param_layers();
    const std::size_t m = x.cols();

    ConvergenceTrace trace;
    trace.layers = layers;
    trace.eta = cfg.eta;
    trace.alpha = cfg.alpha;
    trace.assumed_c = cfg.assumed_c;
    trace.rows.reserve(cfg.k_max + 1);

    std::vector<Tensor> theta0;
    std::vector<Tensor> j0;
    theta0.reserve(layers);
    j0.reserve(layers);
    for (std::size_t pl = 0; pl < layers; ++pl) theta0.push_back(net.params(pl));

    double bound = 0.0;
    const Tensor ones_seed = Tensor::ones({1, m});

    for (std::size_t k = 0; k <= cfg.k_max; ++k) {
        BatchCache cache = net.forward(x);
        const Tensor r = sub(cache.output, y);  // 1 x n
        const double residual_sq = hadamard_reduce(r, r);
        net.backward(cache, ones_seed);  // output-Jacobian caches

        TraceRow row;
        row.k = k;
        row.residual_sq = residual_sq;
        row.loss = 0.5 * residual_sq;
        row.lambda_min.reserve(layers);

        std::vector<Tensor> grams;
        grams.reserve(layers);
        double jac_drift = 0.0;
        double param_drift_sq = 0.0;
        for (std::size_t pl = 0; pl < layers; ++pl) {
            grams.push_back(gram_of(cache.layers[pl]));
            row.lambda_min.push_back(sym_eig_min(grams[pl]));
            const Tensor j = per_sample_jacobian_oracle(net, cache, pl);
            if (k == 0) j0.push_back(j);
            jac_drift = std::max(jac_drift, spectral_norm(sub(j, j0[pl])));
            const double fn = frobenius_norm(sub(net.params(pl), theta0[pl]));
            param_drift_sq += fn * fn;
        }
        row.jac_drift = jac_drift;
        row.param_drift = std::sqrt(param_drift_sq);

        if (k == 0) {
            bound = residual_sq;
            trace.lambda0 = *std::min_element(row.lambda_min.begin(), row.lambda_min.end());
        }
        row.rate_bound = bound;
        bound *= 1.0 - cfg.eta;
        trace.rows.push_back(std::move(row));

        if (k == cfg.k_max) break;

        // Directions for every layer before any write; updates invalidate
        // the cache the Jacobian products read from.
        const Tensor r_col = transpose(r);
        std::vector<Tensor> dirs;
        dirs.reserve(layers);
        for (std::size_t pl = 0; pl < layers; ++pl) {
            const SpdFactor factor = spd_factor(add_scaled_identity(grams[pl], cfg.alpha));
            dirs.push_back(vjp(cache, pl, factor.solve(r_col)));
        }
        for (std::size_t pl = 0; pl < layers; ++pl) {
            net.set_params(pl, sub(net.params(pl), scale(dirs[pl], cfg.eta)));
        }
    }

    assumption_monitor(trace);
    return trace;
}

MonitorReport assumption_monitor(ConvergenceTrace& trace) {
    if (trace.rows.empty()) {
        throw ContractError("assumption_monitor: trace has no rows");
    }
    MonitorReport rep;
    const double lambda0 = trace.lambda0;

    if (!(lambda0 > 0.0)) {
        // Ill-posed conditions: everything is flagged from the start.
        for (TraceRow& row : trace.rows) {
            row.a1 = row.a2 = row.lemma2 = false;
        }
        rep.first_a1 = rep.first_a2 = rep.first_lemma2 = 0;
        rep.smallest_c = std::numeric_limits<double>::infinity();
        return rep;
    }

    const double r0 = std::sqrt(trace.rows[0].residual_sq);
    const double a1_bound = 3.0 / std::sqrt(lambda0) * r0;
    const double a2_bound = trace.assumed_c / 3.0 * std::sqrt(lambda0);
    const double lemma2_bound = 4.0 / 9.0 * lambda0;

    double worst_drift = 0.0;
    for (TraceRow& row : trace.rows) {
        row.a1 = row.param_drift <= a1_bound;
        row.a2 = row.jac_drift <= a2_bound;
        const double lmin = *std::min_element(row.lambda_min.begin(), row.lambda_min.end());
        row.lemma2 = !row.a1 || lmin >= lemma2_bound;
        if (!row.a1 && rep.first_a1 == MonitorReport::npos) rep.first_a1 = row.k;
        if (!row.a2 && rep.first_a2 == MonitorReport::npos) rep.first_a2 = row.k;
        if (!row.lemma2 && rep.first_lemma2 == MonitorReport::npos) rep.first_lemma2 = row.k;
        worst_drift = std::max(worst_drift, row.jac_drift);
    }
    rep.smallest_c = 3.0 * worst_drift / std::sqrt(lambda0);
    return rep;
}

RateCheck rate_check(const ConvergenceTrace& trace) {
    if (trace.rows.empty()) {
        throw ContractError("rate_check: trace has no rows");
    }
    RateCheck rc;
    rc.margin.reserve(trace.rows.size());
    bool violated = false;
    for (const TraceRow& row : trace.rows) {
        double margin;
        if (row.residual_sq == 0.0) {
            margin = row.rate_bound == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
        } else {
            margin = row.rate_bound / row.residual_sq;
        }
        rc.margin.push_back(margin);
        if (row.residual_sq > row.rate_bound) {
            violated = true;
        }
        if (!violated) rc.holds_through = row.k;
    }
    rc.holds_all = !violated;
    return rc;
}

void write_trace_csv(std::ostream& os, const ConvergenceTrace& trace) {
    os << "k,residual_sq,loss,rate_bound";
    for (std::size_t l = 1; l <= trace.layers; ++l) {
        os << ",lambda_min_l" << l;
    }
    os << ",param_drift,jac_drift,a1_flag,a2_flag,lemma2_flag\n";
    for (const TraceRow& row : trace.rows) {
        os << row.k << ',';
        put_g17(os, row.residual_sq);
        os << ',';
        put_g17(os, row.loss);
        os << ',';
        put_g17(os, row.rate_bound);
        for (const double lm : row.lambda_min) {
            os << ',';
            put_g17(os, lm);
        }
        os << ',';
        put_g17(os, row.param_drift);
        os << ',';
        put_g17(os, row.jac_drift);
        os << ',' << (row.a1 ? 1 : 0) << ',' << (row.a2 ? 1 : 0) << ',' << (row.lemma2 ? 1 : 0)
           << '\n';
    }
}

}  // namespace tengrad
