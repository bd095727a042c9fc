// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <vector>

#include "tengrad/net.hpp"
#include "tengrad/tensor.hpp"

// ---------------------------------------------------------------------------
// Convergence lab: full-batch damped natural gradient on a squared-error
// objective with a single network output, instrumented to check the linear
// rate ||u(k) - y||^2 <= (1 - eta)^k ||u(0) - y||^2 and its side conditions.
//
// The update preconditions with the unnormalized per-layer output Gram
// G_l = J_l J_l^T, where J_l holds one row per sample: the derivative of that
// sample's output with respect to the layer's parameters. By the push-through
// identity, (J^T J + alpha I)^{-1} J^T r = J^T (G + alpha I)^{-1} r, so each
// layer takes
//
//   W <- W - eta J_l^T (G_l + alpha I)^{-1} (u - y)
//
// The lab measures lambda0 = min_l lambda_min(G_l(0)) at initialization and
// derives the admissible damping and step size from it:
//
//   alpha_max = 4 lambda0 / (9 n)
//   gamma     = lambda0 / (lambda0 + (9/4) n alpha)
//   eta_max   = (2 L gamma - 1 - 2 C sqrt(L) gamma) / (L + C sqrt(L) gamma)^2
//
// with L a bound on ||J_l||^2 and C in (0, 1/2] the assumed Jacobian
// perturbation constant. Each iteration also records the drift monitors:
//
//   a1:     ||theta(k) - theta(0)||_2 <= 3 lambda0^{-1/2} ||y - u(0)||_2
//   a2:     max_l ||J_l(k) - J_l(0)||_2 <= (C/3) lambda0^{1/2}
//   lemma2: lambda_min(G_l(k)) >= (4/9) lambda0 whenever a1 held
//
// Flags store 1 while the condition holds. The run is a measurement
// instrument: it never asserts, it records.
// ---------------------------------------------------------------------------

namespace tengrad {

struct TheoremBounds {
    double lambda0 = 0.0;
    double alpha_max = 0.0;
    double gamma = 0.0;
    double eta_max = 0.0;
    double assumed_c = 0.5;
    // lambda0 > 0, alpha within (0, alpha_max], eta_max > 0.
    bool feasible = false;
};

// Derives the admissible region from a measured lambda0. n is the full-batch
// sample count, lip_l the assumed squared Jacobian norm bound L. A
// nonpositive lambda0 yields an infeasible report, not an exception;
// assumed_c outside (0, 1/2] is a contract violation.
TheoremBounds theorem_bounds(double lambda0, std::size_t n, double lip_l, double alpha,
                             double assumed_c);

struct TraceRow {
    std::size_t k = 0;
    double residual_sq = 0.0;  // ||u(k) - y||^2
    double loss = 0.0;         // 0.5 residual_sq
    double rate_bound = 0.0;   // (1 - eta)^k residual_sq(0)
    std::vector<double> lambda_min;  // per layer, of the unnormalized Gram
    double param_drift = 0.0;  // ||theta(k) - theta(0)||_2, all layers stacked
    double jac_drift = 0.0;    // max_l ||J_l(k) - J_l(0)||_2
    bool a1 = true;
    bool a2 = true;
    bool lemma2 = true;
};

struct ConvergenceTrace {
    std::size_t layers = 0;
    double lambda0 = 0.0;
    double eta = 0.0;
    double alpha = 0.0;
    double assumed_c = 0.5;
    std::vector<TraceRow> rows;  // k = 0 .. k_max, contiguous
};

struct ConvlabRunConfig {
    double eta = 0.0;    // [0, 1); 0 freezes the parameters
    double alpha = 0.0;  // > 0
    std::size_t k_max = 0;
    double assumed_c = 0.5;
};

// Runs the full-batch loop on x (features x n), y (1 x n). The network must
// have a single output and squared-error loss. Records k_max + 1 rows; the
// row at k_max sees no further update. DampingError if a damped Gram loses
// positive definiteness.
ConvergenceTrace full_batch_ngd_run(Network& net, const Tensor& x, const Tensor& y,
                                    const ConvlabRunConfig& cfg);

struct MonitorReport {
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::size_t first_a1 = npos;
    std::size_t first_a2 = npos;
    std::size_t first_lemma2 = npos;
    // Smallest C whose drift condition the observed trace satisfies at every
    // k: max_k 3 ||J(k) - J(0)||_2 / sqrt(lambda0).
    double smallest_c = 0.0;

    bool clean() const { return first_a1 == npos && first_a2 == npos && first_lemma2 == npos; }
};

// Recomputes the three flags of every row from the drift columns and the
// trace's lambda0 / assumed_c, and reports the first violation of each.
MonitorReport assumption_monitor(ConvergenceTrace& trace);

struct RateCheck {
    bool holds_all = false;
    std::size_t holds_through = 0;      // largest k with no violation at or before it
    std::vector<double> margin;         // rate_bound / residual_sq per row
};

// Checks the linear-rate inequality row by row against the recorded bound.
RateCheck rate_check(const ConvergenceTrace& trace);

// Fixed-header trace CSV:
// k,residual_sq,loss,rate_bound,lambda_min_l1..lL,param_drift,jac_drift,
// a1_flag,a2_flag,lemma2_flag. Deterministic byte-for-byte.
void write_trace_csv(std::ostream& os, const ConvergenceTrace& trace);

}  // namespace tengrad
