// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tengrad/config.hpp"
#include "tengrad/convlab.hpp"

// ---------------------------------------------------------------------------
// Experiment orchestration and trace emission.
//
// A training run writes one CSV with the fixed header
//
//   epoch,iter,wall_ms,flops,train_loss,train_acc,test_loss,test_acc
//
// One initial evaluation row (epoch 0, iter 0) is followed by one row per
// iteration carrying the minibatch loss/accuracy at the pre-step parameters
// and the most recent test metrics, then one evaluation row per epoch with
// full train and test metrics. wall_ms and flops are cumulative, so both
// columns are monotone; identical config and seed reproduce every column
// except wall_ms bit for bit. Losses are per-sample means; accuracy is 0 for
// regression targets.
// ---------------------------------------------------------------------------

namespace tengrad {

struct RunTraceRow {
    std::size_t epoch = 0;
    std::size_t iter = 0;
    double wall_ms = 0.0;
    std::uint64_t flops = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_loss = 0.0;
    double test_acc = 0.0;
};

struct RunTrace {
    std::vector<RunTraceRow> rows;
    double final_test_acc = 0.0;
    double best_test_acc = 0.0;
};

// Trains per the config, writes the trace CSV to cfg.output (parent
// directories are created), and returns the trace. Errors from any stage
// propagate with the config's output path prefixed for context.
RunTrace run_experiment(const ExperimentConfig& cfg);

void write_run_trace(std::ostream& os, const RunTrace& trace);

// Strict inverse of write_run_trace: rejects unknown headers, recomputes the
// summary accuracies. FormatError cites the line number.
RunTrace read_run_trace(std::istream& is);

// Strict reader for the convergence-lab CSV (any layer count).
ConvergenceTrace read_convergence_trace(std::istream& is);

// Outcome of a `rates` run: the measured bounds, the trace (empty when the
// bounds are infeasible and eta was auto), and the derived verdicts.
struct RatesOutcome {
    double lambda0 = 0.0;
    TheoremBounds bounds;
    double eta_used = 0.0;
    double alpha_used = 0.0;
    bool ran = false;
    ConvergenceTrace trace;
    MonitorReport monitor;
    RateCheck rate;
};

// Builds the dataset and network from the lab config, measures lambda0 at
// initialization, resolves auto eta/alpha against the measured bounds, runs
// the full-batch lab, and writes its CSV to cfg.output.
RatesOutcome rates_experiment(const LabConfig& cfg);

// Builds the experiment's network, runs forward/backward on the first
// config.batch samples in stored order, refreshes parameter layer `pl` with
// the optimizer's damping, and writes gram, c1, c2 to `path` in the
// checkpoint container layout (magic "TGRD", version, tensor count, then per
// tensor a rank + dims header and the row-major float64 payload). Dense
// blocks carry all three tensors; conv blocks factored in blocked mode carry
// an m x m gram and two rank-0 placeholders.
void dump_fisher_block(const ExperimentConfig& cfg, std::size_t pl, const std::string& path);

}  // namespace tengrad
