// SPDX-License-Identifier: Apache-2.0
#include "tengrad/experiment.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <utility>

#include "tengrad/errors.hpp"
#include "tengrad/fisher.hpp"
#include "tengrad/flops.hpp"
#include "tengrad/rng.hpp"

namespace tengrad {

namespace {

static_assert(std::endian::native == std::endian::little,
              "trace and block containers are little-endian on disk");

constexpr const char* kRunHeader =
    "epoch,iter,wall_ms,flops,train_loss,train_acc,test_loss,test_acc";

void put_g17(std::ostream& os, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf;
}

void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[rng.below(i)]);
    }
}

// Rows of `ds` named by idx[from .. from+m) as a (features x m) batch.
Tensor feature_batch(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t from,
                     std::size_t m) {
    const std::size_t d = ds.dim();
    Tensor x = Tensor::zeros({d, m});
    for (std::size_t j = 0; j < m; ++j) {
        const std::size_t row = idx[from + j];
        for (std::size_t i = 0; i < d; ++i) x(i, j) = ds.features(row, i);
    }
    return x;
}

// Loss targets for the same rows: a 1 x m label row for classification,
// a (k x m) target block for regression.
Tensor target_batch(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t from,
                    std::size_t m) {
    if (ds.classification()) {
        Tensor y = Tensor::zeros({1, m});
        for (std::size_t j = 0; j < m; ++j) y(0, j) = double(ds.labels[idx[from + j]]);
        return y;
    }
    const std::size_t k = ds.targets.shape()[1];
    Tensor y = Tensor::zeros({k, m});
    for (std::size_t j = 0; j < m; ++j) {
        const std::size_t row = idx[from + j];
        for (std::size_t i = 0; i < k; ++i) y(i, j) = ds.targets(row, i);
    }
    return y;
}

struct Metrics {
    double loss = 0.0;
    double acc = 0.0;
};

// Mean per-sample loss and accuracy over idx[from .. from+count), evaluated
// in bounded chunks.
Metrics evaluate(const Network& net, const Dataset& ds, const std::vector<std::size_t>& idx,
                 std::size_t from, std::size_t count, LossKind loss) {
    Metrics out;
    if (count == 0) return out;
    double loss_total = 0.0;
    double hits = 0.0;
    std::size_t done = 0;
    while (done < count) {
        const std::size_t m = std::min<std::size_t>(512, count - done);
        const Tensor x = feature_batch(ds, idx, from + done, m);
        const Tensor y = target_batch(ds, idx, from + done, m);
        const BatchCache cache = net.forward(x);
        loss_total += loss_and_grad(loss, cache.output, y).loss;
        if (ds.classification()) hits += accuracy(cache.output, y) * double(m);
        done += m;
    }
    out.loss = loss_total / double(count);
    out.acc = ds.classification() ? hits / double(count) : 0.0;
    return out;
}

void require_input_match(const NetworkSpec& net, const Dataset& ds) {
    if (net.input.features() != ds.dim()) {
        throw ConfigError("network.input: expects " + std::to_string(net.input.features()) +
                          " features but the dataset has " + std::to_string(ds.dim()));
    }
    if (net.loss == LossKind::CrossEntropy && !ds.classification()) {
        throw ConfigError("network.loss: cross_entropy needs a labeled dataset");
    }
    if (net.loss == LossKind::SquaredError && ds.classification()) {
        throw ConfigError("network.loss: squared_error needs regression targets");
    }
}

RunTrace run_inner(const ExperimentConfig& cfg) {
    const Dataset ds = cfg.dataset.load();
    require_input_match(cfg.network, ds);

    const std::size_t n = ds.size();
    if (cfg.batch > n) {
        throw ConfigError("run.batch: exceeds dataset size " + std::to_string(n));
    }
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    shuffle_indices(order, rng);
    const std::size_t test_n = std::size_t(cfg.eval_split * double(n));
    const std::size_t train_n = n - test_n;
    if (cfg.batch > train_n) {
        throw ConfigError("run.batch: exceeds training split size " + std::to_string(train_n));
    }

    Network net = Network::init(cfg.network, cfg.seed);
    OptimState state(net, cfg.optimizer);

    flops::reset();
    const auto t0 = std::chrono::steady_clock::now();
    const auto wall_ms = [&t0]() {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    };

    RunTrace trace;
    Metrics train_m = evaluate(net, ds, order, 0, train_n, cfg.network.loss);
    Metrics test_m = evaluate(net, ds, order, train_n, test_n, cfg.network.loss);
    trace.rows.push_back({0, 0, wall_ms(), flops::count(), train_m.loss, train_m.acc, test_m.loss,
                          test_m.acc});
    double last_test_loss = test_m.loss;
    double last_test_acc = test_m.acc;

    std::vector<std::size_t> train_idx(order.begin(), order.begin() + std::ptrdiff_t(train_n));
    std::size_t iter = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        state.config.lr = schedule_lr(cfg.schedule, cfg.optimizer.lr, epoch);
        shuffle_indices(train_idx, rng);
        const std::size_t batches = train_n / cfg.batch;
        for (std::size_t b = 0; b < batches; ++b) {
            const Tensor x = feature_batch(ds, train_idx, b * cfg.batch, cfg.batch);
            const Tensor y = target_batch(ds, train_idx, b * cfg.batch, cfg.batch);
            BatchCache cache = net.forward(x);
            const LossResult res = loss_and_grad(cfg.network.loss, cache.output, y);
            const std::vector<Tensor> grads = net.backward(cache, res.grad);
            optimizer_step(net, state, cache, grads);
            ++iter;
            const double acc = ds.classification() ? accuracy(cache.output, y) : 0.0;
            trace.rows.push_back({epoch, iter, wall_ms(), flops::count(),
                                  res.loss / double(cfg.batch), acc, last_test_loss,
                                  last_test_acc});
        }
        train_m = evaluate(net, ds, order, 0, train_n, cfg.network.loss);
        test_m = evaluate(net, ds, order, train_n, test_n, cfg.network.loss);
        last_test_loss = test_m.loss;
        last_test_acc = test_m.acc;
        trace.rows.push_back({epoch, iter, wall_ms(), flops::count(), train_m.loss, train_m.acc,
                              test_m.loss, test_m.acc});
    }

    trace.final_test_acc = trace.rows.back().test_acc;
    for (const RunTraceRow& row : trace.rows) {
        trace.best_test_acc = std::max(trace.best_test_acc, row.test_acc);
    }

    const std::filesystem::path out(cfg.output);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::ofstream os(cfg.output);
    if (!os) throw FormatError(cfg.output + ": cannot open for writing");
    write_run_trace(os, trace);
    if (!os) throw FormatError(cfg.output + ": write failed");
    return trace;
}

[[noreturn]] void rethrow_with_context(const std::string& ctx) {
    try {
        throw;
    } catch (const ShapeError& e) {
        throw ShapeError(ctx + ": " + e.what());
    } catch (const NumericError& e) {
        throw NumericError(ctx + ": " + e.what());
    } catch (const ContractError& e) {
        throw ContractError(ctx + ": " + e.what());
    } catch (const DampingError& e) {
        throw DampingError(ctx + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError(ctx + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(ctx + ": " + e.what());
    } catch (const InputError& e) {
        throw InputError(ctx + ": " + e.what());
    }
}

// --- CSV parsing helpers ----------------------------------------------------------

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (const char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

double parse_real(const std::string& field, std::size_t lineno) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(field, &pos);
        if (pos != field.size()) throw std::invalid_argument("suffix");
        return v;
    } catch (const std::exception&) {
        throw FormatError("line " + std::to_string(lineno) + ": bad number '" + field + "'");
    }
}

std::uint64_t parse_count(const std::string& field, std::size_t lineno) {
    try {
        std::size_t pos = 0;
        if (field.empty() || field[0] == '-') throw std::invalid_argument("negative");
        const std::uint64_t v = std::stoull(field, &pos);
        if (pos != field.size()) throw std::invalid_argument("suffix");
        return v;
    } catch (const std::exception&) {
        throw FormatError("line " + std::to_string(lineno) + ": bad count '" + field + "'");
    }
}

}  // namespace

RunTrace run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    try {
        return run_inner(cfg);
    } catch (const Error&) {
        rethrow_with_context(cfg.output);
    }
}

void write_run_trace(std::ostream& os, const RunTrace& trace) {
    os << kRunHeader << "\n";
    for (const RunTraceRow& r : trace.rows) {
        os << r.epoch << ',' << r.iter << ',';
        char wall[32];
        std::snprintf(wall, sizeof(wall), "%.3f", r.wall_ms);
        os << wall << ',' << r.flops << ',';
        put_g17(os, r.train_loss);
        os << ',';
        put_g17(os, r.train_acc);
        os << ',';
        put_g17(os, r.test_loss);
        os << ',';
        put_g17(os, r.test_acc);
        os << '\n';
    }
}

RunTrace read_run_trace(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError("line 1: missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kRunHeader) {
        throw FormatError("line 1: unexpected header '" + line + "'");
    }
    RunTrace trace;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::vector<std::string> f = split_csv_line(line);
        if (f.size() != 8) {
            throw FormatError("line " + std::to_string(lineno) + ": expected 8 fields, got " +
                              std::to_string(f.size()));
        }
        RunTraceRow row;
        row.epoch = std::size_t(parse_count(f[0], lineno));
        row.iter = std::size_t(parse_count(f[1], lineno));
        row.wall_ms = parse_real(f[2], lineno);
        row.flops = parse_count(f[3], lineno);
        row.train_loss = parse_real(f[4], lineno);
        row.train_acc = parse_real(f[5], lineno);
        row.test_loss = parse_real(f[6], lineno);
        row.test_acc = parse_real(f[7], lineno);
        trace.rows.push_back(row);
    }
    if (!trace.rows.empty()) {
        trace.final_test_acc = trace.rows.back().test_acc;
        for (const RunTraceRow& row : trace.rows) {
            trace.best_test_acc = std::max(trace.best_test_acc, row.test_acc);
        }
    }
    return trace;
}

ConvergenceTrace read_convergence_trace(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError("line 1: missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::vector<std::string> head = split_csv_line(line);
    if (head.size() < 10 || head[0] != "k" || head[1] != "residual_sq" || head[2] != "loss" ||
        head[3] != "rate_bound") {
        throw FormatError("line 1: unexpected header '" + line + "'");
    }
    const std::size_t layers = head.size() - 9;
    for (std::size_t l = 0; l < layers; ++l) {
        if (head[4 + l] != "lambda_min_l" + std::to_string(l + 1)) {
            throw FormatError("line 1: unexpected column '" + head[4 + l] + "'");
        }
    }
    const char* tail[5] = {"param_drift", "jac_drift", "a1_flag", "a2_flag", "lemma2_flag"};
    for (std::size_t i = 0; i < 5; ++i) {
        if (head[4 + layers + i] != tail[i]) {
            throw FormatError("line 1: unexpected column '" + head[4 + layers + i] + "'");
        }
    }

    ConvergenceTrace trace;
    trace.layers = layers;
    std::size_t lineno = 1;
    auto flag = [&lineno](const std::string& field) {
        if (field == "0") return false;
        if (field == "1") return true;
        throw FormatError("line " + std::to_string(lineno) + ": bad flag '" + field + "'");
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::vector<std::string> f = split_csv_line(line);
        if (f.size() != 9 + layers) {
            throw FormatError("line " + std::to_string(lineno) + ": expected " +
                              std::to_string(9 + layers) + " fields, got " +
                              std::to_string(f.size()));
        }
        TraceRow row;
        row.k = std::size_t(parse_count(f[0], lineno));
        row.residual_sq = parse_real(f[1], lineno);
        row.loss = parse_real(f[2], lineno);
        row.rate_bound = parse_real(f[3], lineno);
        for (std::size_t l = 0; l < layers; ++l) {
            row.lambda_min.push_back(parse_real(f[4 + l], lineno));
        }
        row.param_drift = parse_real(f[4 + layers], lineno);
        row.jac_drift = parse_real(f[5 + layers], lineno);
        row.a1 = flag(f[6 + layers]);
        row.a2 = flag(f[7 + layers]);
        row.lemma2 = flag(f[8 + layers]);
        trace.rows.push_back(std::move(row));
    }
    return trace;
}

RatesOutcome rates_experiment(const LabConfig& cfg) {
    cfg.validate();
    const Dataset ds = cfg.dataset.load();
    require_input_match(cfg.network, ds);
    if (!ds.classification() && ds.targets.shape()[1] != 1) {
        throw ConfigError("dataset.outputs: rates targets must be one-dimensional");
    }
    const std::size_t n = ds.size();
    const Tensor x = transpose(ds.features);
    const Tensor y = transpose(ds.targets);

    RatesOutcome out;

    // Measure lambda0 on the initialized network without stepping.
    {
        Network probe = Network::init(cfg.network, cfg.seed);
        ConvlabRunConfig peek;
        peek.eta = 0.0;
        peek.alpha = cfg.alpha_auto ? 1e-3 : cfg.alpha;
        peek.k_max = 0;
        peek.assumed_c = cfg.assumed_c;
        out.lambda0 = full_batch_ngd_run(probe, x, y, peek).lambda0;
    }

    out.alpha_used =
        cfg.alpha_auto ? std::min(0.1, 4.0 * out.lambda0 / (9.0 * double(n))) : cfg.alpha;
    const double bound_alpha = out.alpha_used > 0.0 ? out.alpha_used : 0.0;
    out.bounds = theorem_bounds(out.lambda0, n, double(cfg.network.param_layer_count()),
                                bound_alpha, cfg.assumed_c);
    out.eta_used = cfg.eta_auto ? std::min(out.bounds.eta_max, 0.99) : cfg.eta;

    // Auto mode refuses to step outside the admissible region; explicit
    // eta/alpha run as given so out-of-regime behavior stays measurable.
    const bool admissible = out.bounds.feasible && out.alpha_used > 0.0 && out.eta_used > 0.0;
    if ((cfg.eta_auto || cfg.alpha_auto) && !admissible) {
        out.ran = false;
        return out;
    }

    Network net = Network::init(cfg.network, cfg.seed);
    ConvlabRunConfig run;
    run.eta = out.eta_used;
    run.alpha = out.alpha_used;
    run.k_max = cfg.k_max;
    run.assumed_c = cfg.assumed_c;
    out.trace = full_batch_ngd_run(net, x, y, run);
    out.monitor = assumption_monitor(out.trace);
    out.rate = rate_check(out.trace);
    out.ran = true;

    const std::filesystem::path path(cfg.output);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(cfg.output);
    if (!os) throw FormatError(cfg.output + ": cannot open for writing");
    write_trace_csv(os, out.trace);
    if (!os) throw FormatError(cfg.output + ": write failed");
    return out;
}

void dump_fisher_block(const ExperimentConfig& cfg, std::size_t pl, const std::string& path) {
    cfg.validate();
    const Dataset ds = cfg.dataset.load();
    require_input_match(cfg.network, ds);
    if (cfg.batch > ds.size()) {
        throw ConfigError("run.batch: exceeds dataset size " + std::to_string(ds.size()));
    }

    Network net = Network::init(cfg.network, cfg.seed);
    if (pl >= net.num_param_layers()) {
        throw ContractError("dump_fisher_block: layer " + std::to_string(pl) +
                            " out of range (network has " +
                            std::to_string(net.num_param_layers()) + " parameter layers)");
    }
    if (cfg.optimizer.damping <= 0.0) {
        throw ConfigError("optimizer.damping: must be positive to factor a block");
    }

    // First cfg.batch samples in stored order: reproducible without the
    // training shuffle.
    std::vector<std::size_t> idx(cfg.batch);
    for (std::size_t i = 0; i < cfg.batch; ++i) idx[i] = i;
    const Tensor x = feature_batch(ds, idx, 0, cfg.batch);
    const Tensor y = target_batch(ds, idx, 0, cfg.batch);
    BatchCache cache = net.forward(x);
    const LossResult res = loss_and_grad(cfg.network.loss, cache.output, y);
    net.backward(cache, res.grad);

    FisherBlock block;
    refresh_block(block, net, cache, pl, cfg.optimizer.damping, cfg.optimizer.gram_mode);

    const std::filesystem::path out(path);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError(path + ": cannot open for writing");
    const auto put_u32 = [&os](std::uint32_t v) {
        os.write(reinterpret_cast<const char*>(&v), 4);
    };
    os.write("TGRD", 4);
    put_u32(1);  // container version
    put_u32(3);  // gram, c1, c2
    for (const Tensor* t : {&block.gram, &block.c1, &block.c2}) {
        put_u32(std::uint32_t(t->shape().size()));
        for (const std::size_t dim : t->shape()) put_u32(std::uint32_t(dim));
        os.write(reinterpret_cast<const char*>(t->data()),
                 std::streamsize(t->size() * sizeof(double)));
    }
    if (!os) throw FormatError(path + ": write failed");
}

}  // namespace tengrad
