// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "tengrad/config.hpp"
#include "tengrad/convlab.hpp"
#include "tengrad/errors.hpp"
#include "tengrad/experiment.hpp"
#include "tengrad/fisher.hpp"
#include "tengrad/verify.hpp"

namespace {

using namespace tengrad;

struct TrainSlot {
    std::string path;
    ExperimentConfig config;
    RunTrace trace;
    std::exception_ptr failure;
};

int cmd_train(const std::vector<std::string>& paths, unsigned jobs) {
    std::vector<TrainSlot> slots(paths.size());
    bool needs_resolved_images = false;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        slots[i].path = paths[i];
        slots[i].config = load_experiment_config(paths[i]);
        const DatasetConfig& ds = slots[i].config.dataset;
        needs_resolved_images |=
            ds.kind == DatasetConfig::Kind::Idx && ds.images.empty();
    }
    // The resolver may generate the stand-in files on first use; doing it
    // once up front keeps parallel workers from racing to write them.
    if (needs_resolved_images) resolve_image_data();

    // Private state per run; the only shared write is the next-index counter.
    std::atomic<std::size_t> next{0};
    const auto worker = [&slots, &next] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= slots.size()) return;
            try {
                slots[i].trace = run_experiment(slots[i].config);
            } catch (...) {
                slots[i].failure = std::current_exception();
            }
        }
    };
    const unsigned n_workers =
        std::max(1u, std::min<unsigned>(jobs, unsigned(slots.size())));
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();

    int failures = 0;
    for (const TrainSlot& slot : slots) {
        if (slot.failure) {
            ++failures;
            try {
                std::rethrow_exception(slot.failure);
            } catch (const std::exception& e) {
                std::cerr << "train " << slot.path << ": " << e.what() << "\n";
            }
            continue;
        }
        char line[256];
        std::snprintf(line, sizeof(line),
                      "train %s: wrote %s (%zu rows); final train loss %.6g; "
                      "final test acc %.4f (best %.4f)\n",
                      slot.path.c_str(), slot.config.output.c_str(), slot.trace.rows.size(),
                      slot.trace.rows.back().train_loss, slot.trace.final_test_acc,
                      slot.trace.best_test_acc);
        std::cout << line;
    }
    return failures == 0 ? 0 : 1;
}

int cmd_verify(const std::string& suite) {
    const VerifyReport report = run_suite(suite);
    print_report(std::cout, report);
    return report.all_pass() ? 0 : 1;
}

int cmd_rates(const std::string& path) {
    const LabConfig cfg = load_lab_config(path);
    const RatesOutcome out = rates_experiment(cfg);

    char line[256];
    std::snprintf(line, sizeof(line), "lambda0      %.10g\n", out.lambda0);
    std::cout << line;
    std::snprintf(line, sizeof(line), "alpha        %.10g (max %.10g)\n", out.alpha_used,
                  out.bounds.alpha_max);
    std::cout << line;
    std::snprintf(line, sizeof(line), "gamma        %.10g\n", out.bounds.gamma);
    std::cout << line;
    std::snprintf(line, sizeof(line), "eta          %.10g (max %.10g)\n", out.eta_used,
                  out.bounds.eta_max);
    std::cout << line;
    std::cout << "feasible     " << (out.bounds.feasible ? "yes" : "no") << "\n";
    if (!out.ran) {
        std::cout << "run          skipped (no admissible step under auto bounds)\n";
        return 0;
    }

    const std::size_t k_max = out.trace.rows.size() - 1;
    if (out.rate.holds_all) {
        std::cout << "rate         holds through k=" << k_max << "\n";
    } else {
        std::cout << "rate         violated after k=" << out.rate.holds_through << "\n";
    }
    const auto monitor_line = [](const char* name, std::size_t first) {
        std::cout << name;
        if (first == MonitorReport::npos) {
            std::cout << "clean\n";
        } else {
            std::cout << "first violation at k=" << first << "\n";
        }
    };
    monitor_line("a1           ", out.monitor.first_a1);
    monitor_line("a2           ", out.monitor.first_a2);
    monitor_line("lemma2       ", out.monitor.first_lemma2);
    std::snprintf(line, sizeof(line), "smallest c   %.10g (assumed %.10g)\n",
                  out.monitor.smallest_c, cfg.assumed_c);
    std::cout << line;
    std::cout << "wrote        " << cfg.output << "\n";
    return 0;
}

int cmd_flops(const std::string& dims) {
    const auto fail = [&dims]() -> int {
        throw ConfigError("flops: want dense:D_IN:D_OUT:M or conv:S:F:C_OUT:M, got '" + dims +
                          "'");
    };
    std::vector<std::string> parts;
    std::string cur;
    for (const char c : dims) {
        if (c == ':') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    parts.push_back(cur);
    const std::size_t want = parts.empty() ? 0 : (parts[0] == "dense" ? 4 : 5);
    if (want == 0 || parts.size() != want) return fail();
    std::vector<std::size_t> v;
    for (std::size_t i = 1; i < parts.size(); ++i) {
        try {
            std::size_t pos = 0;
            v.push_back(std::stoull(parts[i], &pos));
            if (pos != parts[i].size() || v.back() == 0) return fail();
        } catch (const std::exception&) {
            return fail();
        }
    }

    LayerFlopReport report;
    if (parts[0] == "dense") {
        report = dense_flop_report(v[0], v[1], v[2]);
        std::cout << "dense d_in=" << v[0] << " d_out=" << v[1] << " m=" << v[2] << "\n";
    } else if (parts[0] == "conv") {
        report = conv_flop_report(v[0], v[1], v[2], v[3]);
        std::cout << "conv spatial=" << v[0] << " f=" << v[1] << " c_out=" << v[2]
                  << " m=" << v[3] << "\n";
    } else {
        return fail();
    }
    std::cout << "curvature refresh   " << report.tengrad_curvature << " madds\n";
    std::cout << "explicit gram       " << report.explicit_gram << " madds\n";
    std::cout << "preconditioned step " << report.tengrad_step << " madds\n";
    std::cout << "storage             " << report.tengrad_storage << " doubles\n";
    char line[96];
    std::snprintf(line, sizeof(line), "explicit/curvature  %.6g\n",
                  double(report.explicit_gram) / double(report.tengrad_curvature));
    std::cout << line;
    return 0;
}

int cmd_dump_block(const std::string& path, std::size_t layer, const std::string& out) {
    const ExperimentConfig cfg = load_experiment_config(path);
    dump_fisher_block(cfg, layer, out);
    std::cout << "wrote " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"natural gradient training, convergence lab, and verification toolkit"};
    app.require_subcommand(1);

    std::vector<std::string> train_configs;
    unsigned jobs = 1;
    CLI::App* train = app.add_subcommand("train", "run training configs and write trace CSVs");
    train->add_option("configs", train_configs, "experiment config files")
        ->required()
        ->expected(-1);
    train->add_option("--jobs", jobs, "parallel runs")->default_val(1u);

    std::string suite;
    CLI::App* verify = app.add_subcommand("verify", "run a property suite against references");
    verify->add_option("suite", suite,
                       "factorization | woodbury | jvpvjp | general | gradients | flops | "
                       "convergence | all")
        ->required();

    std::string rates_config;
    CLI::App* rates = app.add_subcommand("rates", "full-batch convergence run with rate bounds");
    rates->add_option("config", rates_config, "lab config file")->required();

    std::string flop_dims;
    CLI::App* flops = app.add_subcommand("flops", "closed-form layer cost report");
    flops->add_option("dims", flop_dims, "dense:D_IN:D_OUT:M or conv:S:F:C_OUT:M")->required();

    std::string block_config;
    std::size_t block_layer = 0;
    std::string block_out;
    CLI::App* dump = app.add_subcommand("dump-block", "factor one Fisher block and dump it");
    dump->add_option("config", block_config, "experiment config file")->required();
    dump->add_option("layer", block_layer, "parameter layer index")->required();
    dump->add_option("out", block_out, "output container path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(train_configs, jobs);
        if (*verify) return cmd_verify(suite);
        if (*rates) return cmd_rates(rates_config);
        if (*flops) return cmd_flops(flop_dims);
        if (*dump) return cmd_dump_block(block_config, block_layer, block_out);
    } catch (const tengrad::Error& e) {
        std::cerr << "tengrad: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "tengrad: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
