// SPDX-License-Identifier: Apache-2.0
#include "tengrad/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>

#include "tengrad/errors.hpp"

namespace tengrad {

namespace {

struct Entry {
    std::string value;
    std::size_t line = 0;
    bool used = false;
};

// section -> key -> entry; duplicate keys are rejected at scan time.
using Scan = std::map<std::string, std::map<std::string, Entry>>;

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

Scan scan_stream(std::istream& in) {
    Scan scan;
    std::string section;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) {
                throw ConfigError("line " + std::to_string(lineno) + ": empty section name");
            }
            scan[section];
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        }
        if (section.empty()) {
            throw ConfigError("line " + std::to_string(lineno) + ": key outside any [section]");
        }
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) {
            throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        }
        auto& entries = scan[section];
        if (entries.count(key)) {
            throw ConfigError(section + "." + key + ": duplicate key at line " +
                              std::to_string(lineno));
        }
        entries[key] = Entry{trim(line.substr(eq + 1)), lineno, false};
    }
    return scan;
}

// Typed accessors. All diagnostics lead with section.key.
class Section {
public:
    Section(Scan& scan, std::string name) : name_(std::move(name)) {
        auto it = scan.find(name_);
        entries_ = it == scan.end() ? nullptr : &it->second;
    }

    bool present() const { return entries_ != nullptr; }

    bool has(const std::string& key) const { return entries_ && entries_->count(key); }

    std::string require(const std::string& key) {
        if (!has(key)) throw ConfigError(name_ + "." + key + ": missing");
        auto& e = (*entries_)[key];
        e.used = true;
        return e.value;
    }

    std::string get_or(const std::string& key, const std::string& fallback) {
        if (!has(key)) return fallback;
        auto& e = (*entries_)[key];
        e.used = true;
        return e.value;
    }

    std::uint64_t u64(const std::string& key) { return to_u64(key, require(key)); }
    std::uint64_t u64_or(const std::string& key, std::uint64_t fallback) {
        if (!has(key)) return fallback;
        return to_u64(key, require(key));
    }
    double real(const std::string& key) { return to_real(key, require(key)); }
    double real_or(const std::string& key, double fallback) {
        if (!has(key)) return fallback;
        return to_real(key, require(key));
    }

    void reject_unknown() const {
        if (!entries_) return;
        for (const auto& [key, e] : *entries_) {
            if (!e.used) {
                throw ConfigError(name_ + "." + key + ": unknown key (line " +
                                  std::to_string(e.line) + ")");
            }
        }
    }

    std::uint64_t to_u64(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            if (v.empty() || v[0] == '-') throw std::invalid_argument("negative");
            const std::uint64_t out = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("suffix");
            return out;
        } catch (const std::exception&) {
            throw ConfigError(name_ + "." + key + ": not a nonnegative integer: '" + v + "'");
        }
    }

    double to_real(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            const double out = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument("suffix");
            return out;
        } catch (const std::exception&) {
            throw ConfigError(name_ + "." + key + ": not a number: '" + v + "'");
        }
    }

    const std::string& name() const { return name_; }

private:
    std::string name_;
    std::map<std::string, Entry>* entries_;
};

void require_section(const Scan& scan, const std::string& name) {
    if (!scan.count(name)) throw ConfigError(name + ": missing section");
}

void reject_unknown_sections(const Scan& scan, std::initializer_list<const char*> known) {
    for (const auto& [name, entries] : scan) {
        (void)entries;
        if (std::find_if(known.begin(), known.end(),
                         [&](const char* k) { return name == k; }) == known.end()) {
            throw ConfigError(name + ": unknown section");
        }
    }
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (const char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(trim(cur));
    return out;
}

DatasetConfig parse_dataset(Scan& scan) {
    Section sec(scan, "dataset");
    require_section(scan, "dataset");
    DatasetConfig ds;
    const std::string kind = sec.require("kind");
    if (kind == "synthetic") {
        ds.kind = DatasetConfig::Kind::Synthetic;
        ds.n = sec.u64("n");
        ds.d = sec.u64("d");
        ds.noise = sec.real_or("noise", 0.0);
        if (ds.n == 0) throw ConfigError("dataset.n: must be positive");
        if (ds.d == 0) throw ConfigError("dataset.d: must be positive");
        if (ds.noise < 0.0) throw ConfigError("dataset.noise: must be nonnegative");
        const std::string teacher = sec.get_or("teacher", "linear");
        if (teacher == "identity") {
            ds.teacher.kind = TeacherKind::Identity;
        } else if (teacher == "linear") {
            ds.teacher.kind = TeacherKind::Linear;
        } else if (teacher == "mlp") {
            ds.teacher.kind = TeacherKind::Mlp;
        } else {
            throw ConfigError("dataset.teacher: unknown teacher '" + teacher + "'");
        }
        ds.teacher.outputs = sec.u64_or("outputs", 1);
        if (ds.teacher.kind != TeacherKind::Identity && ds.teacher.outputs == 0) {
            throw ConfigError("dataset.outputs: must be positive");
        }
        if (sec.has("seed")) {
            ds.seed = sec.u64("seed");
            ds.seed_explicit = true;
        }
    } else if (kind == "idx") {
        ds.kind = DatasetConfig::Kind::Idx;
        // Both paths given: load exactly those files. Both omitted: resolve
        // through TENGRAD_FMNIST_DIR, then data/, at load time.
        ds.images = sec.get_or("images", "");
        ds.labels = sec.get_or("labels", "");
        ds.subset = sec.u64_or("subset", 0);
        if (ds.images.empty() != ds.labels.empty()) {
            throw ConfigError("dataset.images: images and labels must be given together");
        }
    } else {
        throw ConfigError("dataset.kind: unknown kind '" + kind + "'");
    }
    sec.reject_unknown();
    return ds;
}

InputShape parse_input(const std::string& token) {
    const std::vector<std::string> parts = split(token, ':');
    auto num = [&](std::size_t i) -> std::size_t {
        try {
            std::size_t pos = 0;
            const std::uint64_t v = std::stoull(parts[i], &pos);
            if (pos != parts[i].size() || v == 0) throw std::invalid_argument("bad");
            return std::size_t(v);
        } catch (const std::exception&) {
            throw ConfigError("network.input: bad dimension '" + parts[i] + "' in '" + token +
                              "'");
        }
    };
    if (parts.size() == 2 && parts[0] == "vector") return InputShape::vector(num(1));
    if (parts.size() == 4 && parts[0] == "image") return InputShape::image(num(1), num(2), num(3));
    throw ConfigError("network.input: expected vector:D or image:C:H:W, got '" + token + "'");
}

LayerSpec parse_layer(const std::string& token) {
    const std::vector<std::string> parts = split(token, ':');
    auto num = [&](std::size_t i) -> std::size_t {
        try {
            std::size_t pos = 0;
            const std::uint64_t v = std::stoull(parts[i], &pos);
            if (pos != parts[i].size()) throw std::invalid_argument("bad");
            return std::size_t(v);
        } catch (const std::exception&) {
            throw ConfigError("network.layers: bad number '" + parts[i] + "' in '" + token + "'");
        }
    };
    const bool bias = !parts.empty() && parts.back() == "bias";
    const std::size_t args = parts.size() - (bias ? 1 : 0);
    if (parts[0] == "relu" && parts.size() == 1) return LayerSpec::relu();
    if (parts[0] == "dense" && args == 3) return LayerSpec::dense(num(1), num(2), bias);
    if (parts[0] == "conv" && args == 6) {
        return LayerSpec::conv2d(num(1), num(2), num(3), num(4), num(5), bias);
    }
    throw ConfigError("network.layers: bad layer token '" + token +
                      "' (want dense:IN:OUT[:bias], conv:CIN:COUT:K:S:P[:bias], or relu)");
}

NetworkSpec parse_network(Scan& scan) {
    require_section(scan, "network");
    Section sec(scan, "network");
    NetworkSpec net;
    net.input = parse_input(sec.require("input"));
    const std::string layers = sec.require("layers");
    for (const std::string& token : split(layers, ',')) {
        if (token.empty()) throw ConfigError("network.layers: empty layer token");
        net.layers.push_back(parse_layer(token));
    }
    const std::string loss = sec.get_or("loss", "squared_error");
    if (loss == "squared_error") {
        net.loss = LossKind::SquaredError;
    } else if (loss == "cross_entropy") {
        net.loss = LossKind::CrossEntropy;
    } else {
        throw ConfigError("network.loss: unknown loss '" + loss + "'");
    }
    sec.reject_unknown();
    try {
        net.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("network.layers: ") + e.what());
    }
    return net;
}

OptimConfig parse_optimizer(Scan& scan) {
    require_section(scan, "optimizer");
    Section sec(scan, "optimizer");
    OptimConfig opt;
    const std::string method = sec.require("method");
    if (method == "sgd") {
        opt.method = Method::Sgd;
    } else if (method == "tengrad") {
        opt.method = Method::Tengrad;
    } else if (method == "exact_ngd") {
        opt.method = Method::ExactNgd;
    } else {
        throw ConfigError("optimizer.method: unknown method '" + method + "'");
    }
    opt.lr = sec.real("lr");
    opt.momentum = sec.real_or("momentum", 0.0);
    opt.weight_decay = sec.real_or("weight_decay", 0.0);
    opt.damping = sec.real_or("damping", 0.0);
    opt.inversion_freq = std::size_t(sec.u64_or("inversion_freq", 1));
    const std::string mode = sec.get_or("gram_mode", "blocked");
    if (mode == "blocked") {
        opt.gram_mode = ConvGramMode::Blocked;
    } else if (mode == "materialized") {
        opt.gram_mode = ConvGramMode::Materialized;
    } else {
        throw ConfigError("optimizer.gram_mode: unknown mode '" + mode + "'");
    }
    sec.reject_unknown();
    opt.validate();
    return opt;
}

ScheduleConfig parse_schedule(const std::string& token) {
    ScheduleConfig sched;
    const std::vector<std::string> parts = split(token, ':');
    auto num = [&](std::size_t i) -> std::size_t {
        try {
            std::size_t pos = 0;
            const std::uint64_t v = std::stoull(parts[i], &pos);
            if (pos != parts[i].size() || v == 0) throw std::invalid_argument("bad");
            return std::size_t(v);
        } catch (const std::exception&) {
            throw ConfigError("run.schedule: bad epoch '" + parts[i] + "' in '" + token + "'");
        }
    };
    if (parts[0] == "constant" && parts.size() == 1) {
        sched.kind = ScheduleConfig::Kind::Constant;
        return sched;
    }
    if (parts[0] == "halve_every" && parts.size() == 2) {
        sched.kind = ScheduleConfig::Kind::HalveEvery;
        sched.halve_every = num(1);
        return sched;
    }
    if (parts[0] == "decay_at" && parts.size() >= 2) {
        sched.kind = ScheduleConfig::Kind::DecayAt;
        for (std::size_t i = 1; i < parts.size(); ++i) sched.decay_epochs.push_back(num(i));
        for (std::size_t i = 1; i < sched.decay_epochs.size(); ++i) {
            if (sched.decay_epochs[i] <= sched.decay_epochs[i - 1]) {
                throw ConfigError("run.schedule: decay epochs must be strictly increasing");
            }
        }
        return sched;
    }
    throw ConfigError("run.schedule: expected constant, halve_every:E, or decay_at:E1:E2:..., "
                      "got '" + token + "'");
}

std::uint64_t env_seed_override(std::uint64_t fallback) {
    if (const char* env = std::getenv("TENGRAD_SEED")) {
        try {
            std::size_t pos = 0;
            const std::uint64_t v = std::stoull(env, &pos);
            if (pos != std::string(env).size()) throw std::invalid_argument("suffix");
            return v;
        } catch (const std::exception&) {
            throw ConfigError(std::string("TENGRAD_SEED: not a nonnegative integer: '") + env +
                              "'");
        }
    }
    return fallback;
}

}  // namespace

Dataset DatasetConfig::load() const {
    if (kind == Kind::Synthetic) return gen_synthetic(n, d, teacher, noise, seed);
    if (images.empty()) {
        const auto [img, lab] = resolve_image_data();
        return load_idx(img, lab, subset);
    }
    return load_idx(images, labels, subset);
}

double schedule_lr(const ScheduleConfig& schedule, double base_lr, std::size_t epoch) {
    if (epoch == 0) throw ContractError("schedule_lr: epochs are 1-based");
    switch (schedule.kind) {
        case ScheduleConfig::Kind::Constant:
            return base_lr;
        case ScheduleConfig::Kind::HalveEvery: {
            // Halved after every `halve_every` completed epochs.
            const std::size_t halvings = (epoch - 1) / schedule.halve_every;
            return base_lr * std::pow(0.5, double(halvings));
        }
        case ScheduleConfig::Kind::DecayAt: {
            double lr = base_lr;
            for (const std::size_t decay_epoch : schedule.decay_epochs) {
                if (epoch > decay_epoch) lr *= 0.1;
            }
            return lr;
        }
    }
    throw ContractError("schedule_lr: unhandled schedule kind");
}

void ExperimentConfig::validate() const {
    network.validate();
    optimizer.validate();
    if (batch == 0) throw ConfigError("run.batch: must be positive");
    if (dataset.kind == DatasetConfig::Kind::Synthetic && batch > dataset.n) {
        throw ConfigError("run.batch: exceeds dataset size " + std::to_string(dataset.n));
    }
    if (dataset.kind == DatasetConfig::Kind::Idx && dataset.subset > 0 && batch > dataset.subset) {
        throw ConfigError("run.batch: exceeds dataset subset " + std::to_string(dataset.subset));
    }
    if (eval_split < 0.0 || eval_split >= 1.0) {
        throw ConfigError("run.eval_split: must lie in [0, 1)");
    }
    if (schedule.kind == ScheduleConfig::Kind::HalveEvery) {
        if (schedule.halve_every == 0 || (epochs > 0 && schedule.halve_every > epochs)) {
            throw ConfigError("run.schedule: halve_every period outside run length " +
                              std::to_string(epochs));
        }
    }
    if (schedule.kind == ScheduleConfig::Kind::DecayAt) {
        for (const std::size_t e : schedule.decay_epochs) {
            if (e > epochs) {
                throw ConfigError("run.schedule: decay epoch " + std::to_string(e) +
                                  " exceeds run length " + std::to_string(epochs));
            }
        }
    }
    if (output.empty()) throw ConfigError("run.output: missing");
    // The datasets feeding each loss: labels for cross-entropy, targets
    // matching the output width for squared error.
    if (network.loss == LossKind::CrossEntropy &&
        dataset.kind == DatasetConfig::Kind::Synthetic) {
        throw ConfigError("network.loss: cross_entropy needs a labeled idx dataset");
    }
}

void LabConfig::validate() const {
    network.validate();
    if (dataset.kind != DatasetConfig::Kind::Synthetic) {
        throw ConfigError("dataset.kind: rates runs use synthetic data");
    }
    if (network.loss != LossKind::SquaredError) {
        throw ConfigError("network.loss: rates runs use squared_error");
    }
    if (network.output_dim() != 1) {
        throw ConfigError("network.layers: rates runs need a single-output network");
    }
    if (!eta_auto && (eta < 0.0 || eta > 1.0)) {
        throw ConfigError("rates.eta: must lie in [0, 1] or be auto");
    }
    if (!alpha_auto && alpha <= 0.0) {
        throw ConfigError("rates.alpha: must be positive or auto");
    }
    if (assumed_c <= 0.0 || assumed_c > 0.5) {
        throw ConfigError("rates.assumed_c: must lie in (0, 0.5]");
    }
    if (k_max == 0) throw ConfigError("rates.k_max: must be positive");
    if (output.empty()) throw ConfigError("rates.output: missing");
}

ExperimentConfig parse_experiment_config(std::istream& in) {
    Scan scan = scan_stream(in);
    reject_unknown_sections(scan, {"dataset", "network", "optimizer", "run"});
    ExperimentConfig cfg;
    cfg.dataset = parse_dataset(scan);
    cfg.network = parse_network(scan);
    cfg.optimizer = parse_optimizer(scan);

    require_section(scan, "run");
    Section run(scan, "run");
    cfg.epochs = std::size_t(run.u64("epochs"));
    cfg.batch = std::size_t(run.u64("batch"));
    cfg.eval_split = run.real_or("eval_split", 0.0);
    cfg.schedule = parse_schedule(run.get_or("schedule", "constant"));
    cfg.output = run.require("output");
    cfg.seed = run.u64_or("seed", 0);
    run.reject_unknown();

    cfg.seed = env_seed_override(cfg.seed);
    if (!cfg.dataset.seed_explicit) cfg.dataset.seed = cfg.seed;

    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open");
    try {
        return parse_experiment_config(in);
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

LabConfig parse_lab_config(std::istream& in) {
    Scan scan = scan_stream(in);
    reject_unknown_sections(scan, {"dataset", "network", "rates"});
    LabConfig cfg;
    cfg.dataset = parse_dataset(scan);
    cfg.network = parse_network(scan);

    require_section(scan, "rates");
    Section rates(scan, "rates");
    const std::string eta = rates.get_or("eta", "auto");
    if (eta == "auto") {
        cfg.eta_auto = true;
    } else {
        cfg.eta_auto = false;
        cfg.eta = rates.to_real("eta", eta);
    }
    const std::string alpha = rates.get_or("alpha", "auto");
    if (alpha == "auto") {
        cfg.alpha_auto = true;
    } else {
        cfg.alpha_auto = false;
        cfg.alpha = rates.to_real("alpha", alpha);
    }
    cfg.k_max = std::size_t(rates.u64_or("k_max", 500));
    cfg.assumed_c = rates.real_or("assumed_c", 0.5);
    cfg.output = rates.require("output");
    cfg.seed = rates.u64_or("seed", 0);
    rates.reject_unknown();

    cfg.seed = env_seed_override(cfg.seed);
    if (!cfg.dataset.seed_explicit) cfg.dataset.seed = cfg.seed;

    cfg.validate();
    return cfg;
}

LabConfig load_lab_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open");
    try {
        return parse_lab_config(in);
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

HyperGrid sweep_grid() {
    return HyperGrid{
        {0.001, 0.003, 0.01, 0.03, 0.1, 0.3},
        {0.001, 0.003, 0.01, 0.03, 0.1, 0.3},
        {0.001, 0.003, 0.01, 0.03, 0.1, 0.2, 0.3},
        0.9,
    };
}

}  // namespace tengrad
