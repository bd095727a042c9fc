// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tengrad/dataset.hpp"
#include "tengrad/net.hpp"
#include "tengrad/optim.hpp"

// ---------------------------------------------------------------------------
// Flat key-value configuration files.
//
//   # comment
//   [dataset]
//   kind = synthetic            # or idx
//   n = 512                     # synthetic: samples
//   d = 16                      # synthetic: input features
//   noise = 0.05                # synthetic: target noise sigma
//   teacher = linear            # synthetic: identity | linear | mlp
//   outputs = 1                 # synthetic: teacher output width
//   seed = 7                    # synthetic: optional, defaults to the run seed
//   images = path               # idx: image file
//   labels = path               # idx: label file
//   subset = 5000               # idx: 0 means all
//
//   [network]
//   input = vector:16           # or image:C:H:W
//   layers = dense:16:32:bias, relu, dense:32:1
//   loss = squared_error        # or cross_entropy
//
//   [optimizer]                 # train configs only
//   method = tengrad            # sgd | tengrad | exact_ngd
//   lr = 0.1
//   momentum = 0.9
//   weight_decay = 0.001
//   damping = 0.1
//   inversion_freq = 100
//   gram_mode = blocked         # or materialized
//
//   [run]                       # train configs only
//   epochs = 6
//   batch = 128
//   eval_split = 0.2
//   schedule = constant         # halve_every:10 | decay_at:30:45
//   output = trace.csv
//   seed = 1
//
//   [rates]                     # lab configs only
//   eta = auto                  # number, or auto = min(eta_max, 0.99)
//   alpha = auto                # number, or auto = min(0.1, 4*lambda0/(9n))
//   k_max = 500
//   assumed_c = 0.5
//   output = trace.csv
//   seed = 1
//
// Layer tokens: dense:IN:OUT[:bias], conv:CIN:COUT:K:S:P[:bias], relu.
// Every diagnostic names the offending section.key. The TENGRAD_SEED
// environment variable, when set, overrides the seed keys (and the synthetic
// dataset seed when it was defaulted).
// ---------------------------------------------------------------------------

namespace tengrad {

struct DatasetConfig {
    enum class Kind { Synthetic, Idx };
    Kind kind = Kind::Synthetic;
    // Synthetic.
    std::size_t n = 0;
    std::size_t d = 0;
    double noise = 0.0;
    TeacherSpec teacher;
    std::uint64_t seed = 0;
    bool seed_explicit = false;
    // Idx.
    std::string images;
    std::string labels;
    std::size_t subset = 0;  // 0 = all

    Dataset load() const;
};

struct ScheduleConfig {
    enum class Kind { Constant, HalveEvery, DecayAt };
    Kind kind = Kind::Constant;
    std::size_t halve_every = 0;
    std::vector<std::size_t> decay_epochs;
};

// Learning rate in force during 1-based epoch `epoch`.
double schedule_lr(const ScheduleConfig& schedule, double base_lr, std::size_t epoch);

struct ExperimentConfig {
    DatasetConfig dataset;
    NetworkSpec network;
    OptimConfig optimizer;
    std::size_t epochs = 0;
    std::size_t batch = 0;
    double eval_split = 0.0;
    ScheduleConfig schedule;
    std::string output;
    std::uint64_t seed = 0;

    // ConfigError naming section.key on any violated invariant.
    void validate() const;
};

struct LabConfig {
    DatasetConfig dataset;
    NetworkSpec network;
    bool eta_auto = true;
    double eta = 0.0;
    bool alpha_auto = true;
    double alpha = 0.0;
    std::size_t k_max = 500;
    double assumed_c = 0.5;
    std::string output;
    std::uint64_t seed = 0;

    void validate() const;
};

// Parse from a stream (diagnostics cite section.key and the line number) or
// from a file path. The loaders apply the TENGRAD_SEED override.
ExperimentConfig parse_experiment_config(std::istream& in);
ExperimentConfig load_experiment_config(const std::string& path);
LabConfig parse_lab_config(std::istream& in);
LabConfig load_lab_config(const std::string& path);

// Built-in sweep preset: the hyperparameter grids train configs are tuned
// over, with the fixed momentum they assume.
struct HyperGrid {
    std::vector<double> lr;
    std::vector<double> weight_decay;
    std::vector<double> damping;
    double momentum = 0.9;
};
HyperGrid sweep_grid();

}  // namespace tengrad
