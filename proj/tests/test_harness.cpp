// SPDX-License-Identifier: Apache-2.0
#include "tengrad/experiment.hpp"

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "tengrad/config.hpp"
#include "tengrad/dataset.hpp"
#include "tengrad/errors.hpp"
#include "tengrad/fisher.hpp"
#include "tengrad/verify.hpp"

using namespace tengrad;

namespace {

namespace fs = std::filesystem;

// Per-process scratch directory; wiped once so reruns start clean.
const fs::path& scratch_dir() {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "tengrad-harness-tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string scratch(const std::string& name) { return (scratch_dir() / name).string(); }

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    REQUIRE(bool(out));
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

// Restores the variable to its pre-test state on scope exit.
class EnvGuard {
public:
    explicit EnvGuard(const char* name) : name_(name) {
        if (const char* v = std::getenv(name)) {
            had_ = true;
            old_ = v;
        }
        unsetenv(name);
    }
    ~EnvGuard() {
        if (had_) {
            setenv(name_, old_.c_str(), 1);
        } else {
            unsetenv(name_);
        }
    }
    void set(const std::string& v) { setenv(name_, v.c_str(), 1); }

private:
    const char* name_;
    bool had_ = false;
    std::string old_;
};

// A 2-image 2x3 fixture pair with pixel bytes 0..11 and labels {3, 7}.
std::pair<std::string, std::string> idx_fixture() {
    const std::string img = scratch("fixture-images.idx");
    const std::string lab = scratch("fixture-labels.idx");
    std::vector<std::uint8_t> pixels(12);
    for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = std::uint8_t(i);
    write_idx_images(img, pixels, 2, 2, 3);
    write_idx_labels(lab, {3, 7});
    return {img, lab};
}

ExperimentConfig linear_sgd_config(const std::string& output) {
    ExperimentConfig cfg;
    cfg.dataset.kind = DatasetConfig::Kind::Synthetic;
    cfg.dataset.n = 32;
    cfg.dataset.d = 8;
    cfg.dataset.noise = 0.0;
    cfg.dataset.teacher = {TeacherKind::Linear, 1};
    cfg.dataset.seed = 11;
    cfg.dataset.seed_explicit = true;
    cfg.network.input = InputShape::vector(8);
    cfg.network.layers = {LayerSpec::dense(8, 1)};
    cfg.network.loss = LossKind::SquaredError;
    cfg.optimizer.method = Method::Sgd;
    cfg.optimizer.lr = 0.1;
    cfg.epochs = 10;
    cfg.batch = 32;
    cfg.eval_split = 0.0;
    cfg.output = output;
    cfg.seed = 11;
    return cfg;
}

bool rows_equal_except_wall(const RunTraceRow& a, const RunTraceRow& b) {
    return a.epoch == b.epoch && a.iter == b.iter && a.flops == b.flops &&
           a.train_loss == b.train_loss && a.train_acc == b.train_acc &&
           a.test_loss == b.test_loss && a.test_acc == b.test_acc;
}

std::uint32_t u32_at(const std::vector<std::uint8_t>& b, std::size_t off) {
    std::uint32_t v = 0;
    std::memcpy(&v, b.data() + off, 4);
    return v;
}

double f64_at(const std::vector<std::uint8_t>& b, std::size_t off) {
    double v = 0.0;
    std::memcpy(&v, b.data() + off, 8);
    return v;
}

}  // namespace

// --- dataset ingestion -------------------------------------------------------------

TEST_CASE("idx writers and reader are inverse up to pixel scaling") {
    const auto [img, lab] = idx_fixture();
    const Dataset ds = load_idx(img, lab);
    CHECK(ds.classification());
    CHECK(ds.size() == 2);
    CHECK(ds.dim() == 6);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t p = 0; p < 6; ++p) {
            CHECK(ds.features(i, p) == double(i * 6 + p) / 255.0);
        }
    }
    CHECK(ds.labels == std::vector<int>{3, 7});

    const Dataset first = load_idx(img, lab, 1);
    CHECK(first.size() == 1);
    CHECK(first.labels == std::vector<int>{3});
}

TEST_CASE("idx reader names the byte offset of each malformed field") {
    const auto [img, lab] = idx_fixture();
    const std::vector<std::uint8_t> good_img = read_bytes(img);
    const std::vector<std::uint8_t> good_lab = read_bytes(lab);

    SUBCASE("image magic") {
        auto bad = good_img;
        bad[2] = 0xff;
        const std::string path = scratch("bad-magic.idx");
        write_bytes(path, bad);
        CHECK_THROWS_WITH_AS(load_idx(path, lab), doctest::Contains("bad magic 0x0000ff03 at byte 0"),
                             FormatError);
    }
    SUBCASE("zero image dimension") {
        auto bad = good_img;
        bad[8] = bad[9] = bad[10] = bad[11] = 0;
        const std::string path = scratch("zero-rows.idx");
        write_bytes(path, bad);
        CHECK_THROWS_WITH_AS(load_idx(path, lab), doctest::Contains("zero image dimension at byte 8"),
                             FormatError);
    }
    SUBCASE("truncated image payload") {
        auto bad = good_img;
        bad.resize(20);
        const std::string path = scratch("short-pixels.idx");
        write_bytes(path, bad);
        CHECK_THROWS_WITH_AS(load_idx(path, lab),
                             doctest::Contains("truncated at byte 20 (need 28 bytes for 2 images)"),
                             FormatError);
    }
    SUBCASE("truncated image header") {
        const std::string path = scratch("short-header.idx");
        write_bytes(path, {0x00, 0x00, 0x08, 0x03, 0x00});
        CHECK_THROWS_WITH_AS(load_idx(path, lab),
                             doctest::Contains("need 4-byte field at byte 4"), FormatError);
    }
    SUBCASE("label magic") {
        auto bad = good_lab;
        bad[3] = 0x99;
        const std::string path = scratch("bad-label-magic.idx");
        write_bytes(path, bad);
        CHECK_THROWS_WITH_AS(load_idx(img, path), doctest::Contains("bad magic 0x00000899 at byte 0"),
                             FormatError);
    }
    SUBCASE("label count mismatch") {
        auto bad = good_lab;
        bad[7] = 3;
        bad.push_back(1);
        const std::string path = scratch("count-mismatch.idx");
        write_bytes(path, bad);
        CHECK_THROWS_WITH_AS(load_idx(img, path),
                             doctest::Contains("item count 3 at byte 4 does not match image count 2"),
                             FormatError);
    }
    SUBCASE("truncated labels") {
        auto bad = good_lab;
        bad.resize(9);
        const std::string path = scratch("short-labels.idx");
        write_bytes(path, bad);
        CHECK_THROWS_WITH_AS(load_idx(img, path),
                             doctest::Contains("truncated at byte 9 (need 10 bytes)"), FormatError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_WITH_AS(load_idx(scratch("absent.idx"), lab), doctest::Contains("cannot open"),
                             FormatError);
    }
}

TEST_CASE("synthetic generator normalizes rows and repeats bit for bit") {
    const TeacherSpec teacher{TeacherKind::Linear, 2};
    const Dataset a = gen_synthetic(24, 6, teacher, 0.1, 99);
    const Dataset b = gen_synthetic(24, 6, teacher, 0.1, 99);
    CHECK(!a.classification());
    CHECK(a.targets.shape() == std::vector<std::size_t>{24, 2});
    for (std::size_t i = 0; i < 24; ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < 6; ++j) norm += a.features(i, j) * a.features(i, j);
        CHECK(std::abs(norm - 1.0) <= 1e-12);
    }
    CHECK(std::memcmp(a.features.data(), b.features.data(), a.features.size() * 8) == 0);
    CHECK(std::memcmp(a.targets.data(), b.targets.data(), a.targets.size() * 8) == 0);

    const Dataset c = gen_synthetic(24, 6, teacher, 0.1, 100);
    CHECK(std::memcmp(a.features.data(), c.features.data(), a.features.size() * 8) != 0);

    const Dataset id = gen_synthetic(8, 5, {TeacherKind::Identity, 0}, 0.0, 4);
    CHECK(std::memcmp(id.features.data(), id.targets.data(), id.features.size() * 8) == 0);

    CHECK_THROWS_AS(gen_synthetic(0, 4, teacher, 0.0, 1), ContractError);
    CHECK_THROWS_AS(gen_synthetic(4, 4, {TeacherKind::Linear, 0}, 0.0, 1), ContractError);
}

TEST_CASE("synthetic idx stand-in round-trips and separates its classes") {
    const std::string img = scratch("synth-images.idx");
    const std::string lab = scratch("synth-labels.idx");
    gen_synthetic_idx(img, lab, 64, 8, 8, 4, 123);
    const Dataset ds = load_idx(img, lab);
    CHECK(ds.size() == 64);
    CHECK(ds.dim() == 64);
    for (const int label : ds.labels) {
        CHECK(label >= 0);
        CHECK(label < 4);
    }
    double lo = 1.0, hi = 0.0;
    for (std::size_t i = 0; i < ds.features.size(); ++i) {
        lo = std::min(lo, ds.features.data()[i]);
        hi = std::max(hi, ds.features.data()[i]);
    }
    CHECK(lo >= 0.0);
    CHECK(hi <= 1.0);
    CHECK(hi > lo);

    const std::string img2 = scratch("synth-images-2.idx");
    const std::string lab2 = scratch("synth-labels-2.idx");
    gen_synthetic_idx(img2, lab2, 64, 8, 8, 4, 123);
    CHECK(read_bytes(img) == read_bytes(img2));
    CHECK(read_bytes(lab) == read_bytes(lab2));
}

TEST_CASE("image data resolution honors the directory override") {
    EnvGuard guard("TENGRAD_FMNIST_DIR");
    const fs::path dir = scratch_dir() / "fmnist-override";
    fs::create_directories(dir);
    gen_synthetic_idx((dir / "train-images-idx3-ubyte").string(),
                      (dir / "train-labels-idx1-ubyte").string(), 16, 4, 4, 2, 5);
    guard.set(dir.string());
    const auto [img, lab] = resolve_image_data();
    CHECK(img == (dir / "train-images-idx3-ubyte").string());
    CHECK(lab == (dir / "train-labels-idx1-ubyte").string());
    const Dataset ds = load_idx(img, lab);
    CHECK(ds.size() == 16);
}

// --- configuration -----------------------------------------------------------------

TEST_CASE("experiment config parses every section with defaults applied") {
    EnvGuard guard("TENGRAD_SEED");
    std::istringstream in(
        "# training run\n"
        "[dataset]\n"
        "kind = synthetic\n"
        "n = 64\n"
        "d = 8\n"
        "\n"
        "[network]\n"
        "input = vector:8\n"
        "layers = dense:8:16:bias, relu, dense:16:1\n"
        "\n"
        "[optimizer]\n"
        "method = sgd\n"
        "lr = 0.1\n"
        "\n"
        "[run]\n"
        "epochs = 2\n"
        "batch = 16\n"
        "output = out.csv\n");
    const ExperimentConfig cfg = parse_experiment_config(in);
    CHECK(cfg.dataset.kind == DatasetConfig::Kind::Synthetic);
    CHECK(cfg.dataset.noise == 0.0);
    CHECK(cfg.dataset.teacher.kind == TeacherKind::Linear);
    CHECK(cfg.dataset.teacher.outputs == 1);
    CHECK(cfg.dataset.seed == 0);  // defaulted to the run seed
    CHECK(cfg.network.layers.size() == 3);
    CHECK(cfg.network.loss == LossKind::SquaredError);
    CHECK(cfg.optimizer.method == Method::Sgd);
    CHECK(cfg.optimizer.momentum == 0.0);
    CHECK(cfg.optimizer.weight_decay == 0.0);
    CHECK(cfg.optimizer.inversion_freq == 1);
    CHECK(cfg.optimizer.gram_mode == ConvGramMode::Blocked);
    CHECK(cfg.eval_split == 0.0);
    CHECK(cfg.schedule.kind == ScheduleConfig::Kind::Constant);
    CHECK(cfg.output == "out.csv");
    CHECK(cfg.seed == 0);
}

TEST_CASE("config diagnostics name the offending section.key") {
    EnvGuard guard("TENGRAD_SEED");
    const std::string head =
        "[dataset]\nkind = synthetic\nn = 64\nd = 8\n"
        "[network]\ninput = vector:8\nlayers = dense:8:1\n"
        "[optimizer]\nmethod = sgd\nlr = 0.1\n";

    SUBCASE("duplicate key cites its line") {
        std::istringstream in("[dataset]\nkind = synthetic\nn = 64\nn = 32\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("dataset.n: duplicate key at line 4"), ConfigError);
    }
    SUBCASE("unknown key cites its line") {
        std::istringstream in(head + "[run]\nepochs = 1\nbatch = 8\noutput = o.csv\nbogus = 1\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("run.bogus: unknown key (line 15)"), ConfigError);
    }
    SUBCASE("unknown section") {
        std::istringstream in(head + "[run]\nepochs = 1\nbatch = 8\noutput = o.csv\n[extra]\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in), doctest::Contains("extra: unknown section"),
                             ConfigError);
    }
    SUBCASE("missing section") {
        std::istringstream in("[dataset]\nkind = synthetic\nn = 64\nd = 8\n"
                              "[network]\ninput = vector:8\nlayers = dense:8:1\n"
                              "[run]\nepochs = 1\nbatch = 8\noutput = o.csv\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("optimizer: missing section"), ConfigError);
    }
    SUBCASE("key outside any section") {
        std::istringstream in("kind = synthetic\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("line 1: key outside any [section]"), ConfigError);
    }
    SUBCASE("unterminated section header") {
        std::istringstream in("[dataset\nkind = synthetic\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("line 1: unterminated section header"), ConfigError);
    }
    SUBCASE("bad layer token") {
        std::istringstream in("[dataset]\nkind = synthetic\nn = 64\nd = 8\n"
                              "[network]\ninput = vector:8\nlayers = dense:8\n"
                              "[optimizer]\nmethod = sgd\nlr = 0.1\n"
                              "[run]\nepochs = 1\nbatch = 8\noutput = o.csv\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("network.layers: bad layer token 'dense:8'"),
                             ConfigError);
    }
    SUBCASE("non-numeric value") {
        std::istringstream in("[dataset]\nkind = synthetic\nn = lots\nd = 8\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("dataset.n: not a nonnegative integer: 'lots'"),
                             ConfigError);
    }
    SUBCASE("batch beyond the dataset") {
        std::istringstream in(head + "[run]\nepochs = 1\nbatch = 128\noutput = o.csv\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("run.batch: exceeds dataset size 64"), ConfigError);
    }
    SUBCASE("eval split bounds") {
        std::istringstream in(head +
                              "[run]\nepochs = 1\nbatch = 8\neval_split = 1.0\noutput = o.csv\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("run.eval_split: must lie in [0, 1)"), ConfigError);
    }
    SUBCASE("cross entropy needs labels") {
        std::istringstream in("[dataset]\nkind = synthetic\nn = 64\nd = 8\n"
                              "[network]\ninput = vector:8\nlayers = dense:8:4\n"
                              "loss = cross_entropy\n"
                              "[optimizer]\nmethod = sgd\nlr = 0.1\n"
                              "[run]\nepochs = 1\nbatch = 8\noutput = o.csv\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("network.loss: cross_entropy needs a labeled idx"),
                             ConfigError);
    }
    SUBCASE("idx paths come in pairs") {
        std::istringstream in("[dataset]\nkind = idx\nimages = a.idx\n"
                              "[network]\ninput = vector:8\nlayers = dense:8:1\n"
                              "[optimizer]\nmethod = sgd\nlr = 0.1\n"
                              "[run]\nepochs = 1\nbatch = 8\noutput = o.csv\n");
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("images and labels must be given together"),
                             ConfigError);
    }
}

TEST_CASE("seed environment override wins over config keys") {
    EnvGuard guard("TENGRAD_SEED");
    const std::string text =
        "[dataset]\nkind = synthetic\nn = 64\nd = 8\n"
        "[network]\ninput = vector:8\nlayers = dense:8:1\n"
        "[optimizer]\nmethod = sgd\nlr = 0.1\n"
        "[run]\nepochs = 1\nbatch = 8\noutput = o.csv\nseed = 7\n";

    {
        std::istringstream in(text);
        const ExperimentConfig cfg = parse_experiment_config(in);
        CHECK(cfg.seed == 7);
        CHECK(cfg.dataset.seed == 7);
    }
    guard.set("31337");
    {
        std::istringstream in(text);
        const ExperimentConfig cfg = parse_experiment_config(in);
        CHECK(cfg.seed == 31337);
        CHECK(cfg.dataset.seed == 31337);
    }
    {
        // An explicit dataset seed survives the override.
        std::istringstream in("[dataset]\nkind = synthetic\nn = 64\nd = 8\nseed = 5\n"
                              "[network]\ninput = vector:8\nlayers = dense:8:1\n"
                              "[optimizer]\nmethod = sgd\nlr = 0.1\n"
                              "[run]\nepochs = 1\nbatch = 8\noutput = o.csv\n");
        const ExperimentConfig cfg = parse_experiment_config(in);
        CHECK(cfg.seed == 31337);
        CHECK(cfg.dataset.seed == 5);
    }
    guard.set("12x");
    {
        std::istringstream in(text);
        CHECK_THROWS_WITH_AS(parse_experiment_config(in),
                             doctest::Contains("TENGRAD_SEED: not a nonnegative integer: '12x'"),
                             ConfigError);
    }
}

TEST_CASE("lab config resolves auto markers and rejects off-contract runs") {
    EnvGuard guard("TENGRAD_SEED");
    std::istringstream in("[dataset]\nkind = synthetic\nn = 16\nd = 8\n"
                          "[network]\ninput = vector:8\nlayers = dense:8:32, relu, dense:32:1\n"
                          "[rates]\noutput = lab.csv\n");
    const LabConfig cfg = parse_lab_config(in);
    CHECK(cfg.eta_auto);
    CHECK(cfg.alpha_auto);
    CHECK(cfg.k_max == 500);
    CHECK(cfg.assumed_c == 0.5);

    std::istringstream numeric("[dataset]\nkind = synthetic\nn = 16\nd = 8\n"
                               "[network]\ninput = vector:8\nlayers = dense:8:1\n"
                               "[rates]\neta = 0.25\nalpha = 0.01\nk_max = 40\noutput = lab.csv\n");
    const LabConfig num = parse_lab_config(numeric);
    CHECK(!num.eta_auto);
    CHECK(num.eta == 0.25);
    CHECK(!num.alpha_auto);
    CHECK(num.alpha == 0.01);
    CHECK(num.k_max == 40);

    std::istringstream wide("[dataset]\nkind = synthetic\nn = 16\nd = 8\n"
                            "[network]\ninput = vector:8\nlayers = dense:8:2\n"
                            "[rates]\noutput = lab.csv\n");
    CHECK_THROWS_WITH_AS(parse_lab_config(wide), doctest::Contains("single-output"), ConfigError);

    std::istringstream bad_c("[dataset]\nkind = synthetic\nn = 16\nd = 8\n"
                             "[network]\ninput = vector:8\nlayers = dense:8:1\n"
                             "[rates]\nassumed_c = 0.9\noutput = lab.csv\n");
    CHECK_THROWS_WITH_AS(parse_lab_config(bad_c),
                         doctest::Contains("rates.assumed_c: must lie in (0, 0.5]"), ConfigError);
}

TEST_CASE("learning rate schedules follow their closed forms") {
    ScheduleConfig constant;
    CHECK(schedule_lr(constant, 0.1, 1) == 0.1);
    CHECK(schedule_lr(constant, 0.1, 100) == 0.1);

    ScheduleConfig halve;
    halve.kind = ScheduleConfig::Kind::HalveEvery;
    halve.halve_every = 2;
    CHECK(schedule_lr(halve, 0.1, 1) == 0.1);
    CHECK(schedule_lr(halve, 0.1, 2) == 0.1);
    CHECK(schedule_lr(halve, 0.1, 3) == 0.05);
    CHECK(schedule_lr(halve, 0.1, 4) == 0.05);
    CHECK(schedule_lr(halve, 0.1, 5) == 0.025);

    ScheduleConfig decay;
    decay.kind = ScheduleConfig::Kind::DecayAt;
    decay.decay_epochs = {3, 5};
    CHECK(schedule_lr(decay, 1.0, 3) == 1.0);
    CHECK(schedule_lr(decay, 1.0, 4) == 0.1);
    CHECK(schedule_lr(decay, 1.0, 5) == 0.1);
    CHECK(schedule_lr(decay, 1.0, 6) == doctest::Approx(0.01).epsilon(1e-12));

    CHECK_THROWS_AS(schedule_lr(constant, 0.1, 0), ContractError);
}

TEST_CASE("sweep grid carries the pinned hyperparameter values") {
    const HyperGrid grid = sweep_grid();
    CHECK(grid.lr == std::vector<double>{0.001, 0.003, 0.01, 0.03, 0.1, 0.3});
    CHECK(grid.weight_decay == std::vector<double>{0.001, 0.003, 0.01, 0.03, 0.1, 0.3});
    CHECK(grid.damping == std::vector<double>{0.001, 0.003, 0.01, 0.03, 0.1, 0.2, 0.3});
    CHECK(grid.momentum == 0.9);
}

// --- training runs and traces ------------------------------------------------------

TEST_CASE("a zero-epoch run emits exactly the initial evaluation row") {
    ExperimentConfig cfg = linear_sgd_config(scratch("zero-epoch.csv"));
    cfg.epochs = 0;
    const RunTrace trace = run_experiment(cfg);
    REQUIRE(trace.rows.size() == 1);
    CHECK(trace.rows[0].epoch == 0);
    CHECK(trace.rows[0].iter == 0);
    CHECK(trace.rows[0].train_loss > 0.0);
    CHECK(trace.rows[0].train_acc == 0.0);

    std::ifstream in(cfg.output);
    REQUIRE(bool(in));
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "epoch,iter,wall_ms,flops,train_loss,train_acc,test_loss,test_acc");
    REQUIRE(std::getline(in, line));
    CHECK(!std::getline(in, line));
}

TEST_CASE("full-batch descent on a noiseless linear target decreases every step") {
    const ExperimentConfig cfg = linear_sgd_config(scratch("descent.csv"));
    const RunTrace trace = run_experiment(cfg);
    // Row layout per epoch at one batch per epoch: iteration row, then the
    // epoch evaluation row. Iteration rows carry the pre-step full-batch loss.
    REQUIRE(trace.rows.size() == 1 + 2 * cfg.epochs);
    std::vector<double> iter_losses;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        const RunTraceRow& row = trace.rows[1 + 2 * e];
        CHECK(row.epoch == e + 1);
        CHECK(row.iter == e + 1);
        iter_losses.push_back(row.train_loss);
    }
    for (std::size_t i = 1; i < iter_losses.size(); ++i) {
        CHECK(iter_losses[i] < iter_losses[i - 1]);
    }
    // The epoch evaluation row matches the next iteration row's pre-step loss
    // up to summation order (evaluation walks samples in stored order, the
    // batch in shuffled order).
    for (std::size_t e = 0; e + 1 < cfg.epochs; ++e) {
        CHECK(trace.rows[2 + 2 * e].train_loss ==
              doctest::Approx(trace.rows[3 + 2 * e].train_loss).epsilon(1e-12));
    }
    // Cumulative columns are monotone.
    for (std::size_t i = 1; i < trace.rows.size(); ++i) {
        CHECK(trace.rows[i].flops >= trace.rows[i - 1].flops);
        CHECK(trace.rows[i].wall_ms >= trace.rows[i - 1].wall_ms);
    }
}

TEST_CASE("identical seeds reproduce every trace column except wall time") {
    ExperimentConfig cfg = linear_sgd_config(scratch("repeat-a.csv"));
    cfg.eval_split = 0.25;
    cfg.epochs = 3;
    cfg.batch = 8;
    const RunTrace a = run_experiment(cfg);
    cfg.output = scratch("repeat-b.csv");
    const RunTrace b = run_experiment(cfg);
    REQUIRE(a.rows.size() == b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CAPTURE(i);
        CHECK(rows_equal_except_wall(a.rows[i], b.rows[i]));
    }
    CHECK(a.final_test_acc == b.final_test_acc);
    CHECK(a.best_test_acc == b.best_test_acc);
}

TEST_CASE("trace serialization round-trips and re-serializes byte identically") {
    ExperimentConfig cfg = linear_sgd_config(scratch("roundtrip.csv"));
    cfg.epochs = 2;
    const RunTrace trace = run_experiment(cfg);

    std::ostringstream out;
    write_run_trace(out, trace);
    const std::string text = out.str();

    std::istringstream in(text);
    const RunTrace back = read_run_trace(in);
    REQUIRE(back.rows.size() == trace.rows.size());
    for (std::size_t i = 0; i < trace.rows.size(); ++i) {
        CAPTURE(i);
        CHECK(rows_equal_except_wall(back.rows[i], trace.rows[i]));
        // wall_ms is written at millisecond precision to three decimals.
        CHECK(std::abs(back.rows[i].wall_ms - trace.rows[i].wall_ms) <= 5.001e-4);
    }
    CHECK(back.final_test_acc == trace.final_test_acc);
    CHECK(back.best_test_acc == trace.best_test_acc);

    std::ostringstream again;
    write_run_trace(again, back);
    CHECK(again.str() == text);
}

TEST_CASE("trace reader rejects malformed input with line numbers") {
    SUBCASE("wrong header") {
        std::istringstream in("epoch,iter\n");
        CHECK_THROWS_WITH_AS(read_run_trace(in), doctest::Contains("line 1: unexpected header"),
                             FormatError);
    }
    SUBCASE("empty stream") {
        std::istringstream in("");
        CHECK_THROWS_WITH_AS(read_run_trace(in), doctest::Contains("line 1: missing header"),
                             FormatError);
    }
    SUBCASE("short row") {
        std::istringstream in("epoch,iter,wall_ms,flops,train_loss,train_acc,test_loss,test_acc\n"
                              "0,0,1.0,100\n");
        CHECK_THROWS_WITH_AS(read_run_trace(in),
                             doctest::Contains("line 2: expected 8 fields, got 4"), FormatError);
    }
    SUBCASE("bad number") {
        std::istringstream in("epoch,iter,wall_ms,flops,train_loss,train_acc,test_loss,test_acc\n"
                              "0,0,1.0,100,oops,0,0,0\n");
        CHECK_THROWS_WITH_AS(read_run_trace(in), doctest::Contains("line 2: bad number 'oops'"),
                             FormatError);
    }
}

TEST_CASE("run errors carry the output path as context") {
    ExperimentConfig cfg = linear_sgd_config(scratch("context.csv"));
    cfg.dataset.kind = DatasetConfig::Kind::Idx;
    cfg.dataset.images = scratch("no-such-images.idx");
    cfg.dataset.labels = scratch("no-such-labels.idx");
    const std::string expected =
        scratch("context.csv") + ": " + scratch("no-such-images.idx") + ": cannot open";
    CHECK_THROWS_WITH_AS(run_experiment(cfg), doctest::Contains(expected.c_str()), FormatError);
}

// --- rates runs --------------------------------------------------------------------

TEST_CASE("a rates run measures bounds, writes its trace, and reads back") {
    LabConfig cfg;
    cfg.dataset.kind = DatasetConfig::Kind::Synthetic;
    cfg.dataset.n = 8;
    cfg.dataset.d = 8;
    cfg.dataset.noise = 0.1;
    cfg.dataset.teacher = {TeacherKind::Linear, 1};
    cfg.dataset.seed = 3;
    cfg.dataset.seed_explicit = true;
    cfg.network.input = InputShape::vector(8);
    cfg.network.layers = {LayerSpec::dense(8, 32), LayerSpec::relu(), LayerSpec::dense(32, 1)};
    cfg.network.loss = LossKind::SquaredError;
    cfg.k_max = 12;
    cfg.output = scratch("rates.csv");
    cfg.seed = 3;

    const RatesOutcome outcome = rates_experiment(cfg);
    CHECK(outcome.lambda0 > 0.0);
    CHECK(outcome.bounds.feasible);
    CHECK(outcome.alpha_used <= outcome.bounds.alpha_max);
    CHECK(outcome.eta_used <= outcome.bounds.eta_max);
    REQUIRE(outcome.ran);
    REQUIRE(outcome.trace.rows.size() == cfg.k_max + 1);
    CHECK(outcome.trace.rows.front().residual_sq > 0.0);

    std::ifstream in(cfg.output);
    REQUIRE(bool(in));
    const ConvergenceTrace back = read_convergence_trace(in);
    REQUIRE(back.rows.size() == outcome.trace.rows.size());
    CHECK(back.rows.back().residual_sq == outcome.trace.rows.back().residual_sq);
    CHECK(back.rows.back().lambda_min.size() == 2);
}

TEST_CASE("convergence trace reader rejects mislabeled columns and flags") {
    SUBCASE("wrong eigenvalue column name") {
        std::istringstream in("k,residual_sq,loss,rate_bound,lambda_min_l2,param_drift,jac_drift,"
                              "a1_flag,a2_flag,lemma2_flag\n");
        CHECK_THROWS_WITH_AS(read_convergence_trace(in),
                             doctest::Contains("line 1: unexpected column 'lambda_min_l2'"),
                             FormatError);
    }
    SUBCASE("non-boolean flag") {
        std::istringstream in("k,residual_sq,loss,rate_bound,lambda_min_l1,param_drift,jac_drift,"
                              "a1_flag,a2_flag,lemma2_flag\n"
                              "0,1.0,0.5,1.0,0.25,0,0,0,2,0\n");
        CHECK_THROWS_WITH_AS(read_convergence_trace(in), doctest::Contains("line 2: bad flag '2'"),
                             FormatError);
    }
}

// --- verification suites -----------------------------------------------------------

TEST_CASE("every verification suite passes and reports deterministically") {
    const VerifyReport all = run_suite("all");
    CHECK(all.all_pass());
    CHECK(all.pass_count() == all.checks.size());

    const char* suites[] = {"factorization", "woodbury",      "jvpvjp", "general",
                            "gradients",     "flops",         "convergence"};
    std::size_t total = 0;
    for (const char* name : suites) {
        const VerifyReport report = run_suite(name);
        CAPTURE(name);
        CHECK(report.all_pass());
        total += report.checks.size();
    }
    CHECK(all.checks.size() == total);

    const VerifyReport again = run_suite("factorization");
    const VerifyReport first = run_suite("factorization");
    REQUIRE(again.checks.size() == first.checks.size());
    for (std::size_t i = 0; i < first.checks.size(); ++i) {
        CHECK(first.checks[i].name == again.checks[i].name);
        CHECK(first.checks[i].measured == again.checks[i].measured);
    }

    CHECK_THROWS_WITH_AS(run_suite("bogus"), doctest::Contains("unknown verify suite 'bogus'"),
                         ConfigError);
}

TEST_CASE("an injected gram corruption fails the named factorization check") {
    struct HookGuard {
        ~HookGuard() { testhook::corrupt_dense_gram.store(false); }
    } guard;
    testhook::corrupt_dense_gram.store(true);
    const VerifyReport report = run_suite("factorization");
    CHECK(!report.all_pass());
    bool found = false;
    for (const VerifyCheck& check : report.checks) {
        if (check.name == "dense-gram-vs-explicit") {
            found = true;
            CHECK(!check.pass);
        }
    }
    CHECK(found);
}

// --- block dumps -------------------------------------------------------------------

TEST_CASE("a dumped dense block factors into the stored covariance pair") {
    ExperimentConfig cfg = linear_sgd_config(scratch("unused.csv"));
    cfg.network.layers = {LayerSpec::dense(8, 4, true), LayerSpec::relu(), LayerSpec::dense(4, 1)};
    cfg.optimizer.method = Method::Tengrad;
    cfg.optimizer.damping = 0.1;
    cfg.batch = 8;

    const std::string path = scratch("block.bin");
    dump_fisher_block(cfg, 0, path);
    const std::vector<std::uint8_t> bytes = read_bytes(path);

    REQUIRE(bytes.size() > 12);
    CHECK(std::memcmp(bytes.data(), "TGRD", 4) == 0);
    CHECK(u32_at(bytes, 4) == 1);
    CHECK(u32_at(bytes, 8) == 3);

    // gram: rank 2, 8 x 8.
    std::size_t off = 12;
    REQUIRE(u32_at(bytes, off) == 2);
    CHECK(u32_at(bytes, off + 4) == 8);
    CHECK(u32_at(bytes, off + 8) == 8);
    const std::size_t gram_off = off + 12;
    off = gram_off + 64 * 8;
    // c1: rank 2, 8 x 8.
    REQUIRE(u32_at(bytes, off) == 2);
    CHECK(u32_at(bytes, off + 4) == 8);
    CHECK(u32_at(bytes, off + 8) == 8);
    const std::size_t c1_off = off + 12;
    off = c1_off + 64 * 8;
    // c2: rank 2, 8 x 8.
    REQUIRE(u32_at(bytes, off) == 2);
    CHECK(u32_at(bytes, off + 4) == 8);
    CHECK(u32_at(bytes, off + 8) == 8);
    const std::size_t c2_off = off + 12;
    REQUIRE(bytes.size() == c2_off + 64 * 8);

    for (std::size_t i = 0; i < 8; ++i) {
        for (std::size_t j = 0; j < 8; ++j) {
            const std::size_t e = (i * 8 + j) * 8;
            const double gram = f64_at(bytes, gram_off + e);
            const double c1 = f64_at(bytes, c1_off + e);
            const double c2 = f64_at(bytes, c2_off + e);
            CHECK(gram == doctest::Approx(c1 * c2).epsilon(1e-12));
            // Symmetry across the diagonal.
            const std::size_t t = (j * 8 + i) * 8;
            CHECK(gram == f64_at(bytes, gram_off + t));
        }
    }

    // Identical config, identical bytes.
    const std::string path2 = scratch("block-2.bin");
    dump_fisher_block(cfg, 0, path2);
    CHECK(read_bytes(path2) == bytes);

    CHECK_THROWS_WITH_AS(dump_fisher_block(cfg, 5, path), doctest::Contains("out of range"),
                         ContractError);
    ExperimentConfig undamped = cfg;
    undamped.optimizer.method = Method::Sgd;
    undamped.optimizer.damping = 0.0;
    CHECK_THROWS_WITH_AS(dump_fisher_block(undamped, 0, path),
                         doctest::Contains("optimizer.damping: must be positive"), ConfigError);
}

TEST_CASE("a blocked conv dump carries placeholder covariance factors") {
    ExperimentConfig cfg;
    cfg.dataset.kind = DatasetConfig::Kind::Synthetic;
    cfg.dataset.n = 16;
    cfg.dataset.d = 36;
    cfg.dataset.teacher = {TeacherKind::Linear, 2};
    cfg.dataset.seed = 9;
    cfg.dataset.seed_explicit = true;
    cfg.network.input = InputShape::image(1, 6, 6);
    cfg.network.layers = {LayerSpec::conv2d(1, 2, 3, 1, 0, true), LayerSpec::relu(),
                          LayerSpec::dense(32, 2)};
    cfg.network.loss = LossKind::SquaredError;
    cfg.optimizer.method = Method::Tengrad;
    cfg.optimizer.lr = 0.1;
    cfg.optimizer.damping = 0.1;
    cfg.epochs = 1;
    cfg.batch = 4;
    cfg.output = scratch("unused-conv.csv");
    cfg.seed = 9;

    const std::string path = scratch("conv-block.bin");
    dump_fisher_block(cfg, 0, path);
    const std::vector<std::uint8_t> bytes = read_bytes(path);
    CHECK(std::memcmp(bytes.data(), "TGRD", 4) == 0);
    CHECK(u32_at(bytes, 8) == 3);
    std::size_t off = 12;
    REQUIRE(u32_at(bytes, off) == 2);
    CHECK(u32_at(bytes, off + 4) == 4);
    CHECK(u32_at(bytes, off + 8) == 4);
    off += 12 + 16 * 8;
    CHECK(u32_at(bytes, off) == 0);  // c1 placeholder
    off += 4;
    CHECK(u32_at(bytes, off) == 0);  // c2 placeholder
    off += 4;
    CHECK(bytes.size() == off);
}
