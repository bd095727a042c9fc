// SPDX-License-Identifier: Apache-2.0
#include "tengrad/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tengrad/errors.hpp"
#include "tengrad/rng.hpp"

namespace tengrad {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path + ": cannot open");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

// Big-endian u32 with bounds checking; the offset names the failing field.
std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& path) {
    if (off + 4 > b.size()) {
        throw FormatError(path + ": truncated at byte " + std::to_string(b.size()) +
                          " (need 4-byte field at byte " + std::to_string(off) + ")");
    }
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
           (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "0x%08x", v);
    return buf;
}

void put_be32(std::ofstream& out, std::uint32_t v) {
    const char bytes[4] = {char((v >> 24) & 0xff), char((v >> 16) & 0xff), char((v >> 8) & 0xff),
                           char(v & 0xff)};
    out.write(bytes, 4);
}

void normalize_rows(Tensor& x) {
    const std::size_t n = x.shape()[0];
    const std::size_t d = x.shape()[1];
    for (std::size_t i = 0; i < n; ++i) {
        double norm = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm += x(i, j) * x(i, j);
        norm = std::sqrt(norm);
        if (norm > 0.0) {
            for (std::size_t j = 0; j < d; ++j) x(i, j) /= norm;
        }
    }
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t limit) {
    const std::vector<std::uint8_t> img = read_file(images_path);
    const std::uint32_t img_magic = be32(img, 0, images_path);
    if (img_magic != 0x00000803u) {
        throw FormatError(images_path + ": bad magic " + hex32(img_magic) +
                          " at byte 0 (want 0x00000803)");
    }
    const std::uint32_t count = be32(img, 4, images_path);
    const std::uint32_t rows = be32(img, 8, images_path);
    const std::uint32_t cols = be32(img, 12, images_path);
    if (rows == 0 || cols == 0) {
        throw FormatError(images_path + ": zero image dimension at byte 8");
    }
    const std::size_t take = (limit > 0 && limit < count) ? limit : count;
    const std::size_t pixel_count = take * std::size_t(rows) * cols;
    if (16 + pixel_count > img.size()) {
        throw FormatError(images_path + ": truncated at byte " + std::to_string(img.size()) +
                          " (need " + std::to_string(16 + pixel_count) + " bytes for " +
                          std::to_string(take) + " images)");
    }

    const std::vector<std::uint8_t> lab = read_file(labels_path);
    const std::uint32_t lab_magic = be32(lab, 0, labels_path);
    if (lab_magic != 0x00000801u) {
        throw FormatError(labels_path + ": bad magic " + hex32(lab_magic) +
                          " at byte 0 (want 0x00000801)");
    }
    const std::uint32_t lab_count = be32(lab, 4, labels_path);
    if (lab_count != count) {
        throw FormatError(labels_path + ": item count " + std::to_string(lab_count) +
                          " at byte 4 does not match image count " + std::to_string(count));
    }
    if (8 + take > lab.size()) {
        throw FormatError(labels_path + ": truncated at byte " + std::to_string(lab.size()) +
                          " (need " + std::to_string(8 + take) + " bytes)");
    }

    Dataset ds;
    const std::size_t d = std::size_t(rows) * cols;
    ds.features = Tensor::zeros({take, d});
    for (std::size_t i = 0; i < take; ++i) {
        for (std::size_t p = 0; p < d; ++p) {
            ds.features(i, p) = double(img[16 + i * d + p]) / 255.0;
        }
    }
    ds.labels.resize(take);
    for (std::size_t i = 0; i < take; ++i) ds.labels[i] = int(lab[8 + i]);
    return ds;
}

Dataset gen_synthetic(std::size_t n, std::size_t d, const TeacherSpec& teacher, double noise,
                      std::uint64_t seed) {
    if (n == 0 || d == 0) throw ContractError("gen_synthetic: n and d must be positive");
    if (teacher.kind != TeacherKind::Identity && teacher.outputs == 0) {
        throw ContractError("gen_synthetic: teacher outputs must be positive");
    }
    Rng rng(seed);
    Dataset ds;
    ds.features = Tensor::zeros({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) ds.features(i, j) = rng.normal();
    }
    normalize_rows(ds.features);

    switch (teacher.kind) {
        case TeacherKind::Identity:
            ds.targets = ds.features;
            break;
        case TeacherKind::Linear: {
            Tensor w = Tensor::zeros({d, teacher.outputs});
            for (std::size_t i = 0; i < d; ++i) {
                for (std::size_t j = 0; j < teacher.outputs; ++j) w(i, j) = rng.normal();
            }
            ds.targets = matmul(ds.features, w);
            break;
        }
        case TeacherKind::Mlp: {
            const std::size_t width = 2 * d;
            Tensor w1 = Tensor::zeros({d, width});
            const double beta1 = std::sqrt(2.0 / double(d));
            for (std::size_t i = 0; i < d; ++i) {
                for (std::size_t j = 0; j < width; ++j) w1(i, j) = beta1 * rng.normal();
            }
            Tensor w2 = Tensor::zeros({width, teacher.outputs});
            const double beta2 = std::sqrt(2.0 / double(width));
            for (std::size_t i = 0; i < width; ++i) {
                for (std::size_t j = 0; j < teacher.outputs; ++j) w2(i, j) = beta2 * rng.normal();
            }
            Tensor h = matmul(ds.features, w1);
            for (std::size_t i = 0; i < h.size(); ++i) {
                if (h.data()[i] < 0.0) h.data()[i] = 0.0;
            }
            ds.targets = matmul(h, w2);
            break;
        }
    }
    if (noise > 0.0) {
        for (std::size_t i = 0; i < ds.targets.size(); ++i) {
            ds.targets.data()[i] += noise * rng.normal();
        }
    }
    return ds;
}

void write_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels,
                      std::size_t count, std::size_t rows, std::size_t cols) {
    if (pixels.size() != count * rows * cols) {
        throw ContractError("write_idx_images: pixel buffer size does not match count*rows*cols");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError(path + ": cannot open for writing");
    put_be32(out, 0x00000803u);
    put_be32(out, std::uint32_t(count));
    put_be32(out, std::uint32_t(rows));
    put_be32(out, std::uint32_t(cols));
    out.write(reinterpret_cast<const char*>(pixels.data()),
              std::streamsize(pixels.size()));
    if (!out) throw FormatError(path + ": write failed");
}

void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError(path + ": cannot open for writing");
    put_be32(out, 0x00000801u);
    put_be32(out, std::uint32_t(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()), std::streamsize(labels.size()));
    if (!out) throw FormatError(path + ": write failed");
}

void gen_synthetic_idx(const std::string& images_path, const std::string& labels_path,
                       std::size_t n, std::size_t rows, std::size_t cols, std::size_t classes,
                       std::uint64_t seed) {
    if (n == 0 || rows == 0 || cols == 0 || classes == 0) {
        throw ContractError("gen_synthetic_idx: all dimensions must be positive");
    }
    Rng rng(seed);
    const std::size_t d = rows * cols;
    // Per-class prototypes with coarse structure: a few random blobs per
    // class keep nearby pixels correlated the way real images are.
    std::vector<std::vector<double>> proto(classes, std::vector<double>(d, 0.0));
    for (std::size_t c = 0; c < classes; ++c) {
        for (int blob = 0; blob < 6; ++blob) {
            const double cy = rng.uniform() * double(rows);
            const double cx = rng.uniform() * double(cols);
            const double amp = 80.0 + 120.0 * rng.uniform();
            const double radius = 2.0 + 4.0 * rng.uniform();
            for (std::size_t y = 0; y < rows; ++y) {
                for (std::size_t x = 0; x < cols; ++x) {
                    const double dy = (double(y) - cy) / radius;
                    const double dx = (double(x) - cx) / radius;
                    proto[c][y * cols + x] += amp * std::exp(-(dy * dy + dx * dx));
                }
            }
        }
        for (double& p : proto[c]) p = std::min(p, 235.0);
    }

    std::vector<std::uint8_t> pixels(n * d);
    std::vector<std::uint8_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = std::size_t(rng.below(classes));
        labels[i] = std::uint8_t(c);
        const double gain = 0.8 + 0.4 * rng.uniform();
        for (std::size_t p = 0; p < d; ++p) {
            const double v = gain * proto[c][p] + 20.0 * rng.normal();
            pixels[i * d + p] = std::uint8_t(std::clamp(v, 0.0, 255.0));
        }
    }
    write_idx_images(images_path, pixels, n, rows, cols);
    write_idx_labels(labels_path, labels);
}

std::pair<std::string, std::string> resolve_image_data() {
    namespace fs = std::filesystem;
    const char* kImages = "train-images-idx3-ubyte";
    const char* kLabels = "train-labels-idx1-ubyte";

    std::vector<fs::path> candidates;
    if (const char* env = std::getenv("TENGRAD_FMNIST_DIR")) {
        candidates.emplace_back(env);
    }
    candidates.emplace_back("data/fashion-mnist");
    for (const fs::path& dir : candidates) {
        const fs::path img = dir / kImages;
        const fs::path lab = dir / kLabels;
        if (fs::exists(img) && fs::exists(lab)) return {img.string(), lab.string()};
    }

    const fs::path dir = "data/synthetic-idx";
    const fs::path img = dir / kImages;
    const fs::path lab = dir / kLabels;
    if (!fs::exists(img) || !fs::exists(lab)) {
        fs::create_directories(dir);
        gen_synthetic_idx(img.string(), lab.string(), 6000, 28, 28, 10, 90210);
    }
    return {img.string(), lab.string()};
}

}  // namespace tengrad
