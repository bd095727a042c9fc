// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tengrad/tensor.hpp"

// ---------------------------------------------------------------------------
// Dataset ingestion: the IDX binary container for image/label pairs, and a
// seeded synthetic generator whose sample rows are unit-normalized.
//
// A Dataset carries samples as rows of `features` (n x d). Classification
// sets fill `labels`, regression sets fill `targets` (n x k); exactly one of
// the two is populated. Training code transposes row slices into the
// (features x m) column batches the network consumes.
// ---------------------------------------------------------------------------

namespace tengrad {

struct Dataset {
    Tensor features;           // n x d, one sample per row
    Tensor targets;            // n x k regression targets; empty tensor otherwise
    std::vector<int> labels;   // class labels; empty for regression

    bool classification() const { return !labels.empty(); }
    std::size_t size() const { return features.shape().empty() ? 0 : features.shape()[0]; }
    std::size_t dim() const { return features.shape().size() < 2 ? 0 : features.shape()[1]; }
};

// Reads an IDX image file (big-endian magic 0x00000803, then count, rows,
// cols, then unsigned-byte pixels) and its label twin (magic 0x00000801).
// Pixels land in [0, 1] via division by 255. `limit` > 0 reads only the
// first `limit` items. FormatError messages carry the byte offset of the
// first bad field.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 std::size_t limit = 0);

// Synthetic regression targets come from a fixed random teacher applied to
// the (already normalized) inputs.
enum class TeacherKind {
    Identity,  // y = x, k = d
    Linear,    // y = x W, W drawn once from the seed
    Mlp,       // one rectified hidden layer of width 2d
};

struct TeacherSpec {
    TeacherKind kind = TeacherKind::Linear;
    std::size_t outputs = 1;  // ignored for Identity
};

// n x d inputs with i.i.d. normal entries, each row scaled to unit length,
// targets = teacher(X) + noise * N(0, 1). Identical seeds give identical
// datasets bit for bit.
Dataset gen_synthetic(std::size_t n, std::size_t d, const TeacherSpec& teacher, double noise,
                      std::uint64_t seed);

// IDX writers, byte-exact inverses of load_idx's reader.
void write_idx_images(const std::string& path, const std::vector<std::uint8_t>& pixels,
                      std::size_t count, std::size_t rows, std::size_t cols);
void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

// Writes a seeded stand-in classification set in IDX form: per-class pixel
// prototypes plus noise, so any sane model can separate the classes. Used
// when no real image data is on disk.
void gen_synthetic_idx(const std::string& images_path, const std::string& labels_path,
                       std::size_t n, std::size_t rows, std::size_t cols, std::size_t classes,
                       std::uint64_t seed);

// Locates a training image/label pair: $TENGRAD_FMNIST_DIR first, then
// ./data/fashion-mnist/, else writes the synthetic stand-in under
// ./data/synthetic-idx/ (once; reruns reuse the files) and returns that.
std::pair<std::string, std::string> resolve_image_data();

}  // namespace tengrad
