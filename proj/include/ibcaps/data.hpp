#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ibcaps/rng.hpp"
#include "ibcaps/tensor.hpp"

namespace ibcaps {

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Images at rest are u8, dense, row-major [n, ch, H, W].
struct Dataset {
    std::string name;
    int num_classes = 0;
    int channels = 0, height = 0, width = 0;
    std::vector<std::uint8_t> images;  // n * ch * H * W
    std::vector<std::uint8_t> labels;  // n

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t sample_bytes() const {
        return static_cast<std::int64_t>(channels) * height * width;
    }
    void validate() const;

    // sample i as a real [ch, H, W] tensor in [0, 1] (value / 255)
    Tensor image_real(std::int64_t i) const;
    // first n samples
    Dataset take(std::int64_t n) const;
};

struct IdxData {
    std::vector<int> dims;
    std::vector<std::uint8_t> data;
};

// IDX (MNIST distribution format): big-endian magic 0x803 (rank-3 u8 images)
// or 0x801 (rank-1 u8 labels).
IdxData parse_idx(const std::vector<std::uint8_t>& bytes, const std::string& origin = "idx");
IdxData parse_idx_file(const std::string& path);

// Combines <dir>/{train|t10k}-{images-idx3|labels-idx1}-ubyte.
Dataset load_idx_dataset(const std::string& dir, bool train, const std::string& name,
                         int num_classes = 10);

// CIFAR-10 binary batches: per record 1 label byte + 3072 channel-planar bytes.
Dataset parse_cifar10_binary(const std::vector<std::string>& paths);

// "IBDS" little-endian raw container (pre-converted datasets, e.g. SVHN):
// magic, version u32, n u32, ch u8, H u16, W u16, num_classes u8,
// then n*ch*H*W image bytes, then n label bytes.
Dataset parse_raw_container(const std::string& path);
Dataset parse_raw_container_bytes(const std::vector<std::uint8_t>& bytes,
                                  const std::string& origin = "ibds");
std::vector<std::uint8_t> write_raw_container(const Dataset& ds);
void write_raw_container_file(const Dataset& ds, const std::string& path);

// value / 255 for a whole u8 buffer
Tensor to_unit_interval(const std::vector<std::uint8_t>& bytes, std::vector<int> shape);

// Resolves <data_dir>/<dataset>/... for mnist / fashion (IDX), cifar10
// (binary batches), svhn (IBDS container).
Dataset load_dataset(const std::string& data_dir, const std::string& dataset, bool train);

struct Batch {
    Tensor images;            // [B, ch, H, W] in [0, 1]
    std::vector<int> labels;
    std::vector<std::int64_t> indices;  // dataset indices (corruption streams)
};

// One-epoch batch iterator; a fixed seed gives a reproducible permutation.
class BatchIterator {
public:
    BatchIterator(const Dataset& ds, int batch_size, std::uint64_t shuffle_seed, bool shuffle,
                  bool drop_last);

    bool next(Batch& out);
    void reset();
    int num_batches() const;

private:
    const Dataset& ds_;
    int batch_size_;
    bool drop_last_;
    std::vector<std::int64_t> order_;
    std::int64_t pos_ = 0;
};

std::vector<real> one_hot(const std::vector<int>& labels, int num_classes);

}  // namespace ibcaps
