#pragma once

#include <string>
#include <vector>

#include "ibcaps/trainer.hpp"

namespace ibcaps {

struct BenchResult {
    std::string model;
    std::string phase;  // train_epoch | inference
    int batch_size = 128;
    std::vector<double> raw_seconds;  // one per repeat, timed region only
    double median_s = 0;
    double min_s = 0;
    double stdev_s = 0;
    std::int64_t samples = 0;  // processed per repeat

    double samples_per_s() const { return static_cast<double>(samples) / median_s; }
    double batches_per_s() const {
        return samples_per_s() / static_cast<double>(batch_size);
    }
};

void finalize_stats(BenchResult& r);

// Times full optimization passes (forward + backward + Adam step) over the
// given dataset. One warmup pass runs untimed; repeats >= 3.
BenchResult bench_train_epoch(AnyModel& model, const Dataset& data, int batch_size, int repeats,
                              const LossWeights& w, std::uint64_t seed);

// Times deterministic eval-mode forward passes (mean capsules, no decoder).
BenchResult bench_inference(const AnyModel& model, const Dataset& data, int batch_size,
                            int repeats);

std::string host_fingerprint();

// Appends to benchmarks.csv (header written when the file is new).
void append_bench_csv(const std::string& path, const BenchResult& r);

}  // namespace ibcaps
