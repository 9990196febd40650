#include "ibcaps/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

namespace ibcaps {

namespace {

double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

}  // namespace

void finalize_stats(BenchResult& r) {
    std::vector<double> s = r.raw_seconds;
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();
    r.min_s = s.front();
    r.median_s = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
    double mean = 0;
    for (double v : s) mean += v;
    mean /= static_cast<double>(n);
    double var = 0;
    for (double v : s) var += (v - mean) * (v - mean);
    r.stdev_s = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
}

BenchResult bench_train_epoch(AnyModel& model, const Dataset& data, int batch_size, int repeats,
                              const LossWeights& w, std::uint64_t seed) {
    if (repeats < 3) repeats = 3;
    BenchResult res;
    res.model = model.kind;
    res.phase = "train_epoch";
    res.batch_size = batch_size;
    const MarginLossConfig mcfg;
    Adam opt;
    opt.init(model.params());

    // Batches are materialized up front so dataset parsing/normalization and
    // shuffling stay outside the timed region.
    std::vector<Batch> batches;
    {
        BatchIterator it(data, batch_size, seed, true, false);
        Batch b;
        while (it.next(b)) batches.push_back(b);
    }
    res.samples = data.size();

    auto run_pass = [&](int pass) {
        std::int64_t bi = 0;
        for (Batch& batch : batches) {
            Rng eps_rng(seed, mix_seed(0xbe7c, static_cast<std::uint64_t>(pass) * 100003u +
                                                   static_cast<std::uint64_t>(bi++)));
            model.params().zero_grads();
            Var img = constant(batch.images);
            Tensor flat({batch.images.dim(0),
                         static_cast<int>(batch.images.numel() / batch.images.dim(0))});
            flat.data = batch.images.data;
            ForwardOut fw = model.forward(img, &batch.labels, Mode::Train, &eps_rng, true);
            LossOut loss = composite_loss(fw, flat, batch.labels, w, mcfg);
            backward(loss.total);
            opt.step(model.params(), 1e-3);
        }
    };

    run_pass(-1);  // warmup, untimed
    for (int r = 0; r < repeats; ++r) {
        const double t0 = now_s();
        run_pass(r);
        res.raw_seconds.push_back(now_s() - t0);
    }
    finalize_stats(res);
    return res;
}

BenchResult bench_inference(const AnyModel& model, const Dataset& data, int batch_size,
                            int repeats) {
    if (repeats < 3) repeats = 3;
    BenchResult res;
    res.model = model.kind;
    res.phase = "inference";
    res.batch_size = batch_size;
    NoGradGuard ng;

    std::vector<Batch> batches;
    {
        BatchIterator it(data, batch_size, 0, false, /*drop_last=*/true);
        Batch b;
        while (it.next(b)) batches.push_back(b);
    }
    res.samples = static_cast<std::int64_t>(batches.size()) * batch_size;

    auto run_pass = [&] {
        for (const Batch& batch : batches) {
            Var img = constant(batch.images);
            ForwardOut fw =
                model.forward(img, nullptr, Mode::Eval, nullptr, false, /*want_recon=*/false);
            (void)fw;
        }
    };

    run_pass();  // warmup
    for (int r = 0; r < repeats; ++r) {
        const double t0 = now_s();
        run_pass();
        res.raw_seconds.push_back(now_s() - t0);
    }
    finalize_stats(res);
    return res;
}

std::string host_fingerprint() {
    std::string flags =
#if defined(__AVX2__)
        "avx2";
#else
        "generic";
#endif
    return std::to_string(std::thread::hardware_concurrency()) + "core-" + flags +
#ifdef NDEBUG
           "-release";
#else
           "-debug";
#endif
}

void append_bench_csv(const std::string& path, const BenchResult& r) {
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream f(path, std::ios::app);
    if (!f) throw std::runtime_error("cannot open " + path);
    if (fresh) f << "model,phase,batch,median_s,stdev_s,min_s,samples_per_s,repeats,host\n";
    char row[256];
    std::snprintf(row, sizeof row, "%s,%s,%d,%.6f,%.6f,%.6f,%.3f,%d,%s\n", r.model.c_str(),
                  r.phase.c_str(), r.batch_size, r.median_s, r.stdev_s, r.min_s,
                  r.samples_per_s(), static_cast<int>(r.raw_seconds.size()),
                  host_fingerprint().c_str());
    f << row;
}

}  // namespace ibcaps
