#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ibcaps/checkpoint.hpp"
#include "ibcaps/corruption.hpp"
#include "ibcaps/data.hpp"
#include "ibcaps/model.hpp"

namespace ibcaps {

struct TrainDivergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    std::string dataset = "mnist";
    std::string model = "ibcapsnet";  // capsnet | ibcapsnet
    ModelVariantFlags variant = ModelVariantFlags::full();
    int epochs = 30;
    int batch_size = 128;
    double lr = 1e-3;
    double lr_decay = 0.96;      // per epoch, exponential
    double beta = -1.0;          // < 0: per-dataset default
    double lambda_recon = 5e-4;
    std::uint64_t seed = 1;
    bool mask_with_truth = true;
    std::string train_noise;     // optional family "kind:max_severity:seed"
    std::int64_t subset = 0;     // 0 = full train split
    int routing_iters = 3;
    std::string data_dir;
    std::string out_dir = ".";
    bool resume = false;
    double stop_at_acc = -1.0;   // > 0: stop once test accuracy reaches this

    double resolved_beta() const {
        if (beta >= 0) return beta;
        return (dataset == "svhn" || dataset == "cifar10") ? 1e-2 : 1e-3;
    }
    ArchConfig arch() const;
    LossWeights weights() const;

    void apply(const std::string& key, const std::string& value);
    static TrainConfig from_file(const std::string& path);
};

struct EvalRecord {
    std::string model;
    std::string dataset;
    std::string corruption = "none";
    double severity = 0.0;
    double accuracy = 0.0;
    std::int64_t n_correct = 0;
    std::int64_t n_total = 0;
};

// Owns either baseline CapsNet or IBCapsNet behind one forward surface.
struct AnyModel {
    std::string kind;
    ArchConfig arch;
    ModelVariantFlags variant;  // ibcapsnet only
    std::unique_ptr<CapsNet> caps;
    std::unique_ptr<IBCapsNet> ib;

    static AnyModel create(const std::string& kind, const ArchConfig& arch,
                           const ModelVariantFlags& variant, std::uint64_t seed);

    ParamStore& params() { return caps ? caps->params : ib->params; }
    const ParamStore& params() const { return caps ? caps->params : ib->params; }
    bool has_reconstruction() const { return caps != nullptr || variant.reconstruction; }

    ForwardOut forward(const Var& image, const std::vector<int>* labels, Mode mode, Rng* rng,
                       bool mask_with_truth = true, bool want_recon = true) const;
};

// Model <-> IBCP container. Extra meta entries (optimizer counters, rng
// state) ride alongside the config block; optimizer moments are stored as
// "opt.m."/"opt.v."-prefixed tensors.
void model_meta(const AnyModel& m, CheckpointMeta& meta);
std::vector<NamedTensor> model_tensors(const AnyModel& m);
AnyModel model_from_checkpoint(const LoadedCheckpoint& ck);

struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long long t = 0;
    std::vector<Tensor> m, v;

    void init(const ParamStore& ps);
    void step(ParamStore& ps, double lr);
};

struct EpochMetrics {
    int epoch = 0;
    double loss_total = 0, loss_cls = 0, loss_recon = 0, loss_kl = 0;
    double test_acc = 0;
};

struct TrainResult {
    std::string best_path, last_path, metrics_path;
    double best_acc = 0;
    int best_epoch = -1;
    std::vector<EpochMetrics> metrics;
};

// Full training loop with per-epoch evaluation, metrics CSV, best ("peak test
// accuracy") and last checkpoints. run_name names the emitted files.
TrainResult train(const TrainConfig& cfg, const Dataset& train_ds, const Dataset& test_ds,
                  const std::string& run_name,
                  const std::function<void(const EpochMetrics&)>& on_epoch = {});

// Deterministic full-split evaluation; spec == nullptr means clean.
EvalRecord evaluate(const AnyModel& model, const Dataset& test_ds, const CorruptionSpec* spec,
                    int batch_size = 128);

// Applies spec to every sample of a [B, ch, H, W] batch in place, using
// per-sample streams keyed by dataset indices.
void corrupt_batch(Tensor& images, const std::vector<std::int64_t>& indices,
                   const CorruptionSpec& spec);

// One record per (model, kind, grid severity).
std::vector<EvalRecord> robustness_sweep(const std::vector<const AnyModel*>& models,
                                         const std::vector<std::string>& model_names,
                                         const Dataset& test_ds,
                                         const std::vector<CorruptionKind>& kinds,
                                         std::uint64_t corruption_seed, int batch_size = 128);

// Mean over the severity grid (excluding severity 0) of per-severity accuracy
// differences between two named models, per kind.
double average_gain(const std::vector<EvalRecord>& records, const std::string& kind,
                    const std::string& model_plus, const std::string& model_minus);

struct AblationRow {
    std::string variant;
    double clean_acc = 0;
    double noisy_acc = 0;  // clamped additive, sigma = 0.3 by default
};

// Trains (or reuses cached checkpoints of) the four Table-IV variants and
// evaluates them clean and under clamped additive noise.
std::vector<AblationRow> ablation_run(const TrainConfig& base, const Dataset& train_ds,
                                      const Dataset& test_ds, double noise_severity = 0.3);

}  // namespace ibcaps
