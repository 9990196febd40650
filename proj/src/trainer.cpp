#include "ibcaps/trainer.hpp"

#include <cmath>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace ibcaps {

ArchConfig TrainConfig::arch() const {
    ArchConfig a;
    if (dataset == "mnist" || dataset == "fashion") {
        a = ArchConfig::mnist();
    } else if (dataset == "cifar10") {
        a = ArchConfig::side32(3);
    } else if (dataset == "svhn") {
        a = ArchConfig::side32(3);
    } else {
        throw std::invalid_argument("no architecture for dataset: " + dataset);
    }
    a.routing_iters = routing_iters;
    return a;
}

LossWeights TrainConfig::weights() const {
    LossWeights w;
    w.recon_weight = static_cast<real>(lambda_recon);
    w.kl_weight = static_cast<real>(resolved_beta());
    return w;
}

void TrainConfig::apply(const std::string& key, const std::string& value) {
    if (key == "dataset") dataset = value;
    else if (key == "model") model = value;
    else if (key == "variant") {
        if (value == "baseline") variant = ModelVariantFlags::baseline();
        else if (value == "multi_classifier") variant = ModelVariantFlags::multi();
        else if (value == "squash_kl") variant = ModelVariantFlags::squash_kl();
        else if (value == "full") variant = ModelVariantFlags::full();
        else throw std::invalid_argument("unknown variant: " + value);
    }
    else if (key == "epochs") epochs = std::stoi(value);
    else if (key == "batch_size") batch_size = std::stoi(value);
    else if (key == "lr") lr = std::stod(value);
    else if (key == "lr_decay") lr_decay = std::stod(value);
    else if (key == "beta") beta = std::stod(value);
    else if (key == "lambda_recon") lambda_recon = std::stod(value);
    else if (key == "seed") seed = std::stoull(value);
    else if (key == "mask_with_truth") mask_with_truth = (value == "1" || value == "true");
    else if (key == "train_noise") train_noise = value;
    else if (key == "subset") subset = std::stoll(value);
    else if (key == "routing_iters") routing_iters = std::stoi(value);
    else if (key == "data_dir") data_dir = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "resume") resume = (value == "1" || value == "true");
    else if (key == "stop_at_acc") stop_at_acc = std::stod(value);
    else throw std::invalid_argument("unknown config key: " + key);
}

TrainConfig TrainConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config: " + path);
    TrainConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto h = line.find('#');
        if (h != std::string::npos) line = line.substr(0, h);
        while (!line.empty() && (line.back() == ' ' || line.back() == '\r')) line.pop_back();
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": expected key=value");
        cfg.apply(line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

AnyModel AnyModel::create(const std::string& kind, const ArchConfig& arch,
                          const ModelVariantFlags& variant, std::uint64_t seed) {
    AnyModel m;
    m.kind = kind;
    m.arch = arch;
    m.variant = variant;
    if (kind == "capsnet") m.caps = std::make_unique<CapsNet>(arch, seed);
    else if (kind == "ibcapsnet") m.ib = std::make_unique<IBCapsNet>(arch, variant, seed);
    else throw std::invalid_argument("unknown model kind: " + kind);
    return m;
}

ForwardOut AnyModel::forward(const Var& image, const std::vector<int>* labels, Mode mode,
                             Rng* rng, bool mask_with_truth, bool want_recon) const {
    if (caps) return caps->forward(image, labels, mode, mask_with_truth, want_recon);
    return ib->forward(image, labels, mode, rng, mask_with_truth, want_recon);
}

void model_meta(const AnyModel& m, CheckpointMeta& meta) {
    meta.set("model", m.kind);
    const ArchConfig& a = m.arch;
    meta.set("in_channels", std::to_string(a.in_channels));
    meta.set("image_side", std::to_string(a.image_side));
    meta.set("num_classes", std::to_string(a.num_classes));
    meta.set("num_primary", std::to_string(a.num_primary));
    meta.set("primary_dim", std::to_string(a.primary_dim));
    meta.set("context_dim", std::to_string(a.context_dim));
    meta.set("latent_dim", std::to_string(a.latent_dim));
    meta.set("context_hidden", std::to_string(a.context_hidden));
    meta.set("class_head_hidden", std::to_string(a.class_head_hidden));
    meta.set("routing_iters", std::to_string(a.routing_iters));
    meta.set("caps_out_dim", std::to_string(a.caps_out_dim));
    meta.set("decoder_hidden1", std::to_string(a.decoder_hidden1));
    meta.set("decoder_hidden2", std::to_string(a.decoder_hidden2));
    meta.set("variant_multi", m.variant.multi_classifier ? "1" : "0");
    meta.set("variant_squash_kl", m.variant.squash_and_kl ? "1" : "0");
    meta.set("variant_recon", m.variant.reconstruction ? "1" : "0");
}

std::vector<NamedTensor> model_tensors(const AnyModel& m) {
    std::vector<NamedTensor> out;
    for (const auto& e : m.params().entries) out.push_back({e.name, e.var->val});
    return out;
}

AnyModel model_from_checkpoint(const LoadedCheckpoint& ck) {
    ArchConfig a;
    a.in_channels = static_cast<int>(ck.meta.get_int("in_channels"));
    a.image_side = static_cast<int>(ck.meta.get_int("image_side"));
    a.num_classes = static_cast<int>(ck.meta.get_int("num_classes"));
    a.num_primary = static_cast<int>(ck.meta.get_int("num_primary"));
    a.primary_dim = static_cast<int>(ck.meta.get_int("primary_dim"));
    a.context_dim = static_cast<int>(ck.meta.get_int("context_dim"));
    a.latent_dim = static_cast<int>(ck.meta.get_int("latent_dim"));
    a.context_hidden = static_cast<int>(ck.meta.get_int("context_hidden"));
    a.class_head_hidden = static_cast<int>(ck.meta.get_int("class_head_hidden"));
    a.routing_iters = static_cast<int>(ck.meta.get_int("routing_iters"));
    a.caps_out_dim = static_cast<int>(ck.meta.get_int("caps_out_dim"));
    a.decoder_hidden1 = static_cast<int>(ck.meta.get_int("decoder_hidden1"));
    a.decoder_hidden2 = static_cast<int>(ck.meta.get_int("decoder_hidden2"));
    ModelVariantFlags v;
    v.multi_classifier = ck.meta.get_int("variant_multi") != 0;
    v.squash_and_kl = ck.meta.get_int("variant_squash_kl") != 0;
    v.reconstruction = ck.meta.get_int("variant_recon") != 0;
    AnyModel m = AnyModel::create(ck.meta.get_or("model", "ibcapsnet"), a, v, 0);
    for (auto& e : m.params().entries) {
        const Tensor* t = ck.find(e.name);
        if (!t) throw std::runtime_error("checkpoint missing tensor: " + e.name);
        if (t->shape != e.var->val.shape)
            throw std::runtime_error("checkpoint tensor shape mismatch: " + e.name);
        e.var->val = *t;
    }
    return m;
}

void Adam::init(const ParamStore& ps) {
    t = 0;
    m.clear();
    v.clear();
    for (const auto& e : ps.entries) {
        m.emplace_back(e.var->val.shape);
        v.emplace_back(e.var->val.shape);
    }
}

void Adam::step(ParamStore& ps, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t p = 0; p < ps.entries.size(); ++p) {
        auto& var = *ps.entries[p].var;
        if (var.grad.data.empty()) continue;
        Tensor& mm = m[p];
        Tensor& vv = v[p];
        for (std::int64_t i = 0; i < var.val.numel(); ++i) {
            const real g = var.grad[i];
            mm[i] = static_cast<real>(beta1) * mm[i] + static_cast<real>(1 - beta1) * g;
            vv[i] = static_cast<real>(beta2) * vv[i] + static_cast<real>(1 - beta2) * g * g;
            const double mhat = static_cast<double>(mm[i]) / bc1;
            const double vhat = static_cast<double>(vv[i]) / bc2;
            var.val[i] -= static_cast<real>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

void corrupt_batch(Tensor& images, const std::vector<std::int64_t>& indices,
                   const CorruptionSpec& spec) {
    const int B = images.dim(0);
    const std::int64_t sb = images.numel() / B;
    Tensor one({images.dim(1), images.dim(2), images.dim(3)});
    for (int b = 0; b < B; ++b) {
        std::memcpy(one.ptr(), images.ptr() + b * sb, sizeof(real) * static_cast<std::size_t>(sb));
        Tensor c = apply_corruption(one, spec, static_cast<std::uint64_t>(indices[static_cast<std::size_t>(b)]));
        std::memcpy(images.ptr() + b * sb, c.ptr(), sizeof(real) * static_cast<std::size_t>(sb));
    }
}

namespace {

Tensor flatten_images(const Tensor& images) {
    const int B = images.dim(0);
    Tensor flat({B, static_cast<int>(images.numel() / B)});
    flat.data = images.data;
    return flat;
}

struct NoiseFamily {
    CorruptionKind kind;
    double max_severity;
    std::uint64_t seed;
};

NoiseFamily parse_noise_family(const std::string& text) {
    CorruptionSpec s = CorruptionSpec::parse(text);
    return {s.kind, s.severity, s.seed};
}

void apply_train_noise(Tensor& images, const std::vector<std::int64_t>& indices,
                       const NoiseFamily& fam, int epoch) {
    const int B = images.dim(0);
    const std::int64_t sb = images.numel() / B;
    Tensor one({images.dim(1), images.dim(2), images.dim(3)});
    for (int b = 0; b < B; ++b) {
        const std::uint64_t stream =
            mix_seed(static_cast<std::uint64_t>(epoch) * 0x10001u,
                     static_cast<std::uint64_t>(indices[static_cast<std::size_t>(b)]));
        Rng sev_rng(fam.seed, stream);
        CorruptionSpec spec{fam.kind, sev_rng.uniform(0.0, fam.max_severity),
                            sev_rng.next_u64()};
        std::memcpy(one.ptr(), images.ptr() + b * sb, sizeof(real) * static_cast<std::size_t>(sb));
        Tensor c = apply_corruption(one, spec, 0);
        std::memcpy(images.ptr() + b * sb, c.ptr(), sizeof(real) * static_cast<std::size_t>(sb));
    }
}

void save_run_checkpoint(const std::string& path, const AnyModel& model, const Adam& opt,
                         int next_epoch, double best_acc, int best_epoch,
                         const TrainConfig& cfg) {
    CheckpointMeta meta;
    model_meta(model, meta);
    meta.set("dataset", cfg.dataset);
    meta.set("seed", std::to_string(cfg.seed));
    meta.set("next_epoch", std::to_string(next_epoch));
    meta.set("best_acc", std::to_string(best_acc));
    meta.set("best_epoch", std::to_string(best_epoch));
    meta.set("adam_t", std::to_string(opt.t));
    std::vector<NamedTensor> tensors = model_tensors(model);
    for (std::size_t p = 0; p < opt.m.size(); ++p) {
        tensors.push_back({"opt.m." + model.params().entries[p].name, opt.m[p]});
        tensors.push_back({"opt.v." + model.params().entries[p].name, opt.v[p]});
    }
    save_checkpoint(path, meta, tensors);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& train_ds, const Dataset& test_ds,
                  const std::string& run_name,
                  const std::function<void(const EpochMetrics&)>& on_epoch) {
    std::filesystem::create_directories(cfg.out_dir);
    TrainResult res;
    res.best_path = cfg.out_dir + "/" + run_name + ".best.ckpt";
    res.last_path = cfg.out_dir + "/" + run_name + ".last.ckpt";
    res.metrics_path = cfg.out_dir + "/" + run_name + ".metrics.csv";

    const Dataset& full = train_ds;
    Dataset sub;
    const Dataset* tr = &full;
    if (cfg.subset > 0 && cfg.subset < full.size()) {
        sub = full.take(cfg.subset);
        tr = &sub;
    }

    AnyModel model = AnyModel::create(cfg.model, cfg.arch(), cfg.variant, cfg.seed);
    Adam opt;
    opt.init(model.params());
    int start_epoch = 0;
    double best_acc = 0;
    int best_epoch = -1;

    if (cfg.resume && std::filesystem::exists(res.last_path)) {
        LoadedCheckpoint ck = load_checkpoint(res.last_path);
        model = model_from_checkpoint(ck);
        opt.init(model.params());
        opt.t = ck.meta.get_int("adam_t");
        for (std::size_t p = 0; p < model.params().entries.size(); ++p) {
            const std::string& n = model.params().entries[p].name;
            const Tensor* m = ck.find("opt.m." + n);
            const Tensor* v = ck.find("opt.v." + n);
            if (!m || !v) throw std::runtime_error("resume: optimizer state missing for " + n);
            opt.m[p] = *m;
            opt.v[p] = *v;
        }
        start_epoch = static_cast<int>(ck.meta.get_int("next_epoch"));
        best_acc = ck.meta.get_double("best_acc");
        best_epoch = static_cast<int>(ck.meta.get_int("best_epoch"));
    }

    std::ofstream metrics(res.metrics_path,
                          start_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (start_epoch == 0) metrics << "epoch,loss_total,loss_cls,loss_recon,loss_kl,test_acc\n";

    const LossWeights w = cfg.weights();
    const MarginLossConfig mcfg;
    std::optional<NoiseFamily> noise;
    if (!cfg.train_noise.empty()) noise = parse_noise_family(cfg.train_noise);

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch));
        BatchIterator it(*tr, cfg.batch_size, mix_seed(cfg.seed, 0xe90c0 + static_cast<std::uint64_t>(epoch)),
                         /*shuffle=*/true, /*drop_last=*/false);
        Batch batch;
        double sum_total = 0, sum_cls = 0, sum_recon = 0, sum_kl = 0;
        std::int64_t batches = 0;
        while (it.next(batch)) {
            if (noise) apply_train_noise(batch.images, batch.indices, *noise, epoch);
            Rng eps_rng(cfg.seed, mix_seed(0xeb5, static_cast<std::uint64_t>(epoch) * 1000003u +
                                                      static_cast<std::uint64_t>(batches)));
            model.params().zero_grads();
            Var img = constant(batch.images);
            ForwardOut fw = model.forward(img, &batch.labels, Mode::Train, &eps_rng,
                                          cfg.mask_with_truth);
            LossOut loss = composite_loss(fw, flatten_images(batch.images), batch.labels, w, mcfg);
            const double total = static_cast<double>(loss.total->val[0]);
            if (!std::isfinite(total))
                throw TrainDivergence("training diverged: non-finite loss at epoch " +
                                      std::to_string(epoch) + ", batch " +
                                      std::to_string(batches) + " (cls=" + std::to_string(loss.cls) +
                                      ", recon=" + std::to_string(loss.recon) +
                                      ", kl=" + std::to_string(loss.kl) + ")");
            backward(loss.total);
            opt.step(model.params(), lr);
            sum_total += total;
            sum_cls += loss.cls;
            sum_recon += loss.recon;
            sum_kl += loss.kl;
            ++batches;
        }

        EvalRecord ev = evaluate(model, test_ds, nullptr, cfg.batch_size);
        EpochMetrics em;
        em.epoch = epoch;
        em.loss_total = sum_total / static_cast<double>(batches);
        em.loss_cls = sum_cls / static_cast<double>(batches);
        em.loss_recon = sum_recon / static_cast<double>(batches);
        em.loss_kl = sum_kl / static_cast<double>(batches);
        em.test_acc = ev.accuracy;
        res.metrics.push_back(em);
        char row[256];
        std::snprintf(row, sizeof row, "%d,%.6f,%.6f,%.6f,%.6f,%.6f\n", em.epoch, em.loss_total,
                      em.loss_cls, em.loss_recon, em.loss_kl, em.test_acc);
        metrics << row;
        metrics.flush();
        if (on_epoch) on_epoch(em);

        if (ev.accuracy > best_acc || best_epoch < 0) {
            best_acc = ev.accuracy;
            best_epoch = epoch;
            save_run_checkpoint(res.best_path, model, opt, epoch + 1, best_acc, best_epoch, cfg);
        }
        save_run_checkpoint(res.last_path, model, opt, epoch + 1, best_acc, best_epoch, cfg);
        if (cfg.stop_at_acc > 0 && best_acc >= cfg.stop_at_acc) break;
    }
    res.best_acc = best_acc;
    res.best_epoch = best_epoch;
    return res;
}

EvalRecord evaluate(const AnyModel& model, const Dataset& test_ds, const CorruptionSpec* spec,
                    int batch_size) {
    NoGradGuard ng;
    EvalRecord rec;
    rec.model = model.kind == "ibcapsnet" ? ("ibcapsnet:" + model.variant.name()) : model.kind;
    rec.dataset = test_ds.name;
    if (spec) {
        rec.corruption = corruption_name(spec->kind);
        rec.severity = spec->severity;
    }
    BatchIterator it(test_ds, batch_size, 0, /*shuffle=*/false, /*drop_last=*/false);
    Batch batch;
    while (it.next(batch)) {
        if (spec) corrupt_batch(batch.images, batch.indices, *spec);
        Var img = constant(batch.images);
        ForwardOut fw = model.forward(img, nullptr, Mode::Eval, nullptr, false,
                                      /*want_recon=*/false);
        const Tensor& a = fw.activities->val;
        const int B = a.dim(0), C = a.dim(1);
        for (int b = 0; b < B; ++b) {
            int best = 0;
            for (int c = 1; c < C; ++c)
                if (a[static_cast<std::int64_t>(b) * C + c] >
                    a[static_cast<std::int64_t>(b) * C + best])
                    best = c;
            rec.n_correct += (best == batch.labels[static_cast<std::size_t>(b)]);
        }
        rec.n_total += B;
    }
    rec.accuracy = static_cast<double>(rec.n_correct) / static_cast<double>(rec.n_total);
    return rec;
}

std::vector<EvalRecord> robustness_sweep(const std::vector<const AnyModel*>& models,
                                         const std::vector<std::string>& model_names,
                                         const Dataset& test_ds,
                                         const std::vector<CorruptionKind>& kinds,
                                         std::uint64_t corruption_seed, int batch_size) {
    std::vector<EvalRecord> out;
    for (std::size_t m = 0; m < models.size(); ++m)
        for (CorruptionKind kind : kinds)
            for (double sev : severity_grid(kind)) {
                CorruptionSpec spec{kind, sev, corruption_seed};
                EvalRecord rec = evaluate(*models[m], test_ds, &spec, batch_size);
                rec.model = model_names[m];
                out.push_back(rec);
            }
    return out;
}

double average_gain(const std::vector<EvalRecord>& records, const std::string& kind,
                    const std::string& model_plus, const std::string& model_minus) {
    double gain = 0;
    int n = 0;
    for (const auto& r : records) {
        if (r.corruption != kind || r.severity == 0.0 || r.model != model_plus) continue;
        for (const auto& q : records)
            if (q.corruption == kind && q.severity == r.severity && q.model == model_minus &&
                q.dataset == r.dataset) {
                gain += r.accuracy - q.accuracy;
                ++n;
            }
    }
    if (n == 0) throw std::invalid_argument("average_gain: no matching record pairs");
    return gain / n;
}

std::vector<AblationRow> ablation_run(const TrainConfig& base, const Dataset& train_ds,
                                      const Dataset& test_ds, double noise_severity) {
    const ModelVariantFlags variants[4] = {
        ModelVariantFlags::baseline(), ModelVariantFlags::multi(),
        ModelVariantFlags::squash_kl(), ModelVariantFlags::full()};
    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        TrainConfig cfg = base;
        cfg.model = "ibcapsnet";
        cfg.variant = v;
        const std::string run = "ablate_" + cfg.dataset + "_" + v.name();
        const std::string best = cfg.out_dir + "/" + run + ".best.ckpt";
        AnyModel model = [&] {
            if (std::filesystem::exists(best)) return model_from_checkpoint(load_checkpoint(best));
            train(cfg, train_ds, test_ds, run);
            return model_from_checkpoint(load_checkpoint(best));
        }();
        AblationRow row;
        row.variant = v.name();
        row.clean_acc = evaluate(model, test_ds, nullptr).accuracy;
        CorruptionSpec spec{CorruptionKind::ClampedAdditive, noise_severity, 42};
        row.noisy_acc = evaluate(model, test_ds, &spec).accuracy;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace ibcaps
