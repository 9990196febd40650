// ibcaps: train/evaluate the capsule models and emit report artifacts.
//
// Subcommands: train, eval, sweep, ablate, bench, corrupt, reconstruct,
// convert-check. All output is driven by flags; no interactive prompts.
// Errors exit nonzero with a single "error: ..." line on stderr.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ibcaps/bench.hpp"
#include "ibcaps/blas_env.hpp"
#include "ibcaps/report.hpp"
#include "ibcaps/trainer.hpp"

namespace {

using namespace ibcaps;

std::string default_data_dir() {
    const char* env = std::getenv("IBCAPS_DATA_DIR");
    return env ? std::string(env) : std::string("data");
}

void add_train_flags(CLI::App* app, TrainConfig& cfg, std::string& config_path) {
    app->add_option("--config", config_path, "key=value config file (flags override it)");
    app->add_option("--dataset", cfg.dataset, "mnist | fashion | cifar10 | svhn");
    app->add_option("--model", cfg.model, "capsnet | ibcapsnet");
    app->add_option_function<std::string>(
           "--variant", [&cfg](const std::string& v) { cfg.apply("variant", v); },
           "baseline | multi_classifier | squash_kl | full")
        ->default_str("full");
    app->add_option("--epochs", cfg.epochs);
    app->add_option("--batch-size", cfg.batch_size);
    app->add_option("--lr", cfg.lr);
    app->add_option("--lr-decay", cfg.lr_decay, "per-epoch exponential decay");
    app->add_option("--beta", cfg.beta, "KL weight; negative = per-dataset default");
    app->add_option("--lambda-recon", cfg.lambda_recon, "reconstruction loss weight");
    app->add_option("--seed", cfg.seed);
    app->add_option("--mask-with-truth", cfg.mask_with_truth,
                    "decode the ground-truth capsule during training");
    app->add_option("--train-noise", cfg.train_noise,
                    "optional corruption family \"kind:max_severity:seed\"");
    app->add_option("--subset", cfg.subset, "train on the first N samples (0 = full split)");
    app->add_option("--routing-iters", cfg.routing_iters);
    app->add_option("--data-dir", cfg.data_dir, "dataset root (default $IBCAPS_DATA_DIR)");
    app->add_option("--out-dir", cfg.out_dir, "artifact directory");
    app->add_flag("--resume", cfg.resume, "continue from <run>.last.ckpt if present");
    app->add_option("--stop-at-acc", cfg.stop_at_acc,
                    "stop early once test accuracy reaches this fraction");
}

TrainConfig finalize_train_config(CLI::App* app, TrainConfig& flags, const std::string& config_path) {
    TrainConfig cfg;
    if (!config_path.empty()) cfg = TrainConfig::from_file(config_path);
    // Re-apply any flag the user actually passed on top of the file.
    auto passed = [app](const std::string& name) { return app->count(name) > 0; };
    if (config_path.empty()) {
        cfg = flags;
    } else {
        if (passed("--dataset")) cfg.dataset = flags.dataset;
        if (passed("--model")) cfg.model = flags.model;
        if (passed("--variant")) cfg.variant = flags.variant;
        if (passed("--epochs")) cfg.epochs = flags.epochs;
        if (passed("--batch-size")) cfg.batch_size = flags.batch_size;
        if (passed("--lr")) cfg.lr = flags.lr;
        if (passed("--lr-decay")) cfg.lr_decay = flags.lr_decay;
        if (passed("--beta")) cfg.beta = flags.beta;
        if (passed("--lambda-recon")) cfg.lambda_recon = flags.lambda_recon;
        if (passed("--seed")) cfg.seed = flags.seed;
        if (passed("--mask-with-truth")) cfg.mask_with_truth = flags.mask_with_truth;
        if (passed("--train-noise")) cfg.train_noise = flags.train_noise;
        if (passed("--subset")) cfg.subset = flags.subset;
        if (passed("--routing-iters")) cfg.routing_iters = flags.routing_iters;
        if (passed("--data-dir")) cfg.data_dir = flags.data_dir;
        if (passed("--out-dir")) cfg.out_dir = flags.out_dir;
        if (passed("--resume")) cfg.resume = flags.resume;
        if (passed("--stop-at-acc")) cfg.stop_at_acc = flags.stop_at_acc;
    }
    if (cfg.data_dir.empty()) cfg.data_dir = default_data_dir();
    return cfg;
}

std::string run_name_for(const TrainConfig& cfg) {
    std::string n = cfg.model + "_" + cfg.dataset;
    if (cfg.model == "ibcapsnet" && cfg.variant.name() != "full") n += "_" + cfg.variant.name();
    return n;
}

int cmd_train(const TrainConfig& cfg, const std::string& run_flag) {
    Dataset train_ds = load_dataset(cfg.data_dir, cfg.dataset, /*train=*/true);
    Dataset test_ds = load_dataset(cfg.data_dir, cfg.dataset, /*train=*/false);
    const std::string run = run_flag.empty() ? run_name_for(cfg) : run_flag;
    std::printf("train %s on %s: %lld samples, %d epochs, batch %d\n", cfg.model.c_str(),
                cfg.dataset.c_str(),
                static_cast<long long>(cfg.subset > 0 ? std::min<std::int64_t>(cfg.subset, train_ds.size())
                                                      : train_ds.size()),
                cfg.epochs, cfg.batch_size);
    TrainResult res = train(cfg, train_ds, test_ds, run, [](const EpochMetrics& m) {
        std::printf("epoch %d: loss %.4f (cls %.4f recon %.2f kl %.2f) test_acc %.4f\n", m.epoch,
                    m.loss_total, m.loss_cls, m.loss_recon, m.loss_kl, m.test_acc);
        std::fflush(stdout);
    });
    std::printf("best test_acc %.4f at epoch %d\n", res.best_acc, res.best_epoch);
    std::printf("checkpoints: %s %s\nmetrics: %s\n", res.best_path.c_str(), res.last_path.c_str(),
                res.metrics_path.c_str());
    return 0;
}

AnyModel load_model(const std::string& path) {
    return model_from_checkpoint(load_checkpoint(path));
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& dataset,
             const std::string& corruption, int batch_size) {
    AnyModel model = load_model(ckpt);
    Dataset test_ds = load_dataset(data_dir, dataset, /*train=*/false);
    EvalRecord rec;
    if (corruption.empty() || corruption == "none") {
        rec = evaluate(model, test_ds, nullptr, batch_size);
    } else {
        CorruptionSpec spec = CorruptionSpec::parse(corruption);
        rec = evaluate(model, test_ds, &spec, batch_size);
    }
    std::printf("%s %s %s severity %.2f: accuracy %.4f (%lld/%lld)\n", rec.model.c_str(),
                rec.dataset.c_str(), rec.corruption.c_str(), rec.severity, rec.accuracy,
                static_cast<long long>(rec.n_correct), static_cast<long long>(rec.n_total));
    return 0;
}

int cmd_sweep(const std::vector<std::string>& ckpts, const std::string& data_dir,
              const std::string& dataset, const std::string& kinds_arg,
              std::uint64_t corruption_seed, int batch_size, const std::string& out_dir,
              bool plots) {
    if (ckpts.empty()) throw std::invalid_argument("sweep: at least one --checkpoint required");
    std::vector<AnyModel> models;
    std::vector<const AnyModel*> ptrs;
    std::vector<std::string> names;
    for (const auto& p : ckpts) models.push_back(load_model(p));
    for (const auto& m : models) {
        ptrs.push_back(&m);
        names.push_back(m.kind == "ibcapsnet" ? ("ibcapsnet:" + m.variant.name()) : m.kind);
    }
    std::vector<CorruptionKind> kinds;
    if (kinds_arg == "all") {
        kinds = all_corruption_kinds();
    } else {
        std::string rest = kinds_arg;
        while (!rest.empty()) {
            const auto c = rest.find(',');
            kinds.push_back(corruption_from_name(rest.substr(0, c)));
            rest = c == std::string::npos ? "" : rest.substr(c + 1);
        }
    }
    Dataset test_ds = load_dataset(data_dir, dataset, /*train=*/false);
    std::vector<EvalRecord> records =
        robustness_sweep(ptrs, names, test_ds, kinds, corruption_seed, batch_size);
    std::filesystem::create_directories(out_dir);
    const std::string csv = out_dir + "/sweep_" + dataset + ".csv";
    write_sweep_csv(records, csv);
    std::printf("sweep: %zu records -> %s\n", records.size(), csv.c_str());
    if (plots) emit_sweep_plots(records, out_dir);
    if (names.size() == 2) {
        for (CorruptionKind k : kinds) {
            const double g = average_gain(records, corruption_name(k), names[1], names[0]);
            std::printf("avg gain (%s, %s - %s): %+.2f pts\n", corruption_name(k),
                        names[1].c_str(), names[0].c_str(), 100.0 * g);
        }
    }
    return 0;
}

int cmd_ablate(TrainConfig cfg, double severity) {
    Dataset train_ds = load_dataset(cfg.data_dir, cfg.dataset, /*train=*/true);
    Dataset test_ds = load_dataset(cfg.data_dir, cfg.dataset, /*train=*/false);
    std::vector<AblationRow> rows = ablation_run(cfg, train_ds, test_ds, severity);
    std::printf("variant,clean_acc,noisy_acc\n");
    for (const auto& r : rows)
        std::printf("%s,%.4f,%.4f\n", r.variant.c_str(), r.clean_acc, r.noisy_acc);
    return 0;
}

int cmd_bench(const std::string& data_dir, const std::string& dataset, int batch_size,
              int repeats, std::int64_t samples, int routing_iters, std::uint64_t seed,
              const std::string& out_csv) {
    Dataset train_ds = load_dataset(data_dir, dataset, /*train=*/true).take(samples);
    TrainConfig cfg;
    cfg.dataset = dataset;
    cfg.routing_iters = routing_iters;
    const LossWeights w = cfg.weights();
    std::printf("bench host: %s\n", host_fingerprint().c_str());
    std::printf("capsnet routing iterations: r=%d\n", routing_iters);
    BenchResult results[4];
    {
        AnyModel caps = AnyModel::create("capsnet", cfg.arch(), ModelVariantFlags::full(), seed);
        results[0] = bench_train_epoch(caps, train_ds, batch_size, repeats, w, seed);
        results[1] = bench_inference(caps, train_ds, batch_size, repeats);
    }
    {
        AnyModel ib = AnyModel::create("ibcapsnet", cfg.arch(), ModelVariantFlags::full(), seed);
        results[2] = bench_train_epoch(ib, train_ds, batch_size, repeats, w, seed);
        results[3] = bench_inference(ib, train_ds, batch_size, repeats);
    }
    for (const auto& r : results) {
        std::printf("%s %s: median %.3fs (min %.3f, sd %.3f) = %.1f samples/s\n", r.model.c_str(),
                    r.phase.c_str(), r.median_s, r.min_s, r.stdev_s, r.samples_per_s());
        if (!out_csv.empty()) append_bench_csv(out_csv, r);
    }
    std::printf("train speedup (ibcapsnet / capsnet): %.2fx\n",
                results[0].median_s / results[2].median_s);
    std::printf("inference throughput ratio (ibcapsnet / capsnet): %.2fx\n",
                results[3].samples_per_s() / results[1].samples_per_s());
    return 0;
}

int cmd_corrupt(const std::string& data_dir, const std::string& dataset, const std::string& spec_s,
                std::int64_t index, bool train_split, const std::string& out) {
    CorruptionSpec spec = CorruptionSpec::parse(spec_s);
    Dataset ds = load_dataset(data_dir, dataset, train_split);
    if (index < 0 || index >= ds.size())
        throw std::out_of_range("sample index " + std::to_string(index) + " out of range [0, " +
                                std::to_string(ds.size()) + ")");
    Tensor img = apply_corruption(ds.image_real(index), spec, static_cast<std::uint64_t>(index));
    std::vector<std::uint8_t> px(static_cast<std::size_t>(img.numel()));
    const int ch = img.dim(0), H = img.dim(1), W = img.dim(2);
    // channel-planar -> interleaved
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < ch; ++c)
                px[static_cast<std::size_t>((y * W + x) * ch + c)] = static_cast<std::uint8_t>(
                    std::lround(255.0 * static_cast<double>(img[(c * H + y) * W + x])));
    write_image(out, px, W, H, ch);
    std::printf("corrupt %s sample %lld with %s -> %s\n", dataset.c_str(),
                static_cast<long long>(index), spec.to_string().c_str(), out.c_str());
    return 0;
}

int cmd_reconstruct(const std::string& caps_ckpt, const std::string& ib_ckpt,
                    const std::string& data_dir, const std::string& dataset,
                    std::vector<std::int64_t> samples, double clamped, double blur,
                    double salt_pepper, std::uint64_t seed, const std::string& out) {
    AnyModel caps = load_model(caps_ckpt);
    AnyModel ib = load_model(ib_ckpt);
    Dataset test_ds = load_dataset(data_dir, dataset, /*train=*/false);
    GridSpec spec;
    spec.sample_indices = std::move(samples);
    if (spec.sample_indices.empty()) spec.sample_indices = {0, 1, 2, 3, 4};
    spec.clamped_severity = clamped;
    spec.blur_severity = blur;
    spec.salt_pepper_severity = salt_pepper;
    spec.corruption_seed = seed;
    emit_reconstruction_grid(caps, ib, test_ds, spec, out);
    std::printf("reconstruction grid -> %s (legend: %s.legend.txt)\n", out.c_str(), out.c_str());
    return 0;
}

int cmd_convert_check(const std::string& data_dir, const std::string& dataset) {
    for (bool train : {true, false}) {
        Dataset ds = load_dataset(data_dir, dataset, train);
        ds.validate();
        std::vector<std::int64_t> per_class(static_cast<std::size_t>(ds.num_classes));
        for (std::uint8_t l : ds.labels) ++per_class[l];
        std::printf("%s %s: %lld samples, %dx%dx%d, labels", dataset.c_str(),
                    train ? "train" : "test", static_cast<long long>(ds.size()), ds.channels,
                    ds.height, ds.width);
        for (auto n : per_class) std::printf(" %lld", static_cast<long long>(n));
        std::printf("\n");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    ibcaps::pin_blas_kernels(argv);
    CLI::App app{"IBCapsNet / CapsNet training, robustness, and reporting toolkit"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    const std::string dd = default_data_dir();

    // train
    TrainConfig tcfg;
    std::string tconfig_path, trun;
    CLI::App* train_app = app.add_subcommand("train", "Train a model; writes checkpoints + metrics CSV");
    add_train_flags(train_app, tcfg, tconfig_path);
    train_app->add_option("--run", trun, "run name for emitted files");

    // eval
    std::string e_ckpt, e_dataset = "mnist", e_corruption, e_data_dir = dd;
    int e_batch = 128;
    CLI::App* eval_app = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    eval_app->add_option("--checkpoint", e_ckpt)->required();
    eval_app->add_option("--dataset", e_dataset);
    eval_app->add_option("--data-dir", e_data_dir);
    eval_app->add_option("--corruption", e_corruption, "\"kind:severity:seed\" or none");
    eval_app->add_option("--batch-size", e_batch);

    // sweep
    std::vector<std::string> s_ckpts;
    std::string s_dataset = "mnist", s_kinds = "all", s_out = "reports", s_data_dir = dd;
    std::uint64_t s_seed = 42;
    int s_batch = 128;
    bool s_plots = false;
    CLI::App* sweep_app = app.add_subcommand("sweep", "Robustness sweep over the severity grids");
    sweep_app->add_option("--checkpoint", s_ckpts, "repeatable; order fixes CSV model order")
        ->required();
    sweep_app->add_option("--dataset", s_dataset);
    sweep_app->add_option("--data-dir", s_data_dir);
    sweep_app->add_option("--kinds", s_kinds, "all or comma list of corruption kinds");
    sweep_app->add_option("--corruption-seed", s_seed);
    sweep_app->add_option("--batch-size", s_batch);
    sweep_app->add_option("--out-dir", s_out);
    sweep_app->add_flag("--plots", s_plots, "also emit PNG line plots");

    // ablate
    TrainConfig acfg;
    acfg.dataset = "fashion";
    std::string aconfig_path;
    double a_severity = 0.3;
    CLI::App* ablate_app =
        app.add_subcommand("ablate", "Train and evaluate the four cumulative variants");
    add_train_flags(ablate_app, acfg, aconfig_path);
    ablate_app->add_option("--severity", a_severity, "clamped-additive evaluation severity");

    // bench
    std::string b_dataset = "mnist", b_data_dir = dd, b_csv = "benchmarks.csv";
    int b_batch = 128, b_repeats = 3, b_iters = 3;
    std::int64_t b_samples = 512;
    std::uint64_t b_seed = 1;
    CLI::App* bench_app = app.add_subcommand("bench", "Timing comparison, both models");
    bench_app->add_option("--dataset", b_dataset);
    bench_app->add_option("--data-dir", b_data_dir);
    bench_app->add_option("--batch-size", b_batch);
    bench_app->add_option("--repeats", b_repeats);
    bench_app->add_option("--samples", b_samples, "samples per timed repeat");
    bench_app->add_option("--routing-iters", b_iters);
    bench_app->add_option("--seed", b_seed);
    bench_app->add_option("--csv", b_csv, "append results here (empty = skip)");

    // corrupt
    std::string c_dataset = "mnist", c_spec = "clamped_additive:0.50:42", c_out = "corrupt.png",
                c_data_dir = dd;
    std::int64_t c_index = 0;
    bool c_train = false;
    CLI::App* corrupt_app = app.add_subcommand("corrupt", "Write one corrupted sample as an image");
    corrupt_app->add_option("--dataset", c_dataset);
    corrupt_app->add_option("--data-dir", c_data_dir);
    corrupt_app->add_option("--spec", c_spec, "\"kind:severity:seed\"");
    corrupt_app->add_option("--index", c_index, "sample index");
    corrupt_app->add_flag("--train-split", c_train);
    corrupt_app->add_option("--out", c_out, ".png, .pgm or .ppm");

    // reconstruct
    std::string r_caps, r_ib, r_dataset = "mnist", r_out = "reconstruction_grid.png",
                r_data_dir = dd;
    std::vector<std::int64_t> r_samples;
    double r_clamped = 0.5, r_blur = 1.5, r_sp = 0.3;
    std::uint64_t r_seed = 42;
    CLI::App* recon_app =
        app.add_subcommand("reconstruct", "Side-by-side reconstruction grid for both models");
    recon_app->add_option("--capsnet", r_caps, "CapsNet checkpoint")->required();
    recon_app->add_option("--ibcapsnet", r_ib, "IBCapsNet checkpoint")->required();
    recon_app->add_option("--dataset", r_dataset);
    recon_app->add_option("--data-dir", r_data_dir);
    recon_app->add_option("--samples", r_samples, "test-set sample indices (columns)");
    recon_app->add_option("--clamped-severity", r_clamped);
    recon_app->add_option("--blur-severity", r_blur);
    recon_app->add_option("--salt-pepper-severity", r_sp);
    recon_app->add_option("--corruption-seed", r_seed);
    recon_app->add_option("--out", r_out);

    // convert-check
    std::string v_dataset = "mnist", v_data_dir = dd;
    CLI::App* check_app =
        app.add_subcommand("convert-check", "Parse a dataset and print shape/label stats");
    check_app->add_option("--dataset", v_dataset);
    check_app->add_option("--data-dir", v_data_dir);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "ExtrasError" || e.get_name() == "RequiredError") {
            // unknown / missing subcommand: usage on stderr, exit 2
            std::cerr << app.help() << "\n";
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        }
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (train_app->parsed())
            return cmd_train(finalize_train_config(train_app, tcfg, tconfig_path), trun);
        if (eval_app->parsed()) return cmd_eval(e_ckpt, e_data_dir, e_dataset, e_corruption, e_batch);
        if (sweep_app->parsed())
            return cmd_sweep(s_ckpts, s_data_dir, s_dataset, s_kinds, s_seed, s_batch, s_out,
                             s_plots);
        if (ablate_app->parsed())
            return cmd_ablate(finalize_train_config(ablate_app, acfg, aconfig_path), a_severity);
        if (bench_app->parsed())
            return cmd_bench(b_data_dir, b_dataset, b_batch, b_repeats, b_samples, b_iters, b_seed,
                             b_csv);
        if (corrupt_app->parsed())
            return cmd_corrupt(c_data_dir, c_dataset, c_spec, c_index, c_train, c_out);
        if (recon_app->parsed())
            return cmd_reconstruct(r_caps, r_ib, r_data_dir, r_dataset, r_samples, r_clamped,
                                   r_blur, r_sp, r_seed, r_out);
        if (check_app->parsed()) return cmd_convert_check(v_data_dir, v_dataset);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << app.help() << "\n";
    return 2;
}
