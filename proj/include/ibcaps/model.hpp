#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ibcaps/nn.hpp"

namespace ibcaps {

struct ArchConfig {
    int in_channels = 1;
    int image_side = 28;
    int num_classes = 10;      // C
    int num_primary = 1152;    // N (derived from geometry; validated)
    int primary_dim = 8;       // d
    int context_dim = 256;     // m
    int latent_dim = 16;       // k
    int context_hidden = 512;
    int class_head_hidden = 128;  // 0 = single linear head
    int routing_iters = 3;        // baseline only
    int caps_out_dim = 16;        // baseline digit-capsule dim
    int decoder_hidden1 = 512;
    int decoder_hidden2 = 1024;

    int pixels() const { return in_channels * image_side * image_side; }
    // 9x9 conv stride 1, then 9x9 conv stride 2, 256/d capsule blocks of size d
    int primary_grid() const { return (image_side - 9 + 1 - 9) / 2 + 1; }
    int derived_num_primary() const {
        return (256 / primary_dim) * primary_grid() * primary_grid();
    }
    // Images smaller than two 9x9 convs admit no stem; such configs are only
    // usable through the forward_from_primary bypass (tiny gradient-check models).
    bool has_stem() const { return image_side >= 17; }

    void validate() const {
        if (num_classes < 2 || num_primary < 1 || primary_dim < 1 || context_dim < 1 ||
            latent_dim < 1 || routing_iters < 1)
            throw std::invalid_argument("ArchConfig: invariant violated");
        if (has_stem() && derived_num_primary() != num_primary)
            throw std::invalid_argument(
                "ArchConfig: geometry-derived primary capsule count " +
                std::to_string(derived_num_primary()) + " != configured " +
                std::to_string(num_primary));
    }

    static ArchConfig mnist() { return ArchConfig{}; }
    static ArchConfig side32(int channels) {
        ArchConfig c;
        c.in_channels = channels;
        c.image_side = 32;
        c.num_primary = 2048;
        return c;
    }
};

struct MarginLossConfig {
    real m_plus = real(0.9);
    real m_minus = real(0.1);
    real lambda_neg = real(0.5);
};

struct LossWeights {
    real recon_weight = real(0.0005);  // lambda
    real kl_weight = real(1e-3);       // beta
};

// Table-IV variant flags; cumulative.
struct ModelVariantFlags {
    bool multi_classifier = true;
    bool squash_and_kl = true;
    bool reconstruction = true;

    void validate() const {
        if (squash_and_kl && !multi_classifier)
            throw std::invalid_argument("variant: squash_and_kl requires multi_classifier");
        if (reconstruction && !squash_and_kl)
            throw std::invalid_argument("variant: reconstruction requires squash_and_kl");
    }
    static ModelVariantFlags full() { return {true, true, true}; }
    static ModelVariantFlags baseline() { return {false, false, false}; }
    static ModelVariantFlags multi() { return {true, false, false}; }
    static ModelVariantFlags squash_kl() { return {true, true, false}; }

    std::string name() const {
        if (!multi_classifier) return "baseline";
        if (!squash_and_kl) return "multi_classifier";
        if (!reconstruction) return "squash_kl";
        return "full";
    }
};

enum class Mode { Train, Eval };

struct ForwardOut {
    Var activities;            // [B, C]
    Var recon;                 // [B, pixels] or null
    Var post_mu, post_logvar;  // [B, C, k] or null (IBCapsNet variants with KL)
    Var latent;                // [B, C, k] latent capsules (IBCapsNet) or class capsules (CapsNet)
    std::vector<int> selected; // per-sample class used for decoding
};

struct LossOut {
    Var total;
    double cls = 0, recon = 0, kl = 0;
};

// eval: argmax activity (ties -> lowest index); train: ground truth when
// mask_with_truth is set and labels are present.
std::vector<int> select_indices(const Tensor& activities, const std::vector<int>* labels,
                                Mode mode, bool mask_with_truth);

// Shared conv stem: 9x9x256 stride 1 + ReLU, 9x9x256 stride 2, squash.
struct ConvStem {
    Conv2d conv1, conv2;
    int primary_dim = 8;
    int expected_n = 1152;

    ConvStem() = default;
    ConvStem(ParamStore& ps, const ArchConfig& cfg, Rng& rng)
        : conv1(ps, "stem.conv1", cfg.in_channels, 256, 9, 1, rng),
          conv2(ps, "stem.conv2", 256, 256, 9, 2, rng),
          primary_dim(cfg.primary_dim),
          expected_n(cfg.num_primary) {}

    // image [B, ch, H, W] -> PrimaryCapsules [B, N, d], squashed
    Var forward(const Var& image) const {
        Var y = conv2.forward(relu(conv1.forward(image)));
        Var u = primary_reshape(y, primary_dim);
        if (u->val.dim(1) != expected_n)
            throw std::invalid_argument("primary capsules: geometry-derived N " +
                                        std::to_string(u->val.dim(1)) + " != configured " +
                                        std::to_string(expected_n));
        return squash_lastdim(u);
    }
};

struct Decoder {
    Linear fc1, fc2, fc3;
    Decoder() = default;
    Decoder(ParamStore& ps, const std::string& name, int in_dim, const ArchConfig& cfg, Rng& rng)
        : fc1(ps, name + ".fc1", in_dim, cfg.decoder_hidden1, rng),
          fc2(ps, name + ".fc2", cfg.decoder_hidden1, cfg.decoder_hidden2, rng),
          fc3(ps, name + ".fc3", cfg.decoder_hidden2, cfg.pixels(), rng) {}
    Var forward(const Var& z) const { return sigmoid(fc3.forward(relu(fc2.forward(relu(fc1.forward(z)))))); }
};

// Dynamic-routing baseline (Sabour et al. architecture).
struct CapsNet {
    ArchConfig cfg;
    ParamStore params;
    ConvStem stem;
    Var route_w;  // [N, d, C*out]
    Decoder decoder;

    CapsNet(const ArchConfig& cfg_, std::uint64_t seed);

    // labels: required when mode == Train and mask_with_truth
    ForwardOut forward(const Var& image, const std::vector<int>* labels, Mode mode,
                       bool mask_with_truth = true, bool want_recon = true) const;

    // stem bypass for small-scale checks: u_raw [B, N, d] (pre-squash)
    ForwardOut forward_from_primary(const Var& u_raw, const std::vector<int>* labels, Mode mode,
                                    bool mask_with_truth = true, bool want_recon = true) const;

private:
    ForwardOut forward_caps(const Var& u, const std::vector<int>* labels, Mode mode,
                            bool mask_with_truth, bool want_recon) const;
};

// One-pass variational aggregation model.
struct IBCapsNet {
    ArchConfig cfg;
    ModelVariantFlags variant;
    ParamStore params;
    ConvStem stem;
    Linear ctx1, ctx2;                  // context encoder
    std::vector<Linear> head_hidden;    // per class
    std::vector<Linear> head_out;       // per class, width 2k (or k without KL)
    Linear baseline_cls;                // baseline variant only
    Decoder decoder;

    IBCapsNet(const ArchConfig& cfg_, ModelVariantFlags variant_, std::uint64_t seed);

    // rng supplies the reparameterization noise; required in Train mode for
    // squash_and_kl variants. Eval mode is deterministic (mean capsules).
    ForwardOut forward(const Var& image, const std::vector<int>* labels, Mode mode, Rng* rng,
                       bool mask_with_truth = true, bool want_recon = true) const;

    // stem bypass for small-scale checks: u_raw [B, N, d] (pre-squash)
    ForwardOut forward_from_primary(const Var& u_raw, const std::vector<int>* labels, Mode mode,
                                    Rng* rng, bool mask_with_truth = true,
                                    bool want_recon = true) const;

private:
    ForwardOut forward_caps(const Var& u, const std::vector<int>* labels, Mode mode, Rng* rng,
                            bool mask_with_truth, bool want_recon) const;
};

// Shared composite loss: total = cls + lambda * recon + beta * klsum.
// Missing recon/posterior terms contribute zero (their components are still
// reported as 0; a present-but-unweighted KL is reported unweighted).
LossOut composite_loss(const ForwardOut& fw, const Tensor& image_flat,
                       const std::vector<int>& labels, const LossWeights& w,
                       const MarginLossConfig& mcfg);

// Baseline routing loop, exposed for oracle tests.
Var dynamic_routing(const Var& uhat, int iters);

}  // namespace ibcaps
