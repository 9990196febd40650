#include "ibcaps/model.hpp"

namespace ibcaps {

std::vector<int> select_indices(const Tensor& activities, const std::vector<int>* labels,
                                Mode mode, bool mask_with_truth) {
    const int B = activities.dim(0), C = activities.dim(1);
    if (mode == Mode::Train && mask_with_truth) {
        if (!labels) throw std::invalid_argument("select_capsule: labels required in train mode");
        return *labels;
    }
    std::vector<int> idx(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (activities[static_cast<std::int64_t>(b) * C + c] >
                activities[static_cast<std::int64_t>(b) * C + best])
                best = c;  // strict >: ties break to the lowest index
        idx[static_cast<std::size_t>(b)] = best;
    }
    return idx;
}

Var dynamic_routing(const Var& uhat, int iters) {
    if (iters < 1) throw std::invalid_argument("dynamic_routing: iters must be >= 1");
    const int B = uhat->val.dim(0), N = uhat->val.dim(1), C = uhat->val.dim(2);
    Var logits = constant(Tensor({B, N, C}));  // b init 0
    Var v;
    for (int it = 0; it < iters; ++it) {
        Var c = softmax_lastdim(logits);
        Var s = routing_weighted_sum(c, uhat);
        v = squash_lastdim(s);
        if (it + 1 < iters) logits = add(logits, caps_agreement(uhat, v));
    }
    return v;
}

CapsNet::CapsNet(const ArchConfig& cfg_, std::uint64_t seed) : cfg(cfg_) {
    cfg.validate();
    Rng rng(seed, 0x11);
    if (cfg.has_stem()) stem = ConvStem(params, cfg, rng);
    // Routing sums transformed predictions over all num_primary capsules, so
    // the effective fan-in of a class capsule is num_primary * primary_dim,
    // not primary_dim. Scaling by primary_dim alone saturates every class
    // capsule's squash (||v|| ~ 0.99 for all classes) within one optimizer
    // step and training never escapes the margin-loss plateau.
    route_w = params.add("routing.weight",
                         init_uniform({cfg.num_primary, cfg.primary_dim,
                                       cfg.num_classes * cfg.caps_out_dim},
                                      cfg.num_primary * cfg.primary_dim, rng));
    decoder = Decoder(params, "decoder", cfg.num_classes * cfg.caps_out_dim, cfg, rng);
}

ForwardOut CapsNet::forward(const Var& image, const std::vector<int>* labels, Mode mode,
                            bool mask_with_truth, bool want_recon) const {
    if (!cfg.has_stem()) throw std::logic_error("capsnet: stemless config requires forward_from_primary");
    return forward_caps(stem.forward(image), labels, mode, mask_with_truth, want_recon);
}

ForwardOut CapsNet::forward_from_primary(const Var& u_raw, const std::vector<int>* labels,
                                         Mode mode, bool mask_with_truth, bool want_recon) const {
    return forward_caps(squash_lastdim(u_raw), labels, mode, mask_with_truth, want_recon);
}

ForwardOut CapsNet::forward_caps(const Var& u, const std::vector<int>* labels, Mode mode,
                                 bool mask_with_truth, bool want_recon) const {
    ForwardOut out;
    Var uhat = caps_transform(u, route_w, cfg.num_classes, cfg.caps_out_dim);
    Var v = dynamic_routing(uhat, cfg.routing_iters);  // [B, C, out]
    out.latent = v;
    out.activities = norm_lastdim(v);
    if (want_recon) {
        out.selected = select_indices(out.activities->val, labels, mode, mask_with_truth);
        out.recon = decoder.forward(mask_flatten(v, out.selected));
    }
    return out;
}

IBCapsNet::IBCapsNet(const ArchConfig& cfg_, ModelVariantFlags variant_, std::uint64_t seed)
    : cfg(cfg_), variant(variant_) {
    cfg.validate();
    variant.validate();
    Rng rng(seed, 0x22);
    if (cfg.has_stem()) stem = ConvStem(params, cfg, rng);
    if (!variant.multi_classifier) {
        baseline_cls = Linear(params, "baseline_cls", cfg.num_primary, cfg.num_classes, rng);
        return;
    }
    ctx1 = Linear(params, "context.fc1", cfg.num_primary, cfg.context_hidden, rng);
    ctx2 = Linear(params, "context.fc2", cfg.context_hidden, cfg.context_dim, rng);
    const int head_width = variant.squash_and_kl ? 2 * cfg.latent_dim : cfg.latent_dim;
    for (int c = 0; c < cfg.num_classes; ++c) {
        const std::string hn = "head" + std::to_string(c);
        if (cfg.class_head_hidden > 0) {
            head_hidden.emplace_back(params, hn + ".fc1", cfg.context_dim, cfg.class_head_hidden,
                                     rng);
            head_out.emplace_back(params, hn + ".fc2", cfg.class_head_hidden, head_width, rng);
        } else {
            head_out.emplace_back(params, hn + ".fc1", cfg.context_dim, head_width, rng);
        }
    }
    if (variant.reconstruction) decoder = Decoder(params, "decoder", cfg.latent_dim, cfg, rng);
}

ForwardOut IBCapsNet::forward(const Var& image, const std::vector<int>* labels, Mode mode,
                              Rng* rng, bool mask_with_truth, bool want_recon) const {
    if (!cfg.has_stem()) throw std::logic_error("ibcapsnet: stemless config requires forward_from_primary");
    return forward_caps(stem.forward(image), labels, mode, rng, mask_with_truth, want_recon);
}

ForwardOut IBCapsNet::forward_from_primary(const Var& u_raw, const std::vector<int>* labels,
                                           Mode mode, Rng* rng, bool mask_with_truth,
                                           bool want_recon) const {
    return forward_caps(squash_lastdim(u_raw), labels, mode, rng, mask_with_truth, want_recon);
}

ForwardOut IBCapsNet::forward_caps(const Var& u, const std::vector<int>* labels, Mode mode,
                                   Rng* rng, bool mask_with_truth, bool want_recon) const {
    ForwardOut out;
    Var means = capsule_means(u);  // [B, N]
    if (!variant.multi_classifier) {
        out.activities = sigmoid(baseline_cls.forward(means));
        return out;
    }
    Var h = ctx2.forward(relu(ctx1.forward(means)));  // ContextVector [B, m]
    const int B = h->val.dim(0), C = cfg.num_classes, k = cfg.latent_dim;

    // per-class heads, evaluated independently (no shared parameters)
    std::vector<Var> head(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        Var t = h;
        if (cfg.class_head_hidden > 0) t = relu(head_hidden[static_cast<std::size_t>(c)].forward(t));
        head[static_cast<std::size_t>(c)] = head_out[static_cast<std::size_t>(c)].forward(t);
    }

    (void)B;
    if (!variant.squash_and_kl) {
        // deterministic latent capsules, no squash, no KL
        Var z = stack_heads(head, 0, k);
        out.latent = z;
        out.activities = norm_lastdim(z);
        return out;
    }

    // Gaussian posteriors: head output = [mu_raw, logvar_raw]; mu = squash(mu_raw).
    // logvar is parameterized as -6 + 8*sigmoid(raw), i.e. bounded to (-6, 2)
    // with sigma ~ 0.37 at init. Unbounded logvar is numerically fragile here:
    // the margin loss rewards shrinking sigma toward zero much more strongly
    // than the beta-weighted KL resists it, and raw logvar then runs away
    // toward -inf (dead reparameterization, diverging KL).
    Var mu_raw = stack_heads(head, 0, k);
    Var logvar_raw = stack_heads(head, k, k);
    Tensor lv_lo({B, C, k});
    std::fill(lv_lo.data.begin(), lv_lo.data.end(), real(-6));
    Var logvar = add(scale(sigmoid(logvar_raw), real(8)), constant(std::move(lv_lo)));
    Var mu = squash_lastdim(mu_raw);
    out.post_mu = mu;
    out.post_logvar = logvar;

    Var z;
    if (mode == Mode::Train) {
        if (!rng) throw std::invalid_argument("ibcapsnet: rng required for training forward");
        Tensor eps({B, C, k});
        rng->fill_normal(eps);
        z = reparameterize_sample(mu, logvar, eps);
    } else {
        z = mu;  // deterministic eval: latent capsules equal posterior means
    }
    out.latent = z;
    out.activities = norm_lastdim(z);

    if (variant.reconstruction && want_recon) {
        out.selected = select_indices(out.activities->val, labels, mode, mask_with_truth);
        out.recon = decoder.forward(select_class(z, out.selected));
    }
    return out;
}

LossOut composite_loss(const ForwardOut& fw, const Tensor& image_flat,
                       const std::vector<int>& labels, const LossWeights& w,
                       const MarginLossConfig& mcfg) {
    LossOut out;
    Var cls = margin_loss_op(fw.activities, labels, mcfg.m_plus, mcfg.m_minus, mcfg.lambda_neg);
    out.cls = static_cast<double>(cls->val[0]);
    Var total = cls;
    if (fw.recon) {
        Var rec = sse_loss(fw.recon, image_flat);
        out.recon = static_cast<double>(rec->val[0]);
        if (w.recon_weight != real(0)) total = add(total, scale(rec, w.recon_weight));
    }
    if (fw.post_mu) {
        Var kl = batch_mean_rowsum(kl_per_class(fw.post_mu, fw.post_logvar));
        out.kl = static_cast<double>(kl->val[0]);
        if (w.kl_weight != real(0)) total = add(total, scale(kl, w.kl_weight));
    }
    out.total = total;
    return out;
}

}  // namespace ibcaps
