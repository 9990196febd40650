#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ibcaps/tensor.hpp"

namespace ibcaps {

// Minimal reverse-mode tape. A graph is rebuilt on every forward pass; leaves
// (parameters, inputs) persist across passes.
struct Node {
    Tensor val;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backfn;  // reads this->grad, accumulates into parents

    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor(val.shape);
    }
    void clear_grad() { grad = Tensor(); }
};

using Var = std::shared_ptr<Node>;

bool& grad_enabled();

// RAII guard disabling graph recording (evaluation / benchmarking).
struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev_; }

private:
    bool prev_;
};

Var leaf(Tensor value, bool requires_grad = false);
Var constant(Tensor value);

// Runs reverse-mode accumulation from a scalar root (numel == 1).
void backward(const Var& root);

// --- elementwise ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, real s);
Var relu(const Var& a);
Var sigmoid(const Var& a);

// --- dense / conv ---
// x: [B, in], w: [out, in], b: [out] (may be null) -> [B, out]
Var linear(const Var& x, const Var& w, const Var& b);
// x: [B, C, H, W], w: [O, C, kh, kw], b: [O] (may be null) -> [B, O, Ho, Wo]
Var conv2d(const Var& x, const Var& w, const Var& b, int stride);

// --- capsule ops ---
// [B, O, Ho, Wo] -> [B, N, d] with N = (O/d)*Ho*Wo; component = channel within
// a d-sized channel block.
Var primary_reshape(const Var& x, int d);
// squash along the last dim: v = s * ||s|| / (1 + ||s||^2)
Var squash_lastdim(const Var& x, real eps = real(1e-8));
// [B, N, d] -> [B, N], mean over components
Var capsule_means(const Var& x);
// [..., k] -> [...], L2 norm of the last dim (eps-guarded backward)
Var norm_lastdim(const Var& x, real eps = real(1e-8));
Var softmax_lastdim(const Var& x);
// u: [B, N, d], w: [N, d, C*out] -> uhat [B, N, C, out]
Var caps_transform(const Var& u, const Var& w, int num_classes, int out_dim);
// c: [B, N, C], uhat: [B, N, C, out] -> s [B, C, out]
Var routing_weighted_sum(const Var& c, const Var& uhat);
// uhat: [B, N, C, out], v: [B, C, out] -> [B, N, C] dot products
Var caps_agreement(const Var& uhat, const Var& v);
// z = mu + exp(0.5 * logvar) * eps, eps fixed per call
Var reparameterize_sample(const Var& mu, const Var& logvar, const Tensor& eps);
// [B, C, k] posteriors -> [B, C] KL(q || N(0, I)) per class
Var kl_per_class(const Var& mu, const Var& logvar);
// Stack per-class head outputs [B, w] into [B, C, k], taking columns
// [offset, offset + k) of each head.
Var stack_heads(const std::vector<Var>& parts, int offset, int k);
// z: [B, C, k], idx: per-sample class -> [B, k]
Var select_class(const Var& z, const std::vector<int>& idx);
// z: [B, C, k], idx -> [B, C*k], zero except the selected block
Var mask_flatten(const Var& z, const std::vector<int>& idx);

// --- reductions / losses ---
// [B, C] -> scalar, mean over batch of row sums
Var batch_mean_rowsum(const Var& x);
// margin loss, batch-averaged; labels are class indices
Var margin_loss_op(const Var& activities, const std::vector<int>& labels, real m_plus,
                   real m_minus, real lambda_neg);
// mean over batch of per-sample sum of squared errors
Var sse_loss(const Var& pred, const Tensor& target);

}  // namespace ibcaps
