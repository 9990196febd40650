#include "ibcaps/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "ibcaps/blas.hpp"

namespace ibcaps {

bool& grad_enabled() {
    static bool enabled = true;
    return enabled;
}

Var leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->val = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

namespace {

Var make_op(Tensor out, std::vector<Var> parents, std::function<void(Node&)> backfn) {
    auto n = std::make_shared<Node>();
    n->val = std::move(out);
    if (grad_enabled()) {
        bool rg = false;
        for (const auto& p : parents)
            if (p && p->requires_grad) rg = true;
        if (rg) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backfn = std::move(backfn);
        }
    }
    return n;
}

void accumulate(const Var& p, const Tensor& g) {
    if (!p || !p->requires_grad) return;
    p->ensure_grad();
    real* dst = p->grad.ptr();
    const real* src = g.ptr();
    for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

}  // namespace

void backward(const Var& root) {
    if (root->val.numel() != 1) throw std::logic_error("backward: root must be scalar");
    // iterative topological order
    std::vector<Node*> order;
    std::vector<std::pair<Node*, std::size_t>> stack;
    std::unordered_set<Node*> visited;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad.data[0] = real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backfn && !n->grad.data.empty()) n->backfn(*n);
    }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("add: shape mismatch");
    Tensor out(a->val.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] + b->val[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        accumulate(a, n.grad);
        accumulate(b, n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("sub: shape mismatch");
    Tensor out(a->val.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] - b->val[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        accumulate(a, n.grad);
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    if (!a->val.same_shape(b->val)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out(a->val.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * b->val[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->val[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->val[i];
        }
    });
}

Var scale(const Var& a, real s) {
    Tensor out(a->val.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] * s;
    return make_op(std::move(out), {a}, [a, s](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * s;
    });
}

Var relu(const Var& a) {
    Tensor out(a->val.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->val[i] > real(0) ? a->val[i] : real(0);
    return make_op(std::move(out), {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
            if (a->val[i] > real(0)) a->grad[i] += n.grad[i];
    });
}

Var sigmoid(const Var& a) {
    Tensor out(a->val.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = real(1) / (real(1) + std::exp(-a->val[i]));
    auto saved = std::make_shared<Tensor>(out);
    return make_op(std::move(out), {a}, [a, saved](Node& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const Tensor& y = *saved;
        for (std::int64_t i = 0; i < n.grad.numel(); ++i)
            a->grad[i] += n.grad[i] * y[i] * (real(1) - y[i]);
    });
}

// --------------------------------------------------------------------- dense

Var linear(const Var& x, const Var& w, const Var& b) {
    const int B = x->val.dim(0), in = x->val.dim(1), out_f = w->val.dim(0);
    if (w->val.dim(1) != in) throw std::invalid_argument("linear: weight/input mismatch");
    Tensor out({B, out_f});
    gemm(false, true, B, out_f, in, real(1), x->val.ptr(), in, w->val.ptr(), in, real(0),
         out.ptr(), out_f);
    if (b) {
        for (int r = 0; r < B; ++r)
            for (int c = 0; c < out_f; ++c) out[static_cast<std::int64_t>(r) * out_f + c] += b->val[c];
    }
    return make_op(std::move(out), {x, w, b}, [x, w, b, B, in, out_f](Node& n) {
        if (x->requires_grad) {
            x->ensure_grad();
            gemm(false, false, B, in, out_f, real(1), n.grad.ptr(), out_f, w->val.ptr(), in,
                 real(1), x->grad.ptr(), in);
        }
        if (w->requires_grad) {
            w->ensure_grad();
            gemm(true, false, out_f, in, B, real(1), n.grad.ptr(), out_f, x->val.ptr(), in,
                 real(1), w->grad.ptr(), in);
        }
        if (b && b->requires_grad) {
            b->ensure_grad();
            for (int r = 0; r < B; ++r)
                for (int c = 0; c < out_f; ++c)
                    b->grad[c] += n.grad[static_cast<std::int64_t>(r) * out_f + c];
        }
    });
}

// ---------------------------------------------------------------------- conv

namespace {

struct ConvDims {
    int B, C, H, W, O, kh, kw, stride, Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride) {
    ConvDims d{};
    d.B = x.dim(0);
    d.C = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.O = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    if (w.dim(1) != d.C) throw std::invalid_argument("conv2d: channel mismatch");
    d.Ho = (d.H - d.kh) / stride + 1;
    d.Wo = (d.W - d.kw) / stride + 1;
    if (d.Ho <= 0 || d.Wo <= 0) throw std::invalid_argument("conv2d: kernel larger than input");
    return d;
}

// columns: [C*kh*kw, Ho*Wo] block for one image inside a wider matrix whose
// leading dimension is ld; the block starts at column offset `off`.
void im2col(const real* img, const ConvDims& d, real* col, std::int64_t ld, std::int64_t off) {
    for (int c = 0; c < d.C; ++c) {
        const real* chan = img + static_cast<std::int64_t>(c) * d.H * d.W;
        for (int ky = 0; ky < d.kh; ++ky)
            for (int kx = 0; kx < d.kw; ++kx) {
                real* row =
                    col + (static_cast<std::int64_t>(c) * d.kh * d.kw + ky * d.kw + kx) * ld + off;
                for (int oy = 0; oy < d.Ho; ++oy) {
                    const real* src = chan + (oy * d.stride + ky) * d.W + kx;
                    if (d.stride == 1) {
                        std::memcpy(row + oy * d.Wo, src, sizeof(real) * static_cast<std::size_t>(d.Wo));
                    } else {
                        for (int ox = 0; ox < d.Wo; ++ox) row[oy * d.Wo + ox] = src[ox * d.stride];
                    }
                }
            }
    }
}

void col2im_add(const real* col, const ConvDims& d, std::int64_t ld, std::int64_t off, real* img) {
    for (int c = 0; c < d.C; ++c) {
        real* chan = img + static_cast<std::int64_t>(c) * d.H * d.W;
        for (int ky = 0; ky < d.kh; ++ky)
            for (int kx = 0; kx < d.kw; ++kx) {
                const real* row =
                    col + (static_cast<std::int64_t>(c) * d.kh * d.kw + ky * d.kw + kx) * ld + off;
                for (int oy = 0; oy < d.Ho; ++oy) {
                    real* dst = chan + (oy * d.stride + ky) * d.W + kx;
                    for (int ox = 0; ox < d.Wo; ++ox) dst[ox * d.stride] += row[oy * d.Wo + ox];
                }
            }
    }
}

// Images per GEMM call.  Single-image column matrices are only Ho*Wo columns
// wide (36 for the stride-2 primary-capsule layer), which wastes most of the
// GEMM: the weight matrix gets repacked per call and the dW update degrades
// to a skinny rank-P accumulation over the full O x K gradient.  Stacking
// several images widens the GEMM; the chunk is capped so the column buffer
// stays modest (~32 MB in float32).
int conv_chunk(const ConvDims& d, int K, int P) {
    const std::int64_t budget = 8ll * 1024 * 1024;  // reals per column buffer
    std::int64_t per_img = static_cast<std::int64_t>(K) * P;
    int chunk = static_cast<int>(std::max<std::int64_t>(1, budget / std::max<std::int64_t>(1, per_img)));
    return std::min(chunk, d.B);
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride) {
    const ConvDims d = conv_dims(x->val, w->val, stride);
    const int K = d.C * d.kh * d.kw, P = d.Ho * d.Wo;
    const int chunk = conv_chunk(d, K, P);
    Tensor out({d.B, d.O, d.Ho, d.Wo});
    std::vector<real> col(static_cast<std::size_t>(K) * chunk * P);
    std::vector<real> ybuf(static_cast<std::size_t>(d.O) * chunk * P);
    for (int base = 0; base < d.B; base += chunk) {
        const int m = std::min(chunk, d.B - base);
        const std::int64_t ld = static_cast<std::int64_t>(m) * P;
        for (int i = 0; i < m; ++i)
            im2col(x->val.ptr() + static_cast<std::int64_t>(base + i) * d.C * d.H * d.W, d,
                   col.data(), ld, static_cast<std::int64_t>(i) * P);
        gemm(false, false, d.O, static_cast<int>(ld), K, real(1), w->val.ptr(), K, col.data(),
             static_cast<int>(ld), real(0), ybuf.data(), static_cast<int>(ld));
        // ybuf rows are [O, m*P]; split back into per-image [O, P] blocks.
        for (int i = 0; i < m; ++i) {
            real* y = out.ptr() + static_cast<std::int64_t>(base + i) * d.O * P;
            for (int o = 0; o < d.O; ++o) {
                const real* src = ybuf.data() + static_cast<std::int64_t>(o) * ld + i * P;
                real* dst = y + static_cast<std::int64_t>(o) * P;
                if (b) {
                    const real bo = b->val[o];
                    for (int p = 0; p < P; ++p) dst[p] = src[p] + bo;
                } else {
                    std::memcpy(dst, src, sizeof(real) * static_cast<std::size_t>(P));
                }
            }
        }
    }
    // im2col buffers are recomputed in the backward pass instead of saved
    return make_op(std::move(out), {x, w, b}, [x, w, b, d, K, P, chunk](Node& n) {
        std::vector<real> col(static_cast<std::size_t>(K) * chunk * P);
        std::vector<real> dcol(static_cast<std::size_t>(K) * chunk * P);
        std::vector<real> dybuf(static_cast<std::size_t>(d.O) * chunk * P);
        if (x->requires_grad) x->ensure_grad();
        if (w->requires_grad) w->ensure_grad();
        if (b && b->requires_grad) b->ensure_grad();
        for (int base = 0; base < d.B; base += chunk) {
            const int m = std::min(chunk, d.B - base);
            const std::int64_t ld = static_cast<std::int64_t>(m) * P;
            for (int i = 0; i < m; ++i) {
                const real* dy = n.grad.ptr() + static_cast<std::int64_t>(base + i) * d.O * P;
                for (int o = 0; o < d.O; ++o)
                    std::memcpy(dybuf.data() + static_cast<std::int64_t>(o) * ld + i * P,
                                dy + static_cast<std::int64_t>(o) * P,
                                sizeof(real) * static_cast<std::size_t>(P));
            }
            if (w->requires_grad || x->requires_grad)
                for (int i = 0; i < m; ++i)
                    im2col(x->val.ptr() + static_cast<std::int64_t>(base + i) * d.C * d.H * d.W, d,
                           col.data(), ld, static_cast<std::int64_t>(i) * P);
            if (w->requires_grad)
                gemm(false, true, d.O, K, static_cast<int>(ld), real(1), dybuf.data(),
                     static_cast<int>(ld), col.data(), static_cast<int>(ld), real(1),
                     w->grad.ptr(), K);
            if (x->requires_grad) {
                gemm(true, false, K, static_cast<int>(ld), d.O, real(1), w->val.ptr(), K,
                     dybuf.data(), static_cast<int>(ld), real(0), dcol.data(),
                     static_cast<int>(ld));
                for (int i = 0; i < m; ++i)
                    col2im_add(dcol.data(), d, ld, static_cast<std::int64_t>(i) * P,
                               x->grad.ptr() + static_cast<std::int64_t>(base + i) * d.C * d.H * d.W);
            }
            if (b && b->requires_grad)
                for (int o = 0; o < d.O; ++o) {
                    const real* row = dybuf.data() + static_cast<std::int64_t>(o) * ld;
                    real acc = 0;
                    for (std::int64_t p = 0; p < ld; ++p) acc += row[p];
                    b->grad[o] += acc;
                }
        }
    });
}

// ------------------------------------------------------------------ capsules

Var primary_reshape(const Var& x, int d) {
    const int B = x->val.dim(0), O = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (O % d != 0) throw std::invalid_argument("primary_reshape: channels not divisible by d");
    const int G = O / d, N = G * H * W, HW = H * W;
    Tensor out({B, N, d});
    for (int bb = 0; bb < B; ++bb) {
        const real* src = x->val.ptr() + static_cast<std::int64_t>(bb) * O * HW;
        real* dst = out.ptr() + static_cast<std::int64_t>(bb) * N * d;
        for (int g = 0; g < G; ++g)
            for (int p = 0; p < HW; ++p)
                for (int j = 0; j < d; ++j)
                    dst[(static_cast<std::int64_t>(g) * HW + p) * d + j] =
                        src[(static_cast<std::int64_t>(g) * d + j) * HW + p];
    }
    return make_op(std::move(out), {x}, [x, d, B, G, HW](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const int N = G * HW;
        for (int bb = 0; bb < B; ++bb) {
            real* dst = x->grad.ptr() + static_cast<std::int64_t>(bb) * G * d * HW;
            const real* src = n.grad.ptr() + static_cast<std::int64_t>(bb) * N * d;
            for (int g = 0; g < G; ++g)
                for (int p = 0; p < HW; ++p)
                    for (int j = 0; j < d; ++j)
                        dst[(static_cast<std::int64_t>(g) * d + j) * HW + p] +=
                            src[(static_cast<std::int64_t>(g) * HW + p) * d + j];
        }
    });
}

Var squash_lastdim(const Var& x, real eps) {
    const int d = x->val.shape.back();
    const std::int64_t groups = x->val.numel() / d;
    Tensor out(x->val.shape);
    for (std::int64_t g = 0; g < groups; ++g) {
        const real* s = x->val.ptr() + g * d;
        real* v = out.ptr() + g * d;
        real n2 = 0;
        for (int j = 0; j < d; ++j) n2 += s[j] * s[j];
        const real nrm = std::sqrt(n2);
        const real t = nrm / (real(1) + n2);  // no 1/||s||: total at 0
        for (int j = 0; j < d; ++j) v[j] = s[j] * t;
    }
    return make_op(std::move(out), {x}, [x, d, groups, eps](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::int64_t g = 0; g < groups; ++g) {
            const real* s = x->val.ptr() + g * d;
            const real* dv = n.grad.ptr() + g * d;
            real* ds = x->grad.ptr() + g * d;
            real n2 = 0, dot = 0;
            for (int j = 0; j < d; ++j) {
                n2 += s[j] * s[j];
                dot += s[j] * dv[j];
            }
            const real nrm = std::sqrt(n2);
            const real denom = real(1) + n2;
            const real t = nrm / denom;
            // dt/dn = (1 - n^2) / (1 + n^2)^2, applied along s/||s||
            const real coef = dot / std::max(nrm, eps) * (real(1) - n2) / (denom * denom);
            for (int j = 0; j < d; ++j) ds[j] += t * dv[j] + coef * s[j];
        }
    });
}

Var capsule_means(const Var& x) {
    const int d = x->val.shape.back();
    const std::int64_t groups = x->val.numel() / d;
    std::vector<int> shp(x->val.shape.begin(), x->val.shape.end() - 1);
    Tensor out(shp);
    const real inv = real(1) / real(d);
    for (std::int64_t g = 0; g < groups; ++g) {
        real s = 0;
        for (int j = 0; j < d; ++j) s += x->val[g * d + j];
        out[g] = s * inv;
    }
    return make_op(std::move(out), {x}, [x, d, groups, inv](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::int64_t g = 0; g < groups; ++g) {
            const real gg = n.grad[g] * inv;
            for (int j = 0; j < d; ++j) x->grad[g * d + j] += gg;
        }
    });
}

Var norm_lastdim(const Var& x, real eps) {
    const int d = x->val.shape.back();
    const std::int64_t groups = x->val.numel() / d;
    std::vector<int> shp(x->val.shape.begin(), x->val.shape.end() - 1);
    Tensor out(shp);
    for (std::int64_t g = 0; g < groups; ++g) {
        real n2 = 0;
        for (int j = 0; j < d; ++j) n2 += x->val[g * d + j] * x->val[g * d + j];
        out[g] = std::sqrt(n2);
    }
    auto saved = std::make_shared<Tensor>(out);
    return make_op(std::move(out), {x}, [x, d, groups, eps, saved](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::int64_t g = 0; g < groups; ++g) {
            const real coef = n.grad[g] / std::max((*saved)[g], eps);
            for (int j = 0; j < d; ++j) x->grad[g * d + j] += coef * x->val[g * d + j];
        }
    });
}

Var softmax_lastdim(const Var& x) {
    const int d = x->val.shape.back();
    const std::int64_t groups = x->val.numel() / d;
    Tensor out(x->val.shape);
    for (std::int64_t g = 0; g < groups; ++g) {
        const real* in = x->val.ptr() + g * d;
        real* o = out.ptr() + g * d;
        real mx = in[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, in[j]);
        real sum = 0;
        for (int j = 0; j < d; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (int j = 0; j < d; ++j) o[j] /= sum;
    }
    auto saved = std::make_shared<Tensor>(out);
    return make_op(std::move(out), {x}, [x, d, groups, saved](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (std::int64_t g = 0; g < groups; ++g) {
            const real* y = saved->ptr() + g * d;
            const real* dy = n.grad.ptr() + g * d;
            real* dx = x->grad.ptr() + g * d;
            real dot = 0;
            for (int j = 0; j < d; ++j) dot += y[j] * dy[j];
            for (int j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
}

Var caps_transform(const Var& u, const Var& w, int num_classes, int out_dim) {
    const int B = u->val.dim(0), N = u->val.dim(1), d = u->val.dim(2);
    const int CO = num_classes * out_dim;
    if (w->val.dim(0) != N || w->val.dim(1) != d || w->val.dim(2) != CO)
        throw std::invalid_argument("caps_transform: weight shape mismatch");
    Tensor out({B, N, num_classes, out_dim});
    // per-capsule GEMM with strided rows; uhat[b,i,:] = u[b,i,:] @ w[i]
    for (int i = 0; i < N; ++i)
        gemm(false, false, B, CO, d, real(1), u->val.ptr() + static_cast<std::int64_t>(i) * d,
             N * d, w->val.ptr() + static_cast<std::int64_t>(i) * d * CO, CO, real(0),
             out.ptr() + static_cast<std::int64_t>(i) * CO, N * CO);
    return make_op(std::move(out), {u, w}, [u, w, B, N, d, CO](Node& n) {
        if (u->requires_grad) u->ensure_grad();
        if (w->requires_grad) w->ensure_grad();
        for (int i = 0; i < N; ++i) {
            const real* dy = n.grad.ptr() + static_cast<std::int64_t>(i) * CO;  // [B, CO] strided
            if (u->requires_grad)
                gemm(false, true, B, d, CO, real(1), dy, N * CO,
                     w->val.ptr() + static_cast<std::int64_t>(i) * d * CO, CO, real(1),
                     u->grad.ptr() + static_cast<std::int64_t>(i) * d, N * d);
            if (w->requires_grad)
                gemm(true, false, d, CO, B, real(1),
                     u->val.ptr() + static_cast<std::int64_t>(i) * d, N * d, dy, N * CO, real(1),
                     w->grad.ptr() + static_cast<std::int64_t>(i) * d * CO, CO);
        }
    });
}

Var routing_weighted_sum(const Var& c, const Var& uhat) {
    const int B = uhat->val.dim(0), N = uhat->val.dim(1), C = uhat->val.dim(2),
              O = uhat->val.dim(3);
    Tensor out({B, C, O});
    for (int b = 0; b < B; ++b) {
        const real* cb = c->val.ptr() + static_cast<std::int64_t>(b) * N * C;
        const real* ub = uhat->val.ptr() + static_cast<std::int64_t>(b) * N * C * O;
        real* sb = out.ptr() + static_cast<std::int64_t>(b) * C * O;
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < C; ++j) {
                const real cij = cb[static_cast<std::int64_t>(i) * C + j];
                const real* uu = ub + (static_cast<std::int64_t>(i) * C + j) * O;
                real* ss = sb + static_cast<std::int64_t>(j) * O;
                for (int o = 0; o < O; ++o) ss[o] += cij * uu[o];
            }
    }
    return make_op(std::move(out), {c, uhat}, [c, uhat, B, N, C, O](Node& n) {
        if (c->requires_grad) c->ensure_grad();
        if (uhat->requires_grad) uhat->ensure_grad();
        for (int b = 0; b < B; ++b) {
            const real* ds = n.grad.ptr() + static_cast<std::int64_t>(b) * C * O;
            const real* ub = uhat->val.ptr() + static_cast<std::int64_t>(b) * N * C * O;
            const real* cb = c->val.ptr() + static_cast<std::int64_t>(b) * N * C;
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < C; ++j) {
                    const std::int64_t ui = (static_cast<std::int64_t>(i) * C + j) * O;
                    const real* dsj = ds + static_cast<std::int64_t>(j) * O;
                    if (c->requires_grad) {
                        real dot = 0;
                        for (int o = 0; o < O; ++o) dot += dsj[o] * ub[ui + o];
                        c->grad[static_cast<std::int64_t>(b) * N * C + i * C + j] += dot;
                    }
                    if (uhat->requires_grad) {
                        const real cij = cb[static_cast<std::int64_t>(i) * C + j];
                        real* du = uhat->grad.ptr() + static_cast<std::int64_t>(b) * N * C * O + ui;
                        for (int o = 0; o < O; ++o) du[o] += cij * dsj[o];
                    }
                }
        }
    });
}

Var caps_agreement(const Var& uhat, const Var& v) {
    const int B = uhat->val.dim(0), N = uhat->val.dim(1), C = uhat->val.dim(2),
              O = uhat->val.dim(3);
    Tensor out({B, N, C});
    for (int b = 0; b < B; ++b) {
        const real* ub = uhat->val.ptr() + static_cast<std::int64_t>(b) * N * C * O;
        const real* vb = v->val.ptr() + static_cast<std::int64_t>(b) * C * O;
        real* ab = out.ptr() + static_cast<std::int64_t>(b) * N * C;
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < C; ++j) {
                const real* uu = ub + (static_cast<std::int64_t>(i) * C + j) * O;
                const real* vv = vb + static_cast<std::int64_t>(j) * O;
                real dot = 0;
                for (int o = 0; o < O; ++o) dot += uu[o] * vv[o];
                ab[static_cast<std::int64_t>(i) * C + j] = dot;
            }
    }
    return make_op(std::move(out), {uhat, v}, [uhat, v, B, N, C, O](Node& n) {
        if (uhat->requires_grad) uhat->ensure_grad();
        if (v->requires_grad) v->ensure_grad();
        for (int b = 0; b < B; ++b) {
            const real* da = n.grad.ptr() + static_cast<std::int64_t>(b) * N * C;
            const real* ub = uhat->val.ptr() + static_cast<std::int64_t>(b) * N * C * O;
            const real* vb = v->val.ptr() + static_cast<std::int64_t>(b) * C * O;
            for (int i = 0; i < N; ++i)
                for (int j = 0; j < C; ++j) {
                    const real g = da[static_cast<std::int64_t>(i) * C + j];
                    if (g == real(0)) continue;
                    const std::int64_t ui =
                        static_cast<std::int64_t>(b) * N * C * O + (static_cast<std::int64_t>(i) * C + j) * O;
                    if (uhat->requires_grad) {
                        real* du = uhat->grad.ptr() + ui;
                        const real* vv = vb + static_cast<std::int64_t>(j) * O;
                        for (int o = 0; o < O; ++o) du[o] += g * vv[o];
                    }
                    if (v->requires_grad) {
                        real* dv = v->grad.ptr() + static_cast<std::int64_t>(b) * C * O +
                                   static_cast<std::int64_t>(j) * O;
                        const real* uu = ub + (static_cast<std::int64_t>(i) * C + j) * O;
                        for (int o = 0; o < O; ++o) dv[o] += g * uu[o];
                    }
                }
        }
    });
}

Var reparameterize_sample(const Var& mu, const Var& logvar, const Tensor& eps) {
    if (!mu->val.same_shape(logvar->val) || !mu->val.same_shape(eps))
        throw std::invalid_argument("reparameterize: shape mismatch");
    Tensor out(mu->val.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out[i] = mu->val[i] + std::exp(real(0.5) * logvar->val[i]) * eps[i];
    auto eps_s = std::make_shared<Tensor>(eps);
    return make_op(std::move(out), {mu, logvar}, [mu, logvar, eps_s](Node& n) {
        if (mu->requires_grad) accumulate(mu, n.grad);
        if (logvar->requires_grad) {
            logvar->ensure_grad();
            for (std::int64_t i = 0; i < n.grad.numel(); ++i)
                logvar->grad[i] += n.grad[i] * real(0.5) *
                                   std::exp(real(0.5) * logvar->val[i]) * (*eps_s)[i];
        }
    });
}

Var kl_per_class(const Var& mu, const Var& logvar) {
    const int k = mu->val.shape.back();
    const std::int64_t groups = mu->val.numel() / k;
    std::vector<int> shp(mu->val.shape.begin(), mu->val.shape.end() - 1);
    Tensor out(shp);
    for (std::int64_t g = 0; g < groups; ++g) {
        real acc = 0;
        for (int j = 0; j < k; ++j) {
            const real m = mu->val[g * k + j], lv = logvar->val[g * k + j];
            acc += m * m + std::exp(lv) - lv - real(1);
        }
        out[g] = real(0.5) * acc;
    }
    return make_op(std::move(out), {mu, logvar}, [mu, logvar, k, groups](Node& n) {
        if (mu->requires_grad) mu->ensure_grad();
        if (logvar->requires_grad) logvar->ensure_grad();
        for (std::int64_t g = 0; g < groups; ++g) {
            const real gg = n.grad[g];
            for (int j = 0; j < k; ++j) {
                if (mu->requires_grad) mu->grad[g * k + j] += gg * mu->val[g * k + j];
                if (logvar->requires_grad)
                    logvar->grad[g * k + j] +=
                        gg * real(0.5) * (std::exp(logvar->val[g * k + j]) - real(1));
            }
        }
    });
}

Var stack_heads(const std::vector<Var>& parts, int offset, int k) {
    if (parts.empty()) throw std::invalid_argument("stack_heads: empty");
    const int C = static_cast<int>(parts.size());
    const int B = parts[0]->val.dim(0), W = parts[0]->val.dim(1);
    if (offset + k > W) throw std::invalid_argument("stack_heads: slice out of range");
    Tensor out({B, C, k});
    for (int c = 0; c < C; ++c) {
        const Tensor& p = parts[static_cast<std::size_t>(c)]->val;
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < k; ++j)
                out[(static_cast<std::int64_t>(b) * C + c) * k + j] =
                    p[static_cast<std::int64_t>(b) * W + offset + j];
    }
    return make_op(std::move(out), parts, [parts, offset, k, B, C, W](Node& n) {
        for (int c = 0; c < C; ++c) {
            const Var& p = parts[static_cast<std::size_t>(c)];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int j = 0; j < k; ++j)
                    p->grad[static_cast<std::int64_t>(b) * W + offset + j] +=
                        n.grad[(static_cast<std::int64_t>(b) * C + c) * k + j];
        }
    });
}

Var select_class(const Var& z, const std::vector<int>& idx) {
    const int B = z->val.dim(0), C = z->val.dim(1), k = z->val.dim(2);
    if (static_cast<int>(idx.size()) != B) throw std::invalid_argument("select_class: index size");
    Tensor out({B, k});
    for (int b = 0; b < B; ++b) {
        if (idx[b] < 0 || idx[b] >= C) throw std::out_of_range("select_class: class index");
        std::memcpy(out.ptr() + static_cast<std::int64_t>(b) * k,
                    z->val.ptr() + (static_cast<std::int64_t>(b) * C + idx[b]) * k,
                    sizeof(real) * static_cast<std::size_t>(k));
    }
    auto idx_s = std::make_shared<std::vector<int>>(idx);
    return make_op(std::move(out), {z}, [z, idx_s, B, C, k](Node& n) {
        if (!z->requires_grad) return;
        z->ensure_grad();
        for (int b = 0; b < B; ++b) {
            real* dst = z->grad.ptr() + (static_cast<std::int64_t>(b) * C + (*idx_s)[b]) * k;
            const real* src = n.grad.ptr() + static_cast<std::int64_t>(b) * k;
            for (int j = 0; j < k; ++j) dst[j] += src[j];
        }
    });
}

Var mask_flatten(const Var& z, const std::vector<int>& idx) {
    const int B = z->val.dim(0), C = z->val.dim(1), k = z->val.dim(2);
    if (static_cast<int>(idx.size()) != B) throw std::invalid_argument("mask_flatten: index size");
    Tensor out({B, C * k});
    for (int b = 0; b < B; ++b) {
        if (idx[b] < 0 || idx[b] >= C) throw std::out_of_range("mask_flatten: class index");
        std::memcpy(out.ptr() + static_cast<std::int64_t>(b) * C * k + idx[b] * k,
                    z->val.ptr() + (static_cast<std::int64_t>(b) * C + idx[b]) * k,
                    sizeof(real) * static_cast<std::size_t>(k));
    }
    auto idx_s = std::make_shared<std::vector<int>>(idx);
    return make_op(std::move(out), {z}, [z, idx_s, B, C, k](Node& n) {
        if (!z->requires_grad) return;
        z->ensure_grad();
        for (int b = 0; b < B; ++b) {
            real* dst = z->grad.ptr() + (static_cast<std::int64_t>(b) * C + (*idx_s)[b]) * k;
            const real* src = n.grad.ptr() + static_cast<std::int64_t>(b) * C * k + (*idx_s)[b] * k;
            for (int j = 0; j < k; ++j) dst[j] += src[j];
        }
    });
}

// ---------------------------------------------------------------- reductions

Var batch_mean_rowsum(const Var& x) {
    const int B = x->val.dim(0);
    const std::int64_t row = x->val.numel() / B;
    Tensor out({1});
    double acc = 0;
    for (std::int64_t i = 0; i < x->val.numel(); ++i) acc += static_cast<double>(x->val[i]);
    out[0] = static_cast<real>(acc / B);
    return make_op(std::move(out), {x}, [x, B, row](Node& n) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const real g = n.grad[0] / real(B);
        for (std::int64_t i = 0; i < x->grad.numel(); ++i) x->grad[i] += g;
    });
}

Var margin_loss_op(const Var& activities, const std::vector<int>& labels, real m_plus,
                   real m_minus, real lambda_neg) {
    const int B = activities->val.dim(0), C = activities->val.dim(1);
    if (static_cast<int>(labels.size()) != B)
        throw std::invalid_argument("margin_loss: label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= C) throw std::invalid_argument("margin_loss: label out of range");
    Tensor out({1});
    double acc = 0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const real a = activities->val[static_cast<std::int64_t>(b) * C + c];
            if (c == labels[b]) {
                const real h = std::max(real(0), m_plus - a);
                acc += static_cast<double>(h) * h;
            } else {
                const real h = std::max(real(0), a - m_minus);
                acc += static_cast<double>(lambda_neg) * h * h;
            }
        }
    out[0] = static_cast<real>(acc / B);
    auto lab = std::make_shared<std::vector<int>>(labels);
    return make_op(std::move(out), {activities},
                   [activities, lab, B, C, m_plus, m_minus, lambda_neg](Node& n) {
                       if (!activities->requires_grad) return;
                       activities->ensure_grad();
                       const real g = n.grad[0] / real(B);
                       for (int b = 0; b < B; ++b)
                           for (int c = 0; c < C; ++c) {
                               const std::int64_t i = static_cast<std::int64_t>(b) * C + c;
                               const real a = activities->val[i];
                               if (c == (*lab)[b]) {
                                   const real h = std::max(real(0), m_plus - a);
                                   activities->grad[i] += g * real(-2) * h;
                               } else {
                                   const real h = std::max(real(0), a - m_minus);
                                   activities->grad[i] += g * real(2) * lambda_neg * h;
                               }
                           }
                   });
}

Var sse_loss(const Var& pred, const Tensor& target) {
    if (!pred->val.same_shape(target)) throw std::invalid_argument("sse_loss: shape mismatch");
    const int B = pred->val.dim(0);
    Tensor out({1});
    double acc = 0;
    for (std::int64_t i = 0; i < pred->val.numel(); ++i) {
        const double dd = static_cast<double>(pred->val[i]) - static_cast<double>(target[i]);
        acc += dd * dd;
    }
    out[0] = static_cast<real>(acc / B);
    auto tgt = std::make_shared<Tensor>(target);
    return make_op(std::move(out), {pred}, [pred, tgt, B](Node& n) {
        if (!pred->requires_grad) return;
        pred->ensure_grad();
        const real g = n.grad[0] * real(2) / real(B);
        for (std::int64_t i = 0; i < pred->grad.numel(); ++i)
            pred->grad[i] += g * (pred->val[i] - (*tgt)[i]);
    });
}

}  // namespace ibcaps
