// Property and unit suite: runs in well under a minute, no training, no
// dataset files required.

#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include "ibcaps/blas_env.hpp"

int main(int argc, char** argv) {
    ibcaps::pin_blas_kernels(argv);
    return doctest::Context(argc, argv).run();
}

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "ibcaps/bench.hpp"
#include "ibcaps/report.hpp"
#include "ibcaps/trainer.hpp"

using namespace ibcaps;

// absolute-tolerance comparison (the vendored doctest Approx is relative-only)
#define CHECK_NEAR(a, b, m) \
    CHECK(std::abs(static_cast<double>(a) - static_cast<double>(b)) <= (m))

namespace {

Tensor make_tensor(std::vector<int> shape, std::vector<real> data) {
    return Tensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

// Tiny stemless architecture from the gradient-check scale: N=4, d=2, m=3,
// k=2, C=2, 4x4 input. Also used for cheap structural checks here.
ArchConfig tiny_arch() {
    ArchConfig a;
    a.in_channels = 1;
    a.image_side = 4;
    a.num_classes = 2;
    a.num_primary = 4;
    a.primary_dim = 2;
    a.context_dim = 3;
    a.latent_dim = 2;
    a.context_hidden = 5;
    a.class_head_hidden = 3;
    a.caps_out_dim = 2;
    a.decoder_hidden1 = 6;
    a.decoder_hidden2 = 7;
    return a;
}

Tensor tiny_primary(int B, std::uint64_t seed) {
    Tensor u({B, 4, 2});
    Rng rng(seed);
    rng.fill_uniform(u, -1.0, 1.0);
    return u;
}

}  // namespace

// ---------------------------------------------------------------- squash ---

TEST_CASE("squash maps (3,4) to norm 25/26 along the original direction") {
    Var s = leaf(make_tensor({1, 1, 2}, {real(3), real(4)}));
    Var v = squash_lastdim(s);
    // ||s|| = 5; v = s * ||s|| / (1 + ||s||^2) = s * 5/26
    CHECK(v->val[0] == doctest::Approx(3.0 * 5 / 26).epsilon(1e-6));
    CHECK(v->val[1] == doctest::Approx(4.0 * 5 / 26).epsilon(1e-6));
    const double n = std::hypot(static_cast<double>(v->val[0]), static_cast<double>(v->val[1]));
    CHECK(n == doctest::Approx(25.0 / 26.0).epsilon(1e-6));
}

TEST_CASE("squash range [0,1) and monotone in input norm") {
    Rng rng(7);
    Tensor dir({1, 1, 3});
    rng.fill_uniform(dir, -1.0, 1.0);
    double prev = -1.0;
    for (double scale : {0.0, 0.01, 0.1, 0.5, 1.0, 3.0, 10.0, 1e3}) {
        Tensor s = dir;
        for (auto& x : s.data) x = static_cast<real>(x * scale);
        Var v = squash_lastdim(leaf(s));
        double n = 0;
        for (auto x : v->val.data) n += static_cast<double>(x) * x;
        n = std::sqrt(n);
        CHECK(n >= 0.0);
        CHECK(n < 1.0);
        CHECK(n >= prev);  // monotone in ||s||
        prev = n;
    }
}

TEST_CASE("squash of the zero vector is zero") {
    Var v = squash_lastdim(leaf(Tensor({1, 1, 4})));
    for (auto x : v->val.data) CHECK(x == real(0));
}

// --------------------------------------------------------------- routing ---

namespace {

// Independent straight-line scalar oracle of the routing loop, double
// precision, plain index arithmetic only.
std::vector<double> routing_oracle(const std::vector<double>& uhat, int B, int N, int C, int D,
                                   int iters) {
    std::vector<double> v(static_cast<std::size_t>(B) * C * D, 0.0);
    for (int b = 0; b < B; ++b) {
        std::vector<double> logits(static_cast<std::size_t>(N) * C, 0.0);
        for (int it = 0; it < iters; ++it) {
            // c = softmax over classes
            std::vector<double> c(static_cast<std::size_t>(N) * C);
            for (int i = 0; i < N; ++i) {
                double mx = logits[static_cast<std::size_t>(i) * C];
                for (int j = 1; j < C; ++j)
                    mx = std::max(mx, logits[static_cast<std::size_t>(i) * C + j]);
                double z = 0;
                for (int j = 0; j < C; ++j)
                    z += std::exp(logits[static_cast<std::size_t>(i) * C + j] - mx);
                for (int j = 0; j < C; ++j)
                    c[static_cast<std::size_t>(i) * C + j] =
                        std::exp(logits[static_cast<std::size_t>(i) * C + j] - mx) / z;
            }
            // s_j = sum_i c_ij uhat_ij ; v_j = squash(s_j)
            for (int j = 0; j < C; ++j) {
                std::vector<double> s(static_cast<std::size_t>(D), 0.0);
                for (int i = 0; i < N; ++i)
                    for (int d = 0; d < D; ++d)
                        s[static_cast<std::size_t>(d)] +=
                            c[static_cast<std::size_t>(i) * C + j] *
                            uhat[((static_cast<std::size_t>(b) * N + i) * C + j) * D + d];
                double n2 = 0;
                for (int d = 0; d < D; ++d) n2 += s[static_cast<std::size_t>(d)] * s[static_cast<std::size_t>(d)];
                const double n = std::sqrt(n2);
                const double coef = n < 1e-8 ? 0.0 : n / (1.0 + n2);
                for (int d = 0; d < D; ++d)
                    v[((static_cast<std::size_t>(b) * C) + j) * D + d] =
                        coef * s[static_cast<std::size_t>(d)];
            }
            // b_ij += uhat_ij . v_j
            if (it + 1 < iters)
                for (int i = 0; i < N; ++i)
                    for (int j = 0; j < C; ++j) {
                        double dot = 0;
                        for (int d = 0; d < D; ++d)
                            dot += uhat[((static_cast<std::size_t>(b) * N + i) * C + j) * D + d] *
                                   v[((static_cast<std::size_t>(b) * C) + j) * D + d];
                        logits[static_cast<std::size_t>(i) * C + j] += dot;
                    }
        }
    }
    return v;
}

}  // namespace

TEST_CASE("dynamic routing matches the scalar oracle on small instances") {
    for (auto [N, C, D, iters] : std::vector<std::tuple<int, int, int, int>>{
             {3, 2, 2, 3}, {5, 3, 3, 3}, {4, 2, 3, 1}, {5, 3, 2, 5}}) {
        const int B = 2;
        Tensor uhat({B, N, C, D});
        Rng rng(static_cast<std::uint64_t>(N * 100 + C * 10 + D));
        rng.fill_uniform(uhat, -1.5, 1.5);
        Var v = dynamic_routing(leaf(uhat), iters);
        std::vector<double> ud(uhat.data.begin(), uhat.data.end());
        std::vector<double> vo = routing_oracle(ud, B, N, C, D, iters);
        REQUIRE(v->val.numel() == static_cast<std::int64_t>(vo.size()));
        for (std::int64_t i = 0; i < v->val.numel(); ++i)
            CHECK_NEAR(static_cast<double>(v->val[i]), vo[static_cast<std::size_t>(i)], 1e-6);
    }
}

TEST_CASE("routing with r=1 equals squash of uniform coupling sum") {
    const int B = 1, N = 3, C = 4, D = 2;
    Tensor uhat({B, N, C, D});
    Rng rng(11);
    rng.fill_uniform(uhat, -1.0, 1.0);
    Var v = dynamic_routing(leaf(uhat), 1);
    for (int j = 0; j < C; ++j) {
        double s[2] = {0, 0};
        for (int i = 0; i < N; ++i)
            for (int d = 0; d < D; ++d)
                s[d] += static_cast<double>(uhat[((0 * N + i) * C + j) * D + d]) / C;
        const double n2 = s[0] * s[0] + s[1] * s[1];
        const double coef = std::sqrt(n2) / (1.0 + n2);
        for (int d = 0; d < D; ++d)
            CHECK_NEAR(static_cast<double>(v->val[j * D + d]), coef * s[d], 1e-6);
    }
}

TEST_CASE("routing of all-zero predictions is zero at any iteration count") {
    for (int iters : {1, 3, 7}) {
        Var v = dynamic_routing(leaf(Tensor({2, 3, 2, 2})), iters);
        for (auto x : v->val.data) CHECK(x == real(0));
    }
}

TEST_CASE("softmax rows lie on the simplex") {
    Tensor logits({4, 6, 3});
    Rng rng(3);
    rng.fill_uniform(logits, -5.0, 5.0);
    Var c = softmax_lastdim(leaf(logits));
    for (int r = 0; r < 24; ++r) {
        double s = 0;
        for (int j = 0; j < 3; ++j) {
            const real x = c->val[r * 3 + j];
            CHECK(x >= real(0));
            s += static_cast<double>(x);
        }
        CHECK_NEAR(s, 1.0, 1e-6);
    }
}

TEST_CASE("routing output capsule norms are below 1") {
    Tensor uhat({1, 5, 3, 4});
    Rng rng(5);
    rng.fill_uniform(uhat, -3.0, 3.0);
    Var v = dynamic_routing(leaf(uhat), 3);
    for (int j = 0; j < 3; ++j) {
        double n2 = 0;
        for (int d = 0; d < 4; ++d) n2 += static_cast<double>(v->val[j * 4 + d]) * v->val[j * 4 + d];
        CHECK(std::sqrt(n2) < 1.0);
    }
}

// -------------------------------------------------------------------- KL ---

TEST_CASE("KL is zero at the prior and 0.5 for mu=1, sigma=1, k=1") {
    Var kl0 = kl_per_class(leaf(Tensor({1, 1, 4})), leaf(Tensor({1, 1, 4})));
    CHECK_NEAR(kl0->val[0], 0.0, 1e-7);

    Var kl1 = kl_per_class(leaf(make_tensor({1, 1, 1}, {real(1)})), leaf(Tensor({1, 1, 1})));
    CHECK_NEAR(kl1->val[0], 0.5, 1e-6);
}

TEST_CASE("KL is nonnegative and positive away from the prior") {
    Rng rng(17);
    Tensor mu({2, 3, 4}), lv({2, 3, 4});
    rng.fill_uniform(mu, -2.0, 2.0);
    rng.fill_uniform(lv, -1.5, 1.5);
    Var kl = kl_per_class(leaf(mu), leaf(lv));
    for (auto x : kl->val.data) CHECK(x >= real(0));
    CHECK(kl->val[0] > real(0));
}

TEST_CASE("KL closed form matches a 1e6-sample Monte-Carlo oracle within 1%") {
    // E_q[log q(z) - log p(z)] estimated with an independent generator
    // (std::mt19937_64; the library RNG is never used here).
    const int k = 4;
    const double mu[k] = {0.7, -1.1, 0.3, 1.9};
    const double logvar[k] = {0.4, -0.8, 0.0, -1.2};

    Tensor tmu({1, 1, k}), tlv({1, 1, k});
    for (int j = 0; j < k; ++j) {
        tmu[j] = static_cast<real>(mu[j]);
        tlv[j] = static_cast<real>(logvar[j]);
    }
    const double closed = static_cast<double>(kl_per_class(leaf(tmu), leaf(tlv))->val[0]);

    std::mt19937_64 gen(20240817);
    std::normal_distribution<double> nd(0.0, 1.0);
    const int M = 1'000'000;
    double acc = 0.0;
    for (int s = 0; s < M; ++s) {
        double term = 0.0;
        for (int j = 0; j < k; ++j) {
            const double sd = std::exp(0.5 * logvar[j]);
            const double e = nd(gen);
            const double z = mu[j] + sd * e;
            // log q - log p = -0.5 logvar - e^2/2 + z^2/2
            term += -0.5 * logvar[j] - 0.5 * e * e + 0.5 * z * z;
        }
        acc += term;
    }
    const double mc = acc / M;
    CHECK(closed == doctest::Approx(mc).epsilon(0.01));
}

// --------------------------------------------------- reparameterization ---

TEST_CASE("reparameterize sample statistics: mean within 0.02, variance within 0.05") {
    const int draws = 100'000, k = 16;
    Tensor mu({1, 1, k}), lv({1, 1, k});  // mu = 0, sigma = 1
    Rng rng(123);
    double sum = 0, sumsq = 0;
    for (int s = 0; s < draws / k; ++s) {
        Tensor eps({1, 1, k});
        rng.fill_normal(eps);
        Var z = reparameterize_sample(leaf(mu), leaf(lv), eps);
        for (auto x : z->val.data) {
            sum += static_cast<double>(x);
            sumsq += static_cast<double>(x) * x;
        }
    }
    const int n = (draws / k) * k;
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("degenerate variance collapses the sample onto mu") {
    Tensor mu = make_tensor({1, 1, 2}, {real(0.3), real(-0.7)});
    Tensor lv({1, 1, 2}, real(-80));  // sigma ~ 0
    Tensor eps({1, 1, 2}, real(5));
    Var z = reparameterize_sample(leaf(mu), leaf(lv), eps);
    CHECK_NEAR(z->val[0], 0.3, 1e-6);
    CHECK_NEAR(z->val[1], -0.7, 1e-6);
}

TEST_CASE("eval mode is deterministic: latent capsules equal the posterior mean") {
    IBCapsNet model(tiny_arch(), ModelVariantFlags::squash_kl(), 99);
    Var u = leaf(tiny_primary(3, 8));
    Rng r1(100), r2(200);  // different seeds must not matter in eval mode
    ForwardOut a = model.forward_from_primary(u, nullptr, Mode::Eval, &r1, false, false);
    ForwardOut b = model.forward_from_primary(u, nullptr, Mode::Eval, &r2, false, false);
    REQUIRE(a.activities->val.numel() == b.activities->val.numel());
    for (std::int64_t i = 0; i < a.activities->val.numel(); ++i)
        CHECK(a.activities->val[i] == b.activities->val[i]);  // bit-exact
    for (std::int64_t i = 0; i < a.latent->val.numel(); ++i)
        CHECK(a.latent->val[i] == a.post_mu->val[i]);  // mean mode returns mu exactly
}

// ----------------------------------------------------------- margin loss ---

TEST_CASE("margin loss hand values") {
    const MarginLossConfig m;
    // satisfied margins -> exactly 0
    Var a0 = leaf(make_tensor({1, 3}, {real(0.1), real(0.9), real(0.1)}));
    CHECK(margin_loss_op(a0, {1}, m.m_plus, m.m_minus, m.lambda_neg)->val[0] == real(0));
    // all-zero activities -> (0.9)^2 = 0.81
    Var a1 = leaf(Tensor({1, 3}));
    CHECK_NEAR(margin_loss_op(a1, {1}, m.m_plus, m.m_minus, m.lambda_neg)->val[0], 0.81, 1e-6);
    // a_true = 0.5, one negative at 0.6 -> 0.4^2 + 0.5 * 0.5^2 = 0.285
    Var a2 = leaf(make_tensor({1, 3}, {real(0.5), real(0.6), real(0)}));
    CHECK_NEAR(margin_loss_op(a2, {0}, m.m_plus, m.m_minus, m.lambda_neg)->val[0], 0.285, 1e-6);
}

TEST_CASE("margin loss is strictly positive off the satisfied configuration") {
    const MarginLossConfig m;
    Var a = leaf(make_tensor({1, 2}, {real(0.89), real(0.1)}));
    CHECK(margin_loss_op(a, {0}, m.m_plus, m.m_minus, m.lambda_neg)->val[0] > real(0));
    Var b = leaf(make_tensor({1, 2}, {real(0.9), real(0.11)}));
    CHECK(margin_loss_op(b, {0}, m.m_plus, m.m_minus, m.lambda_neg)->val[0] > real(0));
}

TEST_CASE("margin loss averages over the batch") {
    const MarginLossConfig m;
    Var one = leaf(Tensor({1, 2}));
    Var two = leaf(Tensor({2, 2}));
    const real l1 = margin_loss_op(one, {0}, m.m_plus, m.m_minus, m.lambda_neg)->val[0];
    const real l2 = margin_loss_op(two, {0, 0}, m.m_plus, m.m_minus, m.lambda_neg)->val[0];
    CHECK_NEAR(l1, static_cast<double>(l2), 1e-7);
}

// -------------------------------------------------------- composite loss ---

TEST_CASE("composite loss components recombine exactly and degenerate cleanly") {
    IBCapsNet model(tiny_arch(), ModelVariantFlags::full(), 4);
    const int B = 2;
    Var u = leaf(tiny_primary(B, 21));
    std::vector<int> labels{0, 1};
    Rng rng(5);
    ForwardOut fw = model.forward_from_primary(u, &labels, Mode::Train, &rng);
    Tensor img({B, 16});
    Rng ir(6);
    ir.fill_uniform(img, 0.0, 1.0);

    const MarginLossConfig m;
    LossWeights w;
    w.recon_weight = real(0.0005);
    w.kl_weight = real(1e-3);
    LossOut loss = composite_loss(fw, img, labels, w, m);
    CHECK_NEAR(static_cast<double>(loss.total->val[0]), loss.cls + 0.0005 * loss.recon + 1e-3 * loss.kl, 1e-6);
    CHECK(loss.recon > 0.0);
    CHECK(loss.kl > 0.0);

    // beta = 0, lambda = 0 -> total equals the margin loss
    LossWeights zero;
    zero.recon_weight = real(0);
    zero.kl_weight = real(0);
    LossOut bare = composite_loss(fw, img, labels, zero, m);
    CHECK(bare.total->val[0] ==
          margin_loss_op(fw.activities, labels, m.m_plus, m.m_minus, m.lambda_neg)->val[0]);

    // perfect reconstruction -> recon component 0
    Tensor perfect({B, 16});
    perfect.data = fw.recon->val.data;
    LossOut pr = composite_loss(fw, perfect, labels, w, m);
    CHECK_NEAR(pr.recon, 0.0, 1e-10);
}

// ------------------------------------------------------- model structure ---

TEST_CASE("CapsNet MNIST parameter count is exactly 8,215,568 and decomposes") {
    CapsNet model(ArchConfig::mnist(), 1);
    CHECK(model.params.count() == 8'215'568);
    CHECK(model.params.count_prefix("stem.") == 5'329'664);
    CHECK(model.params.count_prefix("routing.") == 1'474'560);  // 1152*8*(10*16)
    CHECK(model.params.count_prefix("decoder.") == 1'411'344);  // 160->512->1024->784
}

TEST_CASE("IBCapsNet MNIST parameter count is within 5% of 7,832,929") {
    IBCapsNet model(ArchConfig::mnist(), ModelVariantFlags::full(), 1);
    const double target = 7'832'929.0;
    const double delta = (static_cast<double>(model.params.count()) - target) / target;
    CHECK(std::abs(delta) <= 0.05);
}

TEST_CASE("parameter counting basics") {
    ParamStore empty;
    CHECK(empty.count() == 0);
    ParamStore ps;
    Rng rng(1);
    Linear lin(ps, "l", 7, 5, rng);
    CHECK(ps.count() == 7 * 5 + 5);
}

TEST_CASE("conv stem arithmetic: 1152 primary capsules at 28x28, 2048 at 32x32") {
    CHECK(ArchConfig::mnist().derived_num_primary() == 1152);
    CHECK(ArchConfig::side32(3).derived_num_primary() == 2048);
    CHECK(ArchConfig::mnist().primary_grid() == 6);
    CHECK(ArchConfig::side32(1).primary_grid() == 8);
    CHECK(ArchConfig::mnist().pixels() == 784);
    ArchConfig c32 = ArchConfig::side32(3);
    CHECK(c32.pixels() == 3072);  // CIFAR decoder output width
}

TEST_CASE("primary reshape groups channels into d-sized blocks") {
    // [B=1, O=4, 2, 2], d=2 -> N = (4/2)*2*2 = 8 capsules of dim 2.
    // value = channel*100 + spatial to track the mapping
    Tensor x({1, 4, 2, 2});
    for (int c = 0; c < 4; ++c)
        for (int p = 0; p < 4; ++p) x[c * 4 + p] = static_cast<real>(c * 100 + p);
    Var u = primary_reshape(leaf(x), 2);
    REQUIRE(u->val.shape == std::vector<int>{1, 8, 2});
    // capsule (block=0, position p): components from channels 0 and 1 at p
    for (int p = 0; p < 4; ++p) {
        CHECK(u->val[(p)*2 + 0] == real(0 * 100 + p));
        CHECK(u->val[(p)*2 + 1] == real(1 * 100 + p));
    }
    // block 1 -> channels 2 and 3
    for (int p = 0; p < 4; ++p) {
        CHECK(u->val[(4 + p) * 2 + 0] == real(2 * 100 + p));
        CHECK(u->val[(4 + p) * 2 + 1] == real(3 * 100 + p));
    }
}

TEST_CASE("class heads share no parameters: perturbing head c moves only class c") {
    IBCapsNet model(tiny_arch(), ModelVariantFlags::squash_kl(), 31);
    Var u = leaf(tiny_primary(2, 14));
    ForwardOut before = model.forward_from_primary(u, nullptr, Mode::Eval, nullptr, false, false);

    Var w = model.params.find("head1.fc2.weight");
    for (auto& x : w->val.data) x += real(0.25);
    ForwardOut after = model.forward_from_primary(u, nullptr, Mode::Eval, nullptr, false, false);

    const int C = 2, k = 2;
    for (int b = 0; b < 2; ++b)
        for (int j = 0; j < k; ++j) {
            CHECK(before.post_mu->val[(b * C + 0) * k + j] ==
                  after.post_mu->val[(b * C + 0) * k + j]);
            CHECK(before.post_logvar->val[(b * C + 0) * k + j] ==
                  after.post_logvar->val[(b * C + 0) * k + j]);
        }
    bool moved = false;
    for (int b = 0; b < 2; ++b)
        for (int j = 0; j < k; ++j)
            moved |= before.post_mu->val[(b * C + 1) * k + j] !=
                     after.post_mu->val[(b * C + 1) * k + j];
    CHECK(moved);
}

TEST_CASE("zero latent through a zero decoder gives sigmoid(0) = 0.5 everywhere") {
    ParamStore ps;
    Rng rng(2);
    Decoder dec(ps, "d", 2, tiny_arch(), rng);
    for (auto& e : ps.entries) e.var->val.fill(real(0));
    Var out = dec.forward(leaf(Tensor({1, 2})));
    for (auto x : out->val.data) CHECK_NEAR(x, 0.5, 1e-7);
}

TEST_CASE("capsule means: all-ones capsule has mean 1, zeros give zero context") {
    Tensor u({1, 2, 8});
    for (int j = 0; j < 8; ++j) u[j] = real(1);  // capsule 0 all ones
    Var m = capsule_means(leaf(u));
    CHECK_NEAR(m->val[0], 1.0, 1e-7);
    CHECK_NEAR(m->val[1], 0.0, 1e-7);
}

TEST_CASE("head output width is 2k with KL and k without") {
    ArchConfig a = tiny_arch();
    IBCapsNet with_kl(a, ModelVariantFlags::squash_kl(), 3);
    CHECK(with_kl.params.find("head0.fc2.weight")->val.dim(0) == 2 * a.latent_dim);
    IBCapsNet without(a, ModelVariantFlags::multi(), 3);
    CHECK(without.params.find("head0.fc2.weight")->val.dim(0) == a.latent_dim);
}

TEST_CASE("variant flags are cumulative and validated") {
    CHECK_THROWS_AS(ModelVariantFlags({false, true, false}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(ModelVariantFlags({true, false, true}).validate(), std::invalid_argument);
    CHECK(ModelVariantFlags::baseline().name() == "baseline");
    CHECK(ModelVariantFlags::multi().name() == "multi_classifier");
    CHECK(ModelVariantFlags::squash_kl().name() == "squash_kl");
    CHECK(ModelVariantFlags::full().name() == "full");
}

TEST_CASE("select_capsule semantics: argmax, documented tie-break, truth masking") {
    Tensor act = make_tensor({3, 3}, {real(0.1), real(0.8), real(0.3),   // argmax 1
                                      real(0.5), real(0.5), real(0.2),   // tie -> lowest index 0
                                      real(0.2), real(0.3), real(0.9)}); // argmax 2
    std::vector<int> labels{2, 1, 0};
    CHECK(select_indices(act, nullptr, Mode::Eval, false) == std::vector<int>{1, 0, 2});
    // train + mask_with_truth -> labels win even when argmax disagrees
    CHECK(select_indices(act, &labels, Mode::Train, true) == labels);
    // missing labels in that mode -> error
    CHECK_THROWS_AS(select_indices(act, nullptr, Mode::Train, true), std::invalid_argument);
}

TEST_CASE("argmax invariance: positive scaling never changes the selection") {
    Rng rng(77);
    Tensor act({8, 5});
    rng.fill_uniform(act, 0.0, 1.0);
    auto base = select_indices(act, nullptr, Mode::Eval, false);
    for (double s : {0.01, 0.5, 3.0, 1000.0}) {
        Tensor scaled = act;
        for (auto& x : scaled.data) x = static_cast<real>(x * s);
        CHECK(select_indices(scaled, nullptr, Mode::Eval, false) == base);
    }
}

TEST_CASE("gradient flows only into the selected capsule") {
    Tensor z({1, 3, 2});
    Rng rng(9);
    rng.fill_uniform(z, -1.0, 1.0);
    Var zv = leaf(z, /*requires_grad=*/true);
    Var sel = select_class(zv, {1});
    Var loss = sse_loss(sel, Tensor({1, 2}));
    backward(loss);
    for (int c = 0; c < 3; ++c)
        for (int j = 0; j < 2; ++j) {
            const real g = zv->grad[c * 2 + j];
            if (c == 1)
                CHECK(g != real(0));
            else
                CHECK(g == real(0));
        }
}

TEST_CASE("identically seeded models train bit-identically") {
    auto run = [] {
        IBCapsNet model(tiny_arch(), ModelVariantFlags::full(), 7);
        Adam opt;
        ParamStore& ps = model.params;
        opt.init(ps);
        Tensor img({2, 16});
        Rng ir(3);
        ir.fill_uniform(img, 0.0, 1.0);
        std::vector<int> labels{0, 1};
        const MarginLossConfig m;
        LossWeights w;
        std::vector<real> losses;
        for (int step = 0; step < 5; ++step) {
            Rng eps(40 + static_cast<std::uint64_t>(step));
            ps.zero_grads();
            ForwardOut fw =
                model.forward_from_primary(leaf(tiny_primary(2, 50)), &labels, Mode::Train, &eps);
            LossOut loss = composite_loss(fw, img, labels, w, m);
            backward(loss.total);
            opt.step(ps, 1e-3);
            losses.push_back(loss.total->val[0]);
        }
        return losses;
    };
    const auto a = run();
    const auto b = run();
    CHECK(a == b);  // bit-identical loss curve on the same build
    CHECK(a.front() != a.back());  // it actually trained
}

// ------------------------------------------------------------ corruption ---

TEST_CASE("severity zero is a bit-exact identity for every kind") {
    Tensor img({1, 6, 6});
    Rng rng(2);
    rng.fill_uniform(img, 0.0, 1.0);
    for (CorruptionKind k : all_corruption_kinds()) {
        Tensor out = apply_corruption(img, {k, 0.0, 123}, 5);
        CHECK(out.data == img.data);
    }
}

TEST_CASE("corrupted output stays within [0, 1] for every kind and severity") {
    Tensor img({3, 5, 5});
    Rng rng(4);
    rng.fill_uniform(img, 0.0, 1.0);
    for (CorruptionKind k : all_corruption_kinds())
        for (double sev : severity_grid(k)) {
            Tensor out = apply_corruption(img, {k, sev, 9}, 0);
            for (auto v : out.data) {
                CHECK(v >= real(0));
                CHECK(v <= real(1));
            }
        }
}

TEST_CASE("corruption is deterministic in (seed, sample index) and varies across indices") {
    Tensor img({1, 8, 8});
    Rng rng(6);
    rng.fill_uniform(img, 0.0, 1.0);
    const CorruptionSpec spec{CorruptionKind::ClampedAdditive, 0.5, 77};
    Tensor a = apply_corruption(img, spec, 3);
    Tensor b = apply_corruption(img, spec, 3);
    CHECK(a.data == b.data);
    Tensor c = apply_corruption(img, spec, 4);
    CHECK(a.data != c.data);
    Tensor d = apply_corruption(img, {spec.kind, spec.severity, 78}, 3);
    CHECK(a.data != d.data);
}

TEST_CASE("clamped additive stays within severity of the input") {
    Tensor img({1, 10, 10}, real(0.5));
    const double sev = 0.3;
    Tensor out = apply_corruption(img, {CorruptionKind::ClampedAdditive, sev, 11}, 0);
    double mean_shift = 0;
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        CHECK(std::abs(static_cast<double>(out[i]) - 0.5) <= sev + 1e-6);
        mean_shift += static_cast<double>(out[i]) - 0.5;
    }
    CHECK(std::abs(mean_shift / static_cast<double>(out.numel())) < 0.06);  // ~U(-sev, sev)
}

TEST_CASE("multiplicative noise scales relative to the pixel and keeps zeros") {
    Tensor img({1, 8, 8});
    Rng rng(8);
    rng.fill_uniform(img, 0.0, 1.0);
    img[0] = real(0);
    const double sev = 0.4;
    Tensor out = apply_corruption(img, {CorruptionKind::Multiplicative, sev, 13}, 2);
    CHECK(out[0] == real(0));  // x * (1 + eps) with x = 0
    for (std::int64_t i = 0; i < out.numel(); ++i)
        CHECK(std::abs(static_cast<double>(out[i]) - static_cast<double>(img[i])) <=
              sev * static_cast<double>(img[i]) + 1e-6);
}

TEST_CASE("salt and pepper flips whole pixels at roughly the severity rate") {
    Tensor img({3, 32, 32}, real(0.5));
    const double p = 0.3;
    Tensor out = apply_corruption(img, {CorruptionKind::SaltPepper, p, 21}, 0);
    const int HW = 32 * 32;
    int flipped = 0, salt = 0;
    for (int q = 0; q < HW; ++q) {
        const real v0 = out[q], v1 = out[HW + q], v2 = out[2 * HW + q];
        CHECK(v0 == v1);  // whole-pixel: all channels identical
        CHECK(v1 == v2);
        if (v0 != real(0.5)) {
            CHECK((v0 == real(0) || v0 == real(1)));
            ++flipped;
            salt += (v0 == real(1));
        }
    }
    // binomial(1024, 0.3): ~307 +- 4.6 sd; allow ~5 sd
    CHECK(std::abs(flipped - p * HW) < 75.0);
    CHECK(std::abs(static_cast<double>(salt) / flipped - 0.5) < 0.1);  // 50/50 salt vs pepper
}

TEST_CASE("blur sigma=1 kernel has size 7 and matches a dense convolution oracle") {
    const double sigma = 1.0;
    const int radius = 3;  // ceil(3 * sigma)
    // recompute the separable kernel independently
    double k1[7], ksum = 0;
    for (int i = -radius; i <= radius; ++i) {
        k1[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        ksum += k1[i + radius];
    }
    for (auto& v : k1) v /= ksum;
    // center weight = pdf(0)/sum(pdf) = 0.3989.../(0.3989... * ksum); the
    // 1/sqrt(2*pi) factors cancel, so it equals 1/ksum
    double pdf_sum = 0;
    for (int i = -radius; i <= radius; ++i)
        pdf_sum += 0.39894228040143268 * std::exp(-0.5 * i * i);
    CHECK(k1[radius] == doctest::Approx(0.39894228040143268 / pdf_sum).epsilon(1e-9));

    Tensor img({1, 9, 9});
    Rng rng(10);
    rng.fill_uniform(img, 0.0, 1.0);
    Tensor out = apply_corruption(img, {CorruptionKind::GaussianBlur, sigma, 0}, 0);

    auto reflect = [](int i, int n) {
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - 1 - i;
        }
        return i;
    };
    // dense 7x7 2-D convolution oracle (outer product of the 1-D kernel)
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 9; ++x) {
            double acc = 0;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx)
                    acc += k1[dy + radius] * k1[dx + radius] *
                           static_cast<double>(img[reflect(y + dy, 9) * 9 + reflect(x + dx, 9)]);
            CHECK_NEAR(static_cast<double>(out[y * 9 + x]), acc, 1e-6);
        }
}

TEST_CASE("blur is linear and preserves constants") {
    Tensor a({1, 6, 6}), b({1, 6, 6});
    Rng rng(12);
    rng.fill_uniform(a, 0.0, 0.4);
    rng.fill_uniform(b, 0.0, 0.4);
    Tensor sum({1, 6, 6});
    for (std::int64_t i = 0; i < 36; ++i) sum[i] = a[i] + b[i];
    const CorruptionSpec spec{CorruptionKind::GaussianBlur, 1.5, 0};
    Tensor ba = apply_corruption(a, spec, 0);
    Tensor bb = apply_corruption(b, spec, 0);
    Tensor bs = apply_corruption(sum, spec, 0);
    for (std::int64_t i = 0; i < 36; ++i)
        CHECK_NEAR(static_cast<double>(bs[i]), static_cast<double>(ba[i]) + static_cast<double>(bb[i]), 1e-5);

    Tensor flat({1, 6, 6}, real(0.37));
    Tensor bf = apply_corruption(flat, spec, 0);
    for (auto v : bf.data) CHECK_NEAR(static_cast<double>(v), 0.37, 1e-6);
}

TEST_CASE("corruption spec text round-trips and rejects malformed input") {
    CorruptionSpec s = CorruptionSpec::parse("salt_pepper:0.30:42");
    CHECK(s.kind == CorruptionKind::SaltPepper);
    CHECK(s.severity == doctest::Approx(0.3));
    CHECK(s.seed == 42);
    CHECK(s.to_string() == "salt_pepper:0.30:42");
    CHECK(CorruptionSpec::parse(s.to_string()).to_string() == s.to_string());

    CHECK_THROWS_AS(CorruptionSpec::parse("sand:0.3:1"), std::invalid_argument);
    CHECK_THROWS_AS(CorruptionSpec::parse("salt_pepper:0.3"), std::invalid_argument);
    CHECK_THROWS_AS(CorruptionSpec::parse("clamped_additive:1.5:0"), std::invalid_argument);
    CHECK_THROWS_AS(CorruptionSpec::parse("gaussian_blur:3.5:0"), std::invalid_argument);
    // blur grows to 3.0 where noise stops at 0.9
    CHECK_NOTHROW(CorruptionSpec::parse("gaussian_blur:3.00:0"));
}

TEST_CASE("severity grids match the evaluation protocol") {
    const auto noise = severity_grid(CorruptionKind::ClampedAdditive);
    REQUIRE(noise.size() == 10);
    CHECK(noise.front() == 0.0);
    CHECK(noise.back() == doctest::Approx(0.9));
    const auto blur = severity_grid(CorruptionKind::GaussianBlur);
    REQUIRE(blur.size() == 7);
    CHECK(blur.back() == doctest::Approx(3.0));
}

// ------------------------------------------------------------- data I/O ---

namespace {

std::vector<std::uint8_t> golden_idx_images() {
    // magic 0x00000803, 2 images of 2x2
    std::vector<std::uint8_t> b = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2};
    for (std::uint8_t v : {10, 20, 30, 40, 50, 60, 70, 80}) b.push_back(v);
    return b;
}

std::vector<std::uint8_t> golden_idx_labels() {
    return {0, 0, 8, 1, 0, 0, 0, 2, 7, 3};
}

}  // namespace

TEST_CASE("IDX parser reads the golden fixture") {
    IdxData img = parse_idx(golden_idx_images());
    CHECK(img.dims == std::vector<int>{2, 2, 2});
    CHECK(img.data == std::vector<std::uint8_t>{10, 20, 30, 40, 50, 60, 70, 80});
    IdxData lab = parse_idx(golden_idx_labels());
    CHECK(lab.dims == std::vector<int>{2});
    CHECK(lab.data == std::vector<std::uint8_t>{7, 3});
}

TEST_CASE("IDX parser error paths") {
    auto bad_magic = golden_idx_images();
    bad_magic[2] = 9;
    CHECK_THROWS_AS(parse_idx(bad_magic), ParseError);

    auto truncated = golden_idx_images();
    truncated.resize(truncated.size() - 3);
    CHECK_THROWS_AS(parse_idx(truncated), ParseError);

    auto trailing = golden_idx_images();
    trailing.push_back(0);
    CHECK_THROWS_AS(parse_idx(trailing), ParseError);

    CHECK_THROWS_AS(parse_idx({0, 0}), ParseError);
    CHECK_THROWS_AS(parse_idx_file("/nonexistent/file"), ParseError);
}

TEST_CASE("CIFAR-10 binary parser reads 3073-byte records") {
    std::vector<std::uint8_t> rec;
    for (int r = 0; r < 2; ++r) {
        rec.push_back(static_cast<std::uint8_t>(r + 3));  // label
        for (int i = 0; i < 3072; ++i) rec.push_back(static_cast<std::uint8_t>((r + i) % 256));
    }
    const std::string path = tmp_path("cifar_test_batch.bin");
    std::ofstream(path, std::ios::binary)
        .write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
    Dataset ds = parse_cifar10_binary({path});
    CHECK(ds.size() == 2);
    CHECK(ds.channels == 3);
    CHECK(ds.height == 32);
    CHECK(ds.labels == std::vector<std::uint8_t>{3, 4});
    CHECK(ds.images[0] == 0);
    CHECK(ds.images[3072 + 0] == 1);

    // truncated record
    rec.pop_back();
    std::ofstream(path, std::ios::binary)
        .write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
    CHECK_THROWS_AS(parse_cifar10_binary({path}), ParseError);
    std::filesystem::remove(path);
}

TEST_CASE("IBDS container round-trips exactly") {
    Dataset ds;
    ds.name = "synthetic";
    ds.num_classes = 4;
    ds.channels = 3;
    ds.height = 5;
    ds.width = 6;
    Rng rng(33);
    for (int i = 0; i < 7 * 3 * 5 * 6; ++i)
        ds.images.push_back(static_cast<std::uint8_t>(rng.below(256)));
    for (int i = 0; i < 7; ++i) ds.labels.push_back(static_cast<std::uint8_t>(rng.below(4)));
    ds.validate();

    const auto bytes = write_raw_container(ds);
    CHECK(bytes[0] == 'I');
    CHECK(bytes[1] == 'B');
    CHECK(bytes[2] == 'D');
    CHECK(bytes[3] == 'S');
    Dataset back = parse_raw_container_bytes(bytes);
    CHECK(back.images == ds.images);
    CHECK(back.labels == ds.labels);
    CHECK(back.channels == 3);
    CHECK(back.num_classes == 4);
    CHECK(write_raw_container(back) == bytes);  // byte-exact re-emission

    auto corrupt = bytes;
    corrupt[0] = 'X';
    CHECK_THROWS_AS(parse_raw_container_bytes(corrupt), ParseError);
    auto short_bytes = bytes;
    short_bytes.pop_back();
    CHECK_THROWS_AS(parse_raw_container_bytes(short_bytes), ParseError);
}

TEST_CASE("unit-interval conversion is value/255") {
    Tensor t = to_unit_interval({0, 255, 51}, {3});
    CHECK(t[0] == real(0));
    CHECK(t[1] == real(1));
    CHECK_NEAR(t[2], 51.0 / 255.0, 1e-7);
}

TEST_CASE("batch iterator: sizes, drop_last, coverage, deterministic shuffle") {
    Dataset ds;
    ds.name = "ten";
    ds.num_classes = 2;
    ds.channels = 1;
    ds.height = 2;
    ds.width = 2;
    ds.images.assign(40, 1);
    for (int i = 0; i < 10; ++i) ds.labels.push_back(static_cast<std::uint8_t>(i % 2));

    auto sizes = [&](bool drop_last) {
        BatchIterator it(ds, 3, 5, true, drop_last);
        std::vector<int> out;
        Batch b;
        while (it.next(b)) out.push_back(static_cast<int>(b.labels.size()));
        return out;
    };
    CHECK(sizes(false) == std::vector<int>{3, 3, 3, 1});
    CHECK(sizes(true) == std::vector<int>{3, 3, 3});

    // same seed -> same order; all indices covered exactly once
    auto order = [&](std::uint64_t seed) {
        BatchIterator it(ds, 3, seed, true, false);
        std::vector<std::int64_t> idx;
        Batch b;
        while (it.next(b)) idx.insert(idx.end(), b.indices.begin(), b.indices.end());
        return idx;
    };
    const auto o1 = order(5), o2 = order(5), o3 = order(6);
    CHECK(o1 == o2);
    CHECK(o1 != o3);
    auto sorted = o1;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<std::int64_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});

    // unshuffled iteration is sequential
    BatchIterator seq(ds, 4, 0, false, false);
    Batch b;
    REQUIRE(seq.next(b));
    CHECK(b.indices == std::vector<std::int64_t>{0, 1, 2, 3});
}

TEST_CASE("one-hot encodes labels") {
    auto v = one_hot({1, 0}, 3);
    CHECK(v == std::vector<real>{0, 1, 0, 1, 0, 0});
}

// ------------------------------------------------------------ checkpoint ---

TEST_CASE("checkpoint container round-trips byte-exactly") {
    CheckpointMeta meta;
    meta.set("model", "ibcapsnet");
    meta.set("epoch", "3");
    meta.set("acc", "0.987");
    std::vector<NamedTensor> tensors;
    Rng rng(44);
    Tensor a({3, 4}), b({5});
    rng.fill_uniform(a, -1.0, 1.0);
    rng.fill_uniform(b, -1.0, 1.0);
    tensors.push_back({"layer.weight", a});
    tensors.push_back({"layer.bias", b});

    const auto bytes = encode_checkpoint(meta, tensors);
    CHECK(bytes[0] == 'I');
    CHECK(bytes[1] == 'B');
    CHECK(bytes[2] == 'C');
    CHECK(bytes[3] == 'P');
    LoadedCheckpoint ck = decode_checkpoint(bytes);
    CHECK(ck.meta.get_or("model", "") == "ibcapsnet");
    CHECK(ck.meta.get_int("epoch") == 3);
    CHECK(ck.meta.get_double("acc") == doctest::Approx(0.987));
    REQUIRE(ck.find("layer.weight") != nullptr);
    CHECK(ck.find("layer.weight")->data == a.data);
    CHECK(ck.find("missing") == nullptr);
    CHECK(encode_checkpoint(ck.meta, ck.tensors) == bytes);  // byte-exact round trip

    const std::string path = tmp_path("roundtrip.ckpt");
    save_checkpoint(path, meta, tensors);
    LoadedCheckpoint fromfile = load_checkpoint(path);
    CHECK(encode_checkpoint(fromfile.meta, fromfile.tensors) == bytes);
    std::filesystem::remove(path);

    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS(decode_checkpoint(bad));
    auto trunc = bytes;
    trunc.resize(trunc.size() / 2);
    CHECK_THROWS(decode_checkpoint(trunc));
}

TEST_CASE("a model survives the checkpoint round trip bit-exactly") {
    ArchConfig a = tiny_arch();
    AnyModel m = AnyModel::create("ibcapsnet", a, ModelVariantFlags::full(), 61);
    CheckpointMeta meta;
    model_meta(m, meta);
    const std::string path = tmp_path("model_roundtrip.ckpt");
    save_checkpoint(path, meta, model_tensors(m));
    AnyModel back = model_from_checkpoint(load_checkpoint(path));
    std::filesystem::remove(path);

    REQUIRE(back.kind == "ibcapsnet");
    REQUIRE(back.params().entries.size() == m.params().entries.size());
    for (std::size_t i = 0; i < m.params().entries.size(); ++i)
        CHECK(back.params().entries[i].var->val.data == m.params().entries[i].var->val.data);

    Var u = leaf(tiny_primary(2, 71));
    ForwardOut fa = m.ib->forward_from_primary(u, nullptr, Mode::Eval, nullptr, false, false);
    ForwardOut fb = back.ib->forward_from_primary(u, nullptr, Mode::Eval, nullptr, false, false);
    CHECK(fa.activities->val.data == fb.activities->val.data);
}

// ----------------------------------------------------------- CSV, images ---

TEST_CASE("sweep CSV has the fixed schema and re-emits byte-identically") {
    std::vector<EvalRecord> recs;
    for (int i = 0; i < 3; ++i) {
        EvalRecord r;
        r.model = i % 2 ? "ibcapsnet:full" : "capsnet";
        r.dataset = "mnist";
        r.corruption = "clamped_additive";
        r.severity = 0.1 * i;
        r.accuracy = 0.9 - 0.1 * i;
        recs.push_back(r);
    }
    const std::string p1 = tmp_path("sweep1.csv"), p2 = tmp_path("sweep2.csv");
    write_sweep_csv(recs, p1);
    write_sweep_csv(recs, p2);
    const auto b1 = read_bytes(p1), b2 = read_bytes(p2);
    CHECK(b1 == b2);
    std::string text(b1.begin(), b1.end());
    CHECK(text.rfind("dataset,kind,severity,model,accuracy\n", 0) == 0);
    CHECK(text.find("mnist,clamped_additive,0.10,ibcapsnet:full,0.800000") != std::string::npos);
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("bench CSV appends rows under one header") {
    const std::string path = tmp_path("bench.csv");
    std::filesystem::remove(path);
    BenchResult r;
    r.model = "capsnet";
    r.phase = "inference";
    r.batch_size = 8;
    r.raw_seconds = {0.5, 0.4, 0.6};
    r.samples = 64;
    finalize_stats(r);
    CHECK(r.median_s == doctest::Approx(0.5));
    CHECK(r.min_s == doctest::Approx(0.4));
    append_bench_csv(path, r);
    append_bench_csv(path, r);
    std::string text;
    {
        const auto b = read_bytes(path);
        text.assign(b.begin(), b.end());
    }
    CHECK(text.find("model,phase") == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);  // header + 2 rows
    std::filesystem::remove(path);
}

TEST_CASE("image writers emit valid magic bytes") {
    std::vector<std::uint8_t> px(16 * 16, 128);
    const std::string png = tmp_path("img.png"), pgm = tmp_path("img.pgm");
    write_image(png, px, 16, 16, 1);
    write_image(pgm, px, 16, 16, 1);
    const auto pb = read_bytes(png);
    REQUIRE(pb.size() > 8);
    CHECK(pb[0] == 0x89);
    CHECK(pb[1] == 'P');
    CHECK(pb[2] == 'N');
    CHECK(pb[3] == 'G');
    const auto gb = read_bytes(pgm);
    CHECK(gb[0] == 'P');
    CHECK(gb[1] == '5');
    // PGM payload is the raw raster; verify content
    std::string header(gb.begin(), gb.begin() + 13);
    CHECK(header == "P5\n16 16\n255\n");
    CHECK(std::equal(gb.begin() + 13, gb.end(), px.begin()));
    std::filesystem::remove(png);
    std::filesystem::remove(pgm);
}

TEST_CASE("reconstruction grid: 5 rows, two model blocks, GT row equals the input") {
    // Randomly initialized models are sufficient: the grid contract is
    // structural, not about reconstruction quality.
    Dataset ds;
    ds.name = "synthetic";
    ds.num_classes = 10;
    ds.channels = 1;
    ds.height = 28;
    ds.width = 28;
    Rng rng(19);
    for (int i = 0; i < 3; ++i) {
        for (int p = 0; p < 784; ++p)
            ds.images.push_back(static_cast<std::uint8_t>(rng.below(256)));
        ds.labels.push_back(static_cast<std::uint8_t>(i));
    }

    AnyModel caps = AnyModel::create("capsnet", ArchConfig::mnist(), ModelVariantFlags::full(), 1);
    AnyModel ib = AnyModel::create("ibcapsnet", ArchConfig::mnist(), ModelVariantFlags::full(), 2);
    GridSpec spec;
    spec.sample_indices = {0, 2};
    const std::string out = tmp_path("grid.pgm");
    emit_reconstruction_grid(caps, ib, ds, spec, out);

    CHECK(grid_row_labels() == std::vector<std::string>{"GT", "Reco", "Clmp", "Gaus", "S&P"});

    const auto gb = read_bytes(out);
    std::string header(gb.begin(), gb.begin() + 2);
    REQUIRE(header == "P5");
    // parse width/height
    int w = 0, h = 0, maxv = 0;
    std::sscanf(reinterpret_cast<const char*>(gb.data()), "P5\n%d %d\n%d\n", &w, &h, &maxv);
    const int pad = 2, gap = 8, W = 28, H = 28, cols = 2, rows = 5;
    CHECK(w == 2 * cols * (W + pad) - pad + gap);
    CHECK(h == rows * (H + pad) - pad);
    // GT row, first column of the left (CapsNet) block equals the input image
    const std::size_t raster0 = gb.size() - static_cast<std::size_t>(w) * h;
    const Tensor gt = ds.image_real(0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int expect = static_cast<int>(
                std::lround(255.0 * static_cast<double>(gt[y * W + x])));
            CHECK(static_cast<int>(gb[raster0 + static_cast<std::size_t>(y) * w + x]) == expect);
        }
    // out-of-range sample index is rejected
    GridSpec bad;
    bad.sample_indices = {99};
    CHECK_THROWS_AS(emit_reconstruction_grid(caps, ib, ds, bad, out), std::out_of_range);
    std::filesystem::remove(out);
    std::filesystem::remove(out + ".legend.txt");

    // legend sidecar names the rows
    emit_reconstruction_grid(caps, ib, ds, spec, out);
    std::ifstream legend(out + ".legend.txt");
    std::string ltext((std::istreambuf_iterator<char>(legend)), std::istreambuf_iterator<char>());
    CHECK(ltext.find("GT") != std::string::npos);
    CHECK(ltext.find("S&P") != std::string::npos);
    std::filesystem::remove(out);
    std::filesystem::remove(out + ".legend.txt");
}

// ------------------------------------------------------- train plumbing ---

TEST_CASE("train config files parse with comments and reject unknown keys") {
    const std::string path = tmp_path("cfg.txt");
    std::ofstream(path) << "dataset=fashion\n"
                        << "model=ibcapsnet # trailing comment\n"
                        << "variant=squash_kl\n"
                        << "# full-line comment\n"
                        << "epochs=7\n"
                        << "beta=0.01\n"
                        << "subset=1000\n";
    TrainConfig cfg = TrainConfig::from_file(path);
    CHECK(cfg.dataset == "fashion");
    CHECK(cfg.variant.name() == "squash_kl");
    CHECK(cfg.epochs == 7);
    CHECK(cfg.beta == doctest::Approx(0.01));
    CHECK(cfg.subset == 1000);
    CHECK(cfg.resolved_beta() == doctest::Approx(0.01));

    std::ofstream(path) << "nonsense=1\n";
    CHECK_THROWS_AS(TrainConfig::from_file(path), std::invalid_argument);
    std::ofstream(path) << "no equals sign\n";
    CHECK_THROWS_AS(TrainConfig::from_file(path), std::runtime_error);
    std::filesystem::remove(path);
}

TEST_CASE("per-dataset beta defaults: 1e-3 for 28x28 sets, 1e-2 for 32x32 sets") {
    TrainConfig cfg;
    cfg.dataset = "mnist";
    CHECK(cfg.resolved_beta() == doctest::Approx(1e-3));
    cfg.dataset = "fashion";
    CHECK(cfg.resolved_beta() == doctest::Approx(1e-3));
    cfg.dataset = "svhn";
    CHECK(cfg.resolved_beta() == doctest::Approx(1e-2));
    cfg.dataset = "cifar10";
    CHECK(cfg.resolved_beta() == doctest::Approx(1e-2));
}

TEST_CASE("average_gain pairs records per severity, excluding severity zero") {
    std::vector<EvalRecord> recs;
    auto push = [&](const std::string& model, double sev, double acc) {
        EvalRecord r;
        r.model = model;
        r.dataset = "mnist";
        r.corruption = "clamped_additive";
        r.severity = sev;
        r.accuracy = acc;
        recs.push_back(r);
    };
    push("capsnet", 0.0, 0.99);
    push("ibcapsnet:full", 0.0, 0.10);  // severity 0 must be excluded
    push("capsnet", 0.3, 0.80);
    push("ibcapsnet:full", 0.3, 0.90);
    push("capsnet", 0.5, 0.60);
    push("ibcapsnet:full", 0.5, 0.80);
    CHECK(average_gain(recs, "clamped_additive", "ibcapsnet:full", "capsnet") ==
          doctest::Approx(0.15));
    CHECK_THROWS_AS(average_gain(recs, "gaussian_blur", "ibcapsnet:full", "capsnet"),
                    std::invalid_argument);
}

TEST_CASE("dataset validation catches inconsistent buffers") {
    Dataset ds;
    ds.name = "bad";
    ds.num_classes = 2;
    ds.channels = 1;
    ds.height = 2;
    ds.width = 2;
    ds.images.assign(8, 0);
    ds.labels = {0, 1, 1};  // 3 labels for 2 images
    CHECK_THROWS(ds.validate());
    ds.labels = {0, 1};
    CHECK_NOTHROW(ds.validate());
    ds.labels = {0, 5};  // label out of range
    CHECK_THROWS(ds.validate());
}
