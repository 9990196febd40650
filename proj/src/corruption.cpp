#include "ibcaps/corruption.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace ibcaps {

const char* corruption_name(CorruptionKind k) {
    switch (k) {
        case CorruptionKind::ClampedAdditive: return "clamped_additive";
        case CorruptionKind::Multiplicative: return "multiplicative";
        case CorruptionKind::GaussianBlur: return "gaussian_blur";
        case CorruptionKind::SaltPepper: return "salt_pepper";
    }
    throw std::logic_error("corruption_name: bad kind");
}

CorruptionKind corruption_from_name(const std::string& name) {
    for (CorruptionKind k : all_corruption_kinds())
        if (name == corruption_name(k)) return k;
    throw std::invalid_argument("unknown corruption kind: " + name);
}

std::vector<CorruptionKind> all_corruption_kinds() {
    return {CorruptionKind::ClampedAdditive, CorruptionKind::Multiplicative,
            CorruptionKind::GaussianBlur, CorruptionKind::SaltPepper};
}

void CorruptionSpec::validate() const {
    const double hi = kind == CorruptionKind::GaussianBlur ? 3.0 : 0.9;
    if (severity < 0.0 || severity > hi)
        throw std::invalid_argument(std::string("corruption severity out of range for ") +
                                    corruption_name(kind) + ": " + std::to_string(severity));
}

std::string CorruptionSpec::to_string() const {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s:%.2f:%llu", corruption_name(kind), severity,
                  static_cast<unsigned long long>(seed));
    return buf;
}

CorruptionSpec CorruptionSpec::parse(const std::string& text) {
    const auto p1 = text.find(':');
    const auto p2 = text.find(':', p1 == std::string::npos ? p1 : p1 + 1);
    if (p1 == std::string::npos || p2 == std::string::npos)
        throw std::invalid_argument("corruption spec must be kind:severity:seed, got: " + text);
    CorruptionSpec s;
    s.kind = corruption_from_name(text.substr(0, p1));
    s.severity = std::stod(text.substr(p1 + 1, p2 - p1 - 1));
    s.seed = std::stoull(text.substr(p2 + 1));
    s.validate();
    return s;
}

std::vector<double> severity_grid(CorruptionKind kind) {
    std::vector<double> g;
    if (kind == CorruptionKind::GaussianBlur) {
        for (int i = 0; i <= 6; ++i) g.push_back(0.5 * i);
    } else {
        for (int i = 0; i <= 9; ++i) g.push_back(0.1 * i);
    }
    return g;
}

namespace {

inline real clamp01(double v) {
    return static_cast<real>(v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v));
}

Tensor blur(const Tensor& image, double sigma) {
    if (sigma == 0.0) return image;
    const int ch = image.dim(0), H = image.dim(1), W = image.dim(2);
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kern(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kern[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += kern[static_cast<std::size_t>(i + radius)];
    }
    for (auto& v : kern) v /= sum;

    auto reflect = [](int i, int n) {
        // reflect-101-style without repeating the edge sample twice would
        // darken constants at n==1; plain mirror keeps constants exact
        while (i < 0 || i >= n) {
            if (i < 0) i = -i - 1;
            if (i >= n) i = 2 * n - 1 - i;
        }
        return i;
    };

    Tensor tmp(image.shape), out(image.shape);
    for (int c = 0; c < ch; ++c) {
        const real* src = image.ptr() + static_cast<std::int64_t>(c) * H * W;
        real* mid = tmp.ptr() + static_cast<std::int64_t>(c) * H * W;
        real* dst = out.ptr() + static_cast<std::int64_t>(c) * H * W;
        // horizontal
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kern[static_cast<std::size_t>(i + radius)] *
                           static_cast<double>(src[y * W + reflect(x + i, W)]);
                mid[y * W + x] = static_cast<real>(acc);
            }
        // vertical
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kern[static_cast<std::size_t>(i + radius)] *
                           static_cast<double>(mid[reflect(y + i, H) * W + x]);
                dst[y * W + x] = static_cast<real>(acc);
            }
    }
    return out;
}

}  // namespace

Tensor apply_corruption(const Tensor& image, const CorruptionSpec& spec,
                        std::uint64_t sample_index) {
    spec.validate();
    if (image.rank() != 3) throw std::invalid_argument("apply_corruption: expected [ch, H, W]");
    if (spec.severity == 0.0) return image;  // identity, bit-exact
    Rng rng(spec.seed, sample_index);

    switch (spec.kind) {
        case CorruptionKind::ClampedAdditive: {
            Tensor out(image.shape);
            for (std::int64_t i = 0; i < image.numel(); ++i)
                out[i] = clamp01(static_cast<double>(image[i]) +
                                 spec.severity * rng.uniform(-1.0, 1.0));
            return out;
        }
        case CorruptionKind::Multiplicative: {
            Tensor out(image.shape);
            for (std::int64_t i = 0; i < image.numel(); ++i)
                out[i] = clamp01(static_cast<double>(image[i]) *
                                 (1.0 + spec.severity * rng.uniform(-1.0, 1.0)));
            return out;
        }
        case CorruptionKind::GaussianBlur:
            return blur(image, spec.severity);
        case CorruptionKind::SaltPepper: {
            Tensor out = image;
            const int ch = image.dim(0), HW = image.dim(1) * image.dim(2);
            // whole-pixel replacement: all channels get the same 0/1 value
            for (int p = 0; p < HW; ++p) {
                if (rng.uniform() < spec.severity) {
                    const real v = rng.uniform() < 0.5 ? real(0) : real(1);
                    for (int c = 0; c < ch; ++c) out[static_cast<std::int64_t>(c) * HW + p] = v;
                }
            }
            return out;
        }
    }
    throw std::logic_error("apply_corruption: bad kind");
}

}  // namespace ibcaps
