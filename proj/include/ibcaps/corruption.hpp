#pragma once

#include <string>
#include <vector>

#include "ibcaps/rng.hpp"
#include "ibcaps/tensor.hpp"

namespace ibcaps {

enum class CorruptionKind { ClampedAdditive, Multiplicative, GaussianBlur, SaltPepper };

const char* corruption_name(CorruptionKind k);
CorruptionKind corruption_from_name(const std::string& name);
std::vector<CorruptionKind> all_corruption_kinds();

// Noise severity in [0, 0.9]; blur sigma in [0, 3]. The seed fully determines
// the transform; per-sample streams are derived from (seed, sample_index) so a
// sample's corruption does not depend on batch composition.
struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::ClampedAdditive;
    double severity = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
    std::string to_string() const;               // "kind:severity:seed"
    static CorruptionSpec parse(const std::string& text);
};

// image: [ch, H, W] with values in [0, 1]. sample_index selects the
// per-sample random stream.
Tensor apply_corruption(const Tensor& image, const CorruptionSpec& spec,
                        std::uint64_t sample_index);

// Evaluation sweep grids: noise {0.0 .. 0.9 step .1}, blur {0.0 .. 3.0 step .5}.
std::vector<double> severity_grid(CorruptionKind kind);

}  // namespace ibcaps
