#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ibcaps {

#ifndef IBCAPS_REAL
#define IBCAPS_REAL float
#endif
using real = IBCAPS_REAL;

// Dense row-major tensor. Shape is dynamic; storage is a flat vector.
struct Tensor {
    std::vector<int> shape;
    std::vector<real> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), real(0)) {}
    Tensor(std::vector<int> s, real fill) : shape(std::move(s)), data(count(shape), fill) {}
    Tensor(std::vector<int> s, std::vector<real> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != count(shape))
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int v : s) {
            if (v < 0) throw std::invalid_argument("Tensor: negative dim");
            n *= v;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(shape.size()); }
    real* ptr() { return data.data(); }
    const real* ptr() const { return data.data(); }
    real& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    real operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(real v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (real v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

}  // namespace ibcaps
