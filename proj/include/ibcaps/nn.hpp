#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ibcaps/autodiff.hpp"
#include "ibcaps/rng.hpp"

namespace ibcaps {

// Named trainable parameters of one model, in registration order.
struct ParamStore {
    struct Entry {
        std::string name;
        Var var;
    };
    std::vector<Entry> entries;

    Var add(const std::string& name, Tensor init) {
        for (const auto& e : entries)
            if (e.name == name) throw std::logic_error("duplicate parameter: " + name);
        entries.push_back({name, leaf(std::move(init), true)});
        return entries.back().var;
    }
    Var find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return e.var;
        throw std::out_of_range("parameter not found: " + name);
    }
    std::int64_t count() const {
        std::int64_t n = 0;
        for (const auto& e : entries) n += e.var->val.numel();
        return n;
    }
    std::int64_t count_prefix(const std::string& prefix) const {
        std::int64_t n = 0;
        for (const auto& e : entries)
            if (e.name.rfind(prefix, 0) == 0) n += e.var->val.numel();
        return n;
    }
    void zero_grads() {
        for (auto& e : entries) e.var->clear_grad();
    }
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for both dense and conv.
inline Tensor init_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double lim = 1.0 / std::sqrt(static_cast<double>(fan_in));
    rng.fill_uniform(t, -lim, lim);
    return t;
}

struct Linear {
    Var w, b;
    int in = 0, out = 0;

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in_f, int out_f, Rng& rng)
        : in(in_f), out(out_f) {
        w = ps.add(name + ".weight", init_uniform({out_f, in_f}, in_f, rng));
        b = ps.add(name + ".bias", init_uniform({out_f}, in_f, rng));
    }
    Var forward(const Var& x) const { return linear(x, w, b); }
};

struct Conv2d {
    Var w, b;
    int stride = 1;

    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int in_ch, int out_ch, int ksize, int stride_,
           Rng& rng)
        : stride(stride_) {
        const int fan_in = in_ch * ksize * ksize;
        w = ps.add(name + ".weight", init_uniform({out_ch, in_ch, ksize, ksize}, fan_in, rng));
        b = ps.add(name + ".bias", init_uniform({out_ch}, fan_in, rng));
    }
    Var forward(const Var& x) const { return conv2d(x, w, b, stride); }
};

}  // namespace ibcaps
