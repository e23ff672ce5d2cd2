#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "skiptune/tensor.hpp"

namespace testutil {

using skiptune::Shape;
using skiptune::Tensor;

inline Tensor randn(const Shape& shape, std::mt19937_64& rng, bool requires_grad = false, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    std::vector<double> v(skiptune::shape_numel(shape));
    for (double& x : v) x = n(rng);
    return Tensor::from(shape, std::move(v), requires_grad);
}

// Contracts a tensor against fixed random weights so any op can be checked
// through a scalar.
inline Tensor project(const Tensor& out, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    return skiptune::ops::sum(skiptune::ops::mul(out, randn(out.shape(), rng)));
}

struct GradReport {
    double worst_rel = 0.0;
    double worst_abs = 0.0;
};

// Central differences against the tape for every entry of every input.
// fn must rebuild the graph from the given inputs on each call.
inline GradReport gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& fn, std::vector<Tensor> inputs,
                            double step = 1e-5) {
    for (auto& t : inputs) {
        t.zero_grad();
        t.set_requires_grad(true);
    }
    skiptune::backward(fn(inputs));
    GradReport rep;
    for (auto& t : inputs) {
        std::vector<double> a(t.numel(), 0.0);
        if (t.has_grad()) {
            auto g = t.grad();
            a.assign(g.begin(), g.end());
        }
        for (std::size_t i = 0; i < t.numel(); ++i) {
            double f_plus, f_minus;
            {
                skiptune::NoGradGuard ng;
                const double orig = t.data()[i];
                t.mutable_data()[i] = orig + step;
                f_plus = fn(inputs).item();
                t.mutable_data()[i] = orig - step;
                f_minus = fn(inputs).item();
                t.mutable_data()[i] = orig;
            }
            const double numeric = (f_plus - f_minus) / (2.0 * step);
            const double diff = std::abs(numeric - a[i]);
            const double denom = std::max({std::abs(numeric), std::abs(a[i]), 1e-3});
            rep.worst_abs = std::max(rep.worst_abs, diff);
            rep.worst_rel = std::max(rep.worst_rel, diff / denom);
        }
    }
    return rep;
}

}  // namespace testutil
