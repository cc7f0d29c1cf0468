#pragma once

// Central finite-difference oracle. Independent of the backward rules: it
// only evaluates the forward function.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "relkd/rng.hpp"
#include "relkd/tensor.hpp"

namespace relkd::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst; // "<param>[index] analytic=... numeric=..."
    std::size_t checked = 0;
};

// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true value is
// at the finite-difference noise level (~1e-10 for h = 1e-5) from dominating.
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct NamedLeaf {
    std::string name;
    Tensor<double>* tensor;
};

// Compares analytic gradients of `loss_fn` against central differences for
// every entry of every leaf (or a deterministic sample of `max_per_leaf`
// entries when the leaf is larger).
inline GradCheckResult grad_check(const std::function<Tensor<double>()>& loss_fn, const std::vector<NamedLeaf>& leaves,
                                  double h = 1e-5, std::size_t max_per_leaf = 0, std::uint64_t seed = 7) {
    for (const auto& leaf : leaves) {
        leaf.tensor->zero_grad();
    }
    {
        auto loss = loss_fn();
        backward(loss);
    }
    GradCheckResult result;
    Rng rng(seed);
    for (const auto& leaf : leaves) {
        auto& t = *leaf.tensor;
        const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                          : std::vector<double>(t.numel(), 0.0);
        std::vector<std::size_t> idx(t.numel());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i;
        }
        if (max_per_leaf > 0 && idx.size() > max_per_leaf) {
            rng.shuffle(idx.begin(), idx.end());
            idx.resize(max_per_leaf);
        }
        for (auto i : idx) {
            auto data = t.mutable_data();
            const double orig = data[i];
            data[i] = orig + h;
            const double fp = loss_fn().item();
            data[i] = orig - h;
            const double fm = loss_fn().item();
            data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double err = rel_error(analytic[i], numeric);
            ++result.checked;
            if (err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst = leaf.name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic[i]) +
                               " numeric=" + std::to_string(numeric);
            }
        }
    }
    return result;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
        x = (2.0 * rng.uniform() - 1.0) * scale;
    }
    return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

// Row-stochastic matrix with strictly positive entries.
inline Tensor<double> random_stochastic(std::size_t rows, std::size_t cols, Rng& rng) {
    std::vector<double> v(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double z = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            v[r * cols + c] = 0.05 + rng.uniform();
            z += v[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            v[r * cols + c] /= z;
        }
    }
    return Tensor<double>({rows, cols}, std::move(v));
}

} // namespace relkd::testing
