// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "duallora/tensor.hpp"

namespace duallora {

/// Central-difference gradient of a scalar function at x:
/// (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every element i.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                     double eps = 1e-5) {
    NoGradGuard no_grad;
    std::vector<double> grad(x.size());
    Tensor probe = x.clone();
    auto values = probe.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double original = values[i];
        values[i] = original + eps;
        const double plus = f(probe);
        values[i] = original - eps;
        const double minus = f(probe);
        values[i] = original;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    return Tensor(x.shape(), std::move(grad));
}

/// Central differences of f() with respect to selected elements of a tensor
/// that f reads in place (a model parameter). The tensor is restored exactly.
inline std::vector<double> finite_difference_grad_inplace(const std::function<double()>& f,
                                                          Tensor& param,
                                                          std::span<const std::size_t> indices,
                                                          double eps = 1e-5) {
    NoGradGuard no_grad;
    std::vector<double> grad;
    grad.reserve(indices.size());
    auto values = param.mutable_data();
    for (auto i : indices) {
        const double original = values[i];
        values[i] = original + eps;
        const double plus = f();
        values[i] = original - eps;
        const double minus = f();
        values[i] = original;
        grad.push_back((plus - minus) / (2.0 * eps));
    }
    return grad;
}

/// Fourth-order central differences, (-f(x+2e) + 8f(x+e) - 8f(x-e) + f(x-2e)) / 12e,
/// for the same in-place setting. The larger step keeps cancellation error
/// well below small gradients of an O(1) loss.
inline std::vector<double> five_point_grad_inplace(const std::function<double()>& f, Tensor& param,
                                                   std::span<const std::size_t> indices, double eps = 1e-3) {
    NoGradGuard no_grad;
    std::vector<double> grad;
    grad.reserve(indices.size());
    auto values = param.mutable_data();
    auto at = [&](std::size_t i, double x) {
        values[i] = x;
        return f();
    };
    for (auto i : indices) {
        const double x = values[i];
        const double d = -at(i, x + 2 * eps) + 8 * at(i, x + eps) - 8 * at(i, x - eps) + at(i, x - 2 * eps);
        values[i] = x;
        grad.push_back(d / (12.0 * eps));
    }
    return grad;
}

/// Agreement rule for analytic vs numerical derivatives: relative error below
/// rel_tol, except near zero (|numeric| < abs_floor) where the absolute error
/// is compared against abs_floor.
struct GradientTolerance {
    double rel_tol = 1e-5;
    double abs_floor = 1e-7;

    bool accepts(double analytic, double numeric) const {
        const double err = std::abs(analytic - numeric);
        if (std::abs(numeric) < abs_floor) {
            return err < abs_floor;
        }
        return err / std::max(std::abs(analytic), std::abs(numeric)) < rel_tol;
    }

    double relative_error(double analytic, double numeric) const {
        const double err = std::abs(analytic - numeric);
        if (std::abs(numeric) < abs_floor) {
            return err / abs_floor * rel_tol;
        }
        return err / std::max(std::abs(analytic), std::abs(numeric));
    }
};

}  // namespace duallora
