// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "duallora/tensor.hpp"

namespace duallora {

struct AdamWOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam over a fixed parameter list. Gradients are
/// divided by `grad_scale` before use, so accumulated sums become averages.
class AdamW {
  public:
    AdamW(std::vector<Tensor> params, AdamWOptions options)
        : params_(std::move(params)), options_(options) {
        for (const auto& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    void step(double grad_scale = 1.0) {
        ++t_;
        const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) {
                continue;
            }
            auto w = p.mutable_data();
            auto g = p.grad();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = g[j] / grad_scale;
                m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * gj;
                v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * gj * gj;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] -= options_.lr * (mhat / (std::sqrt(vhat) + options_.eps) +
                                       options_.weight_decay * w[j]);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) {
            p.zero_grad();
        }
    }

    double grad_norm(double grad_scale = 1.0) const {
        double total = 0.0;
        for (const auto& p : params_) {
            for (double g : p.grad()) {
                total += (g / grad_scale) * (g / grad_scale);
            }
        }
        return std::sqrt(total);
    }

    void set_lr(double lr) { options_.lr = lr; }
    const std::vector<Tensor>& params() const { return params_; }

  private:
    std::vector<Tensor> params_;
    AdamWOptions options_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace duallora
