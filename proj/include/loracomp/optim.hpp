// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "loracomp/errors.hpp"

namespace loracomp {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction over an ordered list of parameter buffers.
/// The buffer list must keep the same layout between steps.
class Adam {
public:
    explicit Adam(double lr, AdamConfig cfg = {}) : lr_(lr), cfg_(cfg) {
        if (!(lr > 0.0)) {
            throw ArgumentError("learning rate must be positive");
        }
    }

    void step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads) {
        if (params.size() != grads.size()) {
            throw ArgumentError("Adam::step: parameter and gradient lists differ in length");
        }
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.emplace_back(p.size(), 0.0);
                v_.emplace_back(p.size(), 0.0);
            }
        }
        if (m_.size() != params.size()) {
            throw ArgumentError("Adam::step: parameter layout changed between steps");
        }
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& m = m_[k];
            auto& v = v_[k];
            if (params[k].size() != m.size() || grads[k].size() != m.size()) {
                throw ArgumentError("Adam::step: buffer size changed between steps");
            }
            for (std::size_t i = 0; i < m.size(); ++i) {
                const double g = grads[k][i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                params[k][i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
            }
        }
    }

    /// The update Adam would apply, without mutating anything but its moments.
    /// Used by the line-search safeguard, which may shrink the step.
    std::vector<std::vector<double>> direction(std::span<const std::span<const double>> grads) {
        if (m_.empty()) {
            for (const auto& g : grads) {
                m_.emplace_back(g.size(), 0.0);
                v_.emplace_back(g.size(), 0.0);
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        std::vector<std::vector<double>> out(grads.size());
        for (std::size_t k = 0; k < grads.size(); ++k) {
            out[k].resize(grads[k].size());
            for (std::size_t i = 0; i < grads[k].size(); ++i) {
                const double g = grads[k][i];
                m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
                v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
                out[k][i] = lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + cfg_.eps);
            }
        }
        return out;
    }

    double learning_rate() const noexcept { return lr_; }
    std::size_t steps() const noexcept { return t_; }

private:
    double lr_;
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace loracomp
