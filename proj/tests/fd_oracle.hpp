// SPDX-License-Identifier: Apache-2.0
//
// Test-only central finite-difference oracle for the model's gradients.
// The loss is recomputed from forward() logits with a plain log-sum-exp,
// independent of the library's cross_entropy.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "loracomp/model.hpp"

namespace loracomp::testing {

inline double reference_loss(const BaseModel& base, const ClassifierHead& head, const Overlay& overlay,
                             const Batch& batch) {
    const ForwardCache c = forward(base, head, overlay, batch.x);
    double total = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        double z = 0.0;
        for (double v : c.logits.row(b)) z += std::exp(v);
        total += std::log(z) - c.logits(b, batch.labels[b]);
    }
    return total / double(batch.size());
}

/// Flat view over one parameter group: raw pointers into the live
/// parameters, the analytic gradient in the same order, and a hook to
/// rebuild derived state after a perturbation.
struct ParamView {
    std::vector<double*> params;
    std::vector<double> grad;
    std::function<void()> refresh = [] {};
};

inline void append(ParamView& view, Matrix& param, const Matrix& grad) {
    for (std::size_t i = 0; i < param.size(); ++i) {
        view.params.push_back(&param.values()[i]);
        view.grad.push_back(grad.values()[i]);
    }
}

inline double relative_error(double a, double b, double floor = 1e-7) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest relative error between the analytic directional derivative and
/// a central difference along `directions` random unit directions.
inline double worst_directional_error(ParamView& view, const std::function<double()>& loss, RngStream& rng,
                                      int directions, double h = 1e-5) {
    double worst = 0.0;
    std::vector<double> u(view.params.size());
    for (int d = 0; d < directions; ++d) {
        double norm = 0.0;
        for (double& x : u) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        double analytic = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            u[i] /= norm;
            analytic += view.grad[i] * u[i];
        }
        std::vector<double> orig(u.size());
        for (std::size_t i = 0; i < u.size(); ++i) orig[i] = *view.params[i];
        auto shift = [&](double s) {
            for (std::size_t i = 0; i < u.size(); ++i) *view.params[i] = orig[i] + s * u[i];
            view.refresh();
        };
        shift(h);
        const double up = loss();
        shift(-h);
        const double down = loss();
        shift(0.0);
        worst = std::max(worst, relative_error((up - down) / (2 * h), analytic));
    }
    return worst;
}

}  // namespace loracomp::testing
