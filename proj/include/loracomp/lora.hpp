// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <map>
#include <string>
#include <utility>

#include "loracomp/core.hpp"

namespace loracomp {

enum class Role : std::uint8_t { query = 0, key = 1, value = 2 };

inline constexpr std::array<Role, 3> kAdaptedRoles{Role::query, Role::key, Role::value};

inline const char* role_name(Role r) noexcept {
    switch (r) {
    case Role::query:
        return "q";
    case Role::key:
        return "k";
    case Role::value:
        return "v";
    }
    return "?";
}

inline Role parse_role(const std::string& s) {
    if (s == "q") return Role::query;
    if (s == "k") return Role::key;
    if (s == "v") return Role::value;
    throw ArgumentError("unknown site role '" + s + "'");
}

/// One adapted weight: attention projection `role` of transformer block `block`.
struct SiteId {
    std::size_t block = 0;
    Role role = Role::query;

    auto operator<=>(const SiteId&) const = default;

    std::string name() const { return "b" + std::to_string(block) + "." + role_name(role); }
};

/// Low-rank delta ΔW = A·Bᵀ on a d×c weight. `alpha` scales the delta when
/// it is applied; `delta_weight` itself is unscaled.
struct LoraAdapter {
    Matrix a;  // d×r
    Matrix b;  // c×r
    double alpha = 1.0;

    std::size_t rank() const noexcept { return a.cols(); }
    std::size_t in_dim() const noexcept { return a.rows(); }
    std::size_t out_dim() const noexcept { return b.rows(); }

    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

/// Adapters for every adapted site of one model, all trained on one task.
struct AdapterSet {
    std::map<SiteId, LoraAdapter> sites;
    std::string provenance;
    std::size_t rank = 0;
    double alpha = 1.0;

    const LoraAdapter& at(const SiteId& s) const {
        auto it = sites.find(s);
        if (it == sites.end()) {
            throw ConfigError("adapter set '" + provenance + "' has no adapter for site " + s.name());
        }
        return it->second;
    }

    friend bool operator==(const AdapterSet&, const AdapterSet&) = default;
};

inline void validate_adapter(const LoraAdapter& ad) {
    if (ad.a.cols() != ad.b.cols()) {
        throw ShapeError("adapter factors disagree on rank: A " + ad.a.shape() + ", B " + ad.b.shape());
    }
    if (ad.rank() < 1 || ad.rank() > std::min(ad.in_dim(), ad.out_dim())) {
        throw ArgumentError("adapter rank " + std::to_string(ad.rank()) + " outside [1, min(d, c)]");
    }
}

/// A ~ Normal(0, 0.02²), B = 0, so the adapter starts as an exact no-op.
inline LoraAdapter init_adapter(std::size_t d, std::size_t c, std::size_t r, double alpha, RngStream& rng) {
    if (r < 1 || r > std::min(d, c)) {
        throw ArgumentError("init_adapter: rank " + std::to_string(r) + " outside [1, min(" +
                            std::to_string(d) + ", " + std::to_string(c) + ")]");
    }
    LoraAdapter ad;
    ad.a = gaussian(rng, d, r, 0.02);
    ad.b = Matrix(c, r);
    ad.alpha = alpha;
    return ad;
}

inline Matrix delta_weight(const LoraAdapter& ad) { return matmul_nt(ad.a, ad.b); }

/// W₀ + α·A·Bᵀ. `w0` is left untouched.
inline Matrix effective_weight(const Matrix& w0, const LoraAdapter& ad) {
    Matrix delta = delta_weight(ad);
    if (!delta.same_shape(w0)) {
        throw ShapeError("effective_weight: base " + w0.shape() + " vs delta " + delta.shape());
    }
    return Matrix(w0).add_scaled(delta, ad.alpha);
}

struct AdapterGrad {
    Matrix da;  // d×r
    Matrix db;  // c×r
};

/// Given g = ∂L/∂Ŵ: ∂L/∂A = α·g·B, ∂L/∂B = α·gᵀ·A.
inline AdapterGrad adapter_grad(const Matrix& g, const LoraAdapter& ad) {
    if (g.rows() != ad.in_dim() || g.cols() != ad.out_dim()) {
        throw ShapeError("adapter_grad: upstream gradient " + g.shape() + " vs adapter " +
                         Matrix::shape_string(ad.in_dim(), ad.out_dim()));
    }
    AdapterGrad out{matmul(g, ad.b), matmul_tn(g, ad.a)};
    out.da *= ad.alpha;
    out.db *= ad.alpha;
    return out;
}

}  // namespace loracomp
