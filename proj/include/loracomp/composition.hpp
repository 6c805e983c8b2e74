// SPDX-License-Identifier: Apache-2.0
//
// Merging N upstream adapter sets into one effective delta per site, either
// with equal weights or with softmax-normalized learned logits.
#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loracomp/core.hpp"
#include "loracomp/lora.hpp"
#include "loracomp/model_config.hpp"

namespace loracomp {

namespace detail {

inline void check_adapters(std::span<const LoraAdapter* const> adapters, const char* op) {
    if (adapters.empty()) {
        throw ArgumentError(std::string(op) + ": no adapters to compose");
    }
    for (const LoraAdapter* ad : adapters) {
        if (ad->in_dim() != adapters[0]->in_dim() || ad->out_dim() != adapters[0]->out_dim()) {
            throw ShapeError(std::string(op) + ": adapter deltas disagree, " +
                             Matrix::shape_string(adapters[0]->in_dim(), adapters[0]->out_dim()) + " vs " +
                             Matrix::shape_string(ad->in_dim(), ad->out_dim()));
        }
    }
}

/// Σₙ wₙ·(αₙ·AₙBₙᵀ), accumulated in upstream order. Both composition modes
/// go through here so that uniform weights give bit-identical results.
inline Matrix weighted_delta(std::span<const LoraAdapter* const> adapters, std::span<const double> weights) {
    Matrix out(adapters[0]->in_dim(), adapters[0]->out_dim());
    for (std::size_t n = 0; n < adapters.size(); ++n) {
        out.add_scaled(delta_weight(*adapters[n]), weights[n] * adapters[n]->alpha);
    }
    return out;
}

}  // namespace detail

/// (1/N)·Σₙ αₙ·ΔWₙ. Ranks may differ across adapters.
inline Matrix uniform_delta(std::span<const LoraAdapter* const> adapters) {
    detail::check_adapters(adapters, "uniform_delta");
    const std::vector<double> w(adapters.size(), 1.0 / static_cast<double>(adapters.size()));
    return detail::weighted_delta(adapters, w);
}

/// Σₙ softmax(v)ₙ·αₙ·ΔWₙ.
inline Matrix learned_delta(std::span<const LoraAdapter* const> adapters, std::span<const double> logits) {
    detail::check_adapters(adapters, "learned_delta");
    if (logits.size() != adapters.size()) {
        throw ArgumentError("learned_delta: " + std::to_string(logits.size()) + " logits for " +
                            std::to_string(adapters.size()) + " adapters");
    }
    return detail::weighted_delta(adapters, softmax(logits));
}

/// Gradient of the loss w.r.t. the logits of one site, given g = ∂L/∂Ŵ there.
/// With ĝₙ = ⟨g, αₙΔWₙ⟩ and p = softmax(v): dvₙ = pₙ(ĝₙ − Σⱼ pⱼĝⱼ).
inline std::vector<double> grad_v(const Matrix& g, std::span<const LoraAdapter* const> adapters,
                                  std::span<const double> logits) {
    detail::check_adapters(adapters, "grad_v");
    if (logits.size() != adapters.size()) {
        throw ShapeError("grad_v: " + std::to_string(logits.size()) + " logits for " +
                         std::to_string(adapters.size()) + " adapters");
    }
    const std::vector<double> p = softmax(logits);
    std::vector<double> ghat(adapters.size());
    for (std::size_t n = 0; n < adapters.size(); ++n) {
        ghat[n] = adapters[n]->alpha * frob_inner(g, delta_weight(*adapters[n]));
    }
    // pₙ·Σⱼ pⱼ(ĝₙ − ĝⱼ) equals the closed form while Σp = 1, and is exactly
    // zero when all ĝ agree.
    std::vector<double> dv(adapters.size());
    for (std::size_t n = 0; n < adapters.size(); ++n) {
        double acc = 0.0;
        for (std::size_t j = 0; j < adapters.size(); ++j) {
            acc += p[j] * (ghat[n] - ghat[j]);
        }
        dv[n] = p[n] * acc;
    }
    return dv;
}

/// Per-site interpolation logits, aligned with `upstream_order`.
struct CompositionWeights {
    std::vector<std::string> upstream_order;
    std::map<SiteId, std::vector<double>> logits;

    static CompositionWeights zeros(const std::vector<SiteId>& sites, std::vector<std::string> order) {
        CompositionWeights w;
        w.upstream_order = std::move(order);
        for (const SiteId& s : sites) {
            w.logits[s] = std::vector<double>(w.upstream_order.size(), 0.0);
        }
        return w;
    }

    std::size_t count() const noexcept { return upstream_order.size(); }

    std::vector<double> probabilities(const SiteId& s) const {
        auto it = logits.find(s);
        if (it == logits.end()) {
            throw ArgumentError("composition weights have no logits for site " + s.name());
        }
        return softmax(it->second);
    }

    friend bool operator==(const CompositionWeights&, const CompositionWeights&) = default;
};

enum class CompositionMode { uniform, learned };

/// Effective per-site deltas for a set of upstream adapters. The upstream
/// sets are shared read-only; recomposing with new logits is cheap.
class ComposedModel {
public:
    CompositionMode mode() const noexcept { return mode_; }
    const std::vector<AdapterSet>& upstream() const noexcept { return *upstream_; }
    std::size_t count() const noexcept { return upstream_->size(); }
    const std::optional<CompositionWeights>& weights() const noexcept { return weights_; }
    const std::map<SiteId, Matrix>& deltas() const noexcept { return deltas_; }

    const Matrix& delta(const SiteId& s) const {
        auto it = deltas_.find(s);
        if (it == deltas_.end()) {
            throw ArgumentError("composed model has no site " + s.name());
        }
        return it->second;
    }

    std::vector<const LoraAdapter*> site_adapters(const SiteId& s) const {
        std::vector<const LoraAdapter*> out;
        out.reserve(upstream_->size());
        for (const AdapterSet& set : *upstream_) {
            out.push_back(&set.at(s));
        }
        return out;
    }

    /// Replace the logits of a learned composition and rebuild its deltas.
    void set_weights(CompositionWeights w) {
        if (mode_ != CompositionMode::learned) {
            throw ConfigError("only learned compositions carry weights");
        }
        check_weights(w);
        weights_ = std::move(w);
        rebuild();
    }

    friend ComposedModel compose_model(const ModelConfig&, std::shared_ptr<const std::vector<AdapterSet>>,
                                       CompositionMode, std::optional<CompositionWeights>);

private:
    void check_weights(const CompositionWeights& w) const {
        if (w.count() != upstream_->size()) {
            throw ConfigError("composition weights cover " + std::to_string(w.count()) + " upstreams, model has " +
                              std::to_string(upstream_->size()));
        }
        for (std::size_t n = 0; n < upstream_->size(); ++n) {
            if (w.upstream_order[n] != (*upstream_)[n].provenance) {
                throw ConfigError("composition weight order '" + w.upstream_order[n] + "' does not match upstream '" +
                                  (*upstream_)[n].provenance + "'");
            }
        }
        for (const SiteId& s : sites_) {
            auto it = w.logits.find(s);
            if (it == w.logits.end() || it->second.size() != upstream_->size()) {
                throw ConfigError("composition weights missing or malformed at site " + s.name());
            }
        }
        if (w.logits.size() != sites_.size()) {
            throw ConfigError("composition weights name sites the model does not adapt");
        }
    }

    void rebuild() {
        for (const SiteId& s : sites_) {
            const auto ads = site_adapters(s);
            deltas_[s] = mode_ == CompositionMode::uniform ? uniform_delta(ads)
                                                           : learned_delta(ads, weights_->logits.at(s));
        }
    }

    CompositionMode mode_ = CompositionMode::uniform;
    std::vector<SiteId> sites_;
    std::shared_ptr<const std::vector<AdapterSet>> upstream_;
    std::optional<CompositionWeights> weights_;
    std::map<SiteId, Matrix> deltas_;
};

/// Assemble per-site effective deltas. Learned mode without explicit weights
/// starts from all-zero logits, i.e. exactly the uniform composition.
inline ComposedModel compose_model(const ModelConfig& cfg, std::shared_ptr<const std::vector<AdapterSet>> sets,
                                   CompositionMode mode, std::optional<CompositionWeights> weights = std::nullopt) {
    if (!sets || sets->empty()) {
        throw ArgumentError("compose_model: at least one upstream adapter set is required");
    }
    ComposedModel m;
    m.mode_ = mode;
    m.sites_ = adapted_sites(cfg);
    m.upstream_ = std::move(sets);
    for (const AdapterSet& set : *m.upstream_) {
        if (set.sites.size() != m.sites_.size()) {
            throw ConfigError("adapter set '" + set.provenance + "' covers " + std::to_string(set.sites.size()) +
                              " sites, model adapts " + std::to_string(m.sites_.size()));
        }
        for (const SiteId& s : m.sites_) {
            const LoraAdapter& ad = set.at(s);
            if (ad.in_dim() != cfg.d_model || ad.out_dim() != cfg.d_model) {
                throw ConfigError("adapter set '" + set.provenance + "' site " + s.name() + " has delta shape " +
                                  Matrix::shape_string(ad.in_dim(), ad.out_dim()));
            }
        }
    }
    if (mode == CompositionMode::learned) {
        if (!weights) {
            std::vector<std::string> order;
            for (const AdapterSet& set : *m.upstream_) {
                order.push_back(set.provenance);
            }
            weights = CompositionWeights::zeros(m.sites_, std::move(order));
        }
        m.check_weights(*weights);
        m.weights_ = std::move(weights);
    } else if (weights) {
        throw ConfigError("uniform composition takes no weights");
    }
    m.rebuild();
    return m;
}

inline ComposedModel compose_model(const ModelConfig& cfg, std::vector<AdapterSet> sets, CompositionMode mode,
                                   std::optional<CompositionWeights> weights = std::nullopt) {
    return compose_model(cfg, std::make_shared<const std::vector<AdapterSet>>(std::move(sets)), mode,
                         std::move(weights));
}

}  // namespace loracomp
