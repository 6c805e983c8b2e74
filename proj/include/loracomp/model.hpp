// SPDX-License-Identifier: Apache-2.0
//
// A small pre-norm patch transformer classifier with hand-derived gradients.
//
// Layout (row-vector convention, y = x·W):
//   tokens  = patches(x)·E + P
//   block   = h + Attn(rms(h; g₁)·{Wq, Wk, Wv})·Wo, then h + gelu(rms(h; g₂)·W₁)·W₂
//   logits  = mean_t rms(h; g_f) · W_h + b_h
//
// Only the q/k/v projections are adapted; their effective weight is
// W₀ + delta where the delta comes from the overlay.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loracomp/composition.hpp"
#include "loracomp/core.hpp"
#include "loracomp/lora.hpp"
#include "loracomp/model_config.hpp"

namespace loracomp {

inline constexpr double kRmsEps = 1e-6;

// GELU through the logistic approximation of the Gaussian CDF,
// Φ(z) ≈ σ(1.702·z); no tanh involved.
inline constexpr double kGeluSigmoidScale = 1.702;

struct BlockParams {
    Matrix wq, wk, wv, wo;  // d×d
    Matrix norm1, norm2;    // 1×d gains
    Matrix w1;              // d×hidden
    Matrix w2;              // hidden×d

    friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

/// The frozen pre-trained weights Θ₀.
struct BaseModel {
    ModelConfig config;
    Matrix embed;       // patch_dim×d
    Matrix pos;         // tokens×d
    std::vector<BlockParams> blocks;
    Matrix final_norm;  // 1×d

    template <class F>
    void for_each_param(F&& f) {
        f("embed", embed);
        f("pos", pos);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "b" + std::to_string(i) + ".";
            BlockParams& b = blocks[i];
            f(p + "wq", b.wq);
            f(p + "wk", b.wk);
            f(p + "wv", b.wv);
            f(p + "wo", b.wo);
            f(p + "norm1", b.norm1);
            f(p + "norm2", b.norm2);
            f(p + "w1", b.w1);
            f(p + "w2", b.w2);
        }
        f("final_norm", final_norm);
    }

    template <class F>
    void for_each_param(F&& f) const {
        const_cast<BaseModel*>(this)->for_each_param(
            [&](const std::string& name, Matrix& m) { f(name, static_cast<const Matrix&>(m)); });
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for_each_param([&](const std::string&, const Matrix& m) { n += m.size(); });
        return n;
    }

    const Matrix& site_weight(const SiteId& s) const {
        const BlockParams& b = blocks.at(s.block);
        switch (s.role) {
        case Role::query:
            return b.wq;
        case Role::key:
            return b.wk;
        case Role::value:
            return b.wv;
        }
        throw ArgumentError("unknown site role");
    }

    Matrix& site_weight(const SiteId& s) {
        return const_cast<Matrix&>(static_cast<const BaseModel&>(*this).site_weight(s));
    }

    /// Zero-valued model of the same shape (used as a gradient accumulator).
    BaseModel zeros_like() const {
        BaseModel z = *this;
        z.for_each_param([](const std::string&, Matrix& m) { m.fill(0.0); });
        return z;
    }

    /// Scaled Gaussian init: weights ~ N(0, 1/fan_in), gains = 1.
    static BaseModel init(const ModelConfig& cfg, RngStream rng) {
        cfg.validate();
        const std::size_t d = cfg.d_model;
        auto scaled = [&](std::string_view label, std::size_t r, std::size_t c, double sigma) {
            RngStream s = rng.child(label);
            return gaussian(s, r, c, sigma);
        };
        BaseModel m;
        m.config = cfg;
        m.embed = scaled("embed", cfg.patch_dim(), d, 1.0 / std::sqrt(double(cfg.patch_dim())));
        m.pos = scaled("pos", cfg.tokens(), d, 0.1);
        for (std::size_t i = 0; i < cfg.blocks; ++i) {
            RngStream br = rng.child("block", i);
            auto g = [&](std::string_view label, std::size_t r, std::size_t c) {
                RngStream s = br.child(label);
                return gaussian(s, r, c, 1.0 / std::sqrt(double(r)));
            };
            BlockParams b;
            b.wq = g("wq", d, d);
            b.wk = g("wk", d, d);
            b.wv = g("wv", d, d);
            b.wo = g("wo", d, d);
            b.norm1 = Matrix(1, d, 1.0);
            b.norm2 = Matrix(1, d, 1.0);
            b.w1 = g("w1", d, cfg.mlp_hidden);
            b.w2 = g("w2", cfg.mlp_hidden, d);
            m.blocks.push_back(std::move(b));
        }
        m.final_norm = Matrix(1, d, 1.0);
        return m;
    }

    friend bool operator==(const BaseModel&, const BaseModel&) = default;
};

/// Linear classifier on the pooled representation. Never counted in |Θ|.
struct ClassifierHead {
    Matrix weight;  // d×C
    Matrix bias;    // 1×C

    std::size_t classes() const noexcept { return weight.cols(); }

    static ClassifierHead zeros(std::size_t d, std::size_t classes) {
        if (classes == 0) {
            throw ArgumentError("classifier head needs at least one class");
        }
        return {Matrix(d, classes), Matrix(1, classes)};
    }

    friend bool operator==(const ClassifierHead&, const ClassifierHead&) = default;
};

/// Which parameter groups receive gradients.
struct TrainableMask {
    bool base = false;
    bool head = false;
    bool adapters = false;
    bool composition_v = false;

    bool any() const noexcept { return base || head || adapters || composition_v; }
    bool needs_backbone_grad() const noexcept { return base || adapters || composition_v; }
};

/// Source of the per-site deltas applied on top of the frozen weights.
/// Non-owning: the referenced adapters must outlive the overlay.
class Overlay {
public:
    Overlay() = default;
    Overlay(const AdapterSet& set) : set_(&set) {}                // NOLINT(implicit)
    Overlay(const ComposedModel& composed) : composed_(&composed) {}  // NOLINT(implicit)

    static Overlay none() { return {}; }

    bool is_none() const noexcept { return set_ == nullptr && composed_ == nullptr; }
    const AdapterSet* adapters() const noexcept { return set_; }
    const ComposedModel* composed() const noexcept { return composed_; }

    /// Effective weight at a site: W₀, W₀ + αΔW, or W₀ + composed delta.
    Matrix site_weight(const BaseModel& base, const SiteId& s) const {
        const Matrix& w0 = base.site_weight(s);
        if (const AdapterSet* set = adapters()) {
            return effective_weight(w0, set->at(s));
        }
        if (const ComposedModel* c = composed()) {
            const Matrix& delta = c->delta(s);
            if (!delta.same_shape(w0)) {
                throw ShapeError("composed delta " + delta.shape() + " vs base weight " + w0.shape() + " at " +
                                 s.name());
            }
            return w0 + delta;
        }
        return w0;
    }

private:
    const AdapterSet* set_ = nullptr;
    const ComposedModel* composed_ = nullptr;
};

/// Labeled inputs; one row of `x` per sample.
struct Batch {
    Matrix x;
    std::vector<std::size_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
};

struct BlockCache {
    Matrix input;                       // (B·T)×d
    Matrix norm1, norm2;                // normalized activations
    std::vector<double> rms1, rms2;     // per-row RMS
    Matrix wq, wk, wv;                  // effective weights used
    Matrix q, k, v;                     // site outputs
    std::vector<double> attn;           // B×heads×T×T softmax rows
    Matrix attn_out;                    // concatenated head outputs
    Matrix mid;                         // input + attention branch
    Matrix pre_act, act;                // MLP hidden before/after gelu
};

struct ForwardCache {
    std::size_t batch = 0;
    Matrix patches;                     // (B·T)×patch_dim
    std::vector<BlockCache> blocks;
    Matrix final_in, final_norm;
    std::vector<double> final_rms;
    Matrix pooled;                      // B×d
    Matrix logits;                      // B×C

    const Matrix& site_output(const SiteId& s) const {
        const BlockCache& b = blocks.at(s.block);
        switch (s.role) {
        case Role::query:
            return b.q;
        case Role::key:
            return b.k;
        case Role::value:
            return b.v;
        }
        throw ArgumentError("unknown site role");
    }
};

namespace detail {

inline double gelu(double z) noexcept { return z / (1.0 + std::exp(-kGeluSigmoidScale * z)); }

inline double gelu_grad(double z) noexcept {
    const double s = 1.0 / (1.0 + std::exp(-kGeluSigmoidScale * z));
    return s + kGeluSigmoidScale * z * s * (1.0 - s);
}

inline Matrix rms_norm(const Matrix& x, const Matrix& gain, std::vector<double>& rms) {
    const std::size_t d = x.cols();
    Matrix y(x.rows(), d);
    rms.resize(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double ss = 0.0;
        for (double v : x.row(i)) {
            ss += v * v;
        }
        rms[i] = std::sqrt(ss / double(d) + kRmsEps);
        for (std::size_t j = 0; j < d; ++j) {
            y(i, j) = x(i, j) / rms[i] * gain(0, j);
        }
    }
    return y;
}

/// Backward of y = x/r·g. Accumulates into dx; writes dgain if non-null.
inline void rms_norm_backward(const Matrix& x, const Matrix& gain, const std::vector<double>& rms, const Matrix& dy,
                              Matrix& dx, Matrix* dgain) {
    const std::size_t d = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double r = rms[i];
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            dot += gain(0, j) * dy(i, j) * x(i, j);
        }
        const double coef = dot / (double(d) * r * r * r);
        for (std::size_t j = 0; j < d; ++j) {
            dx(i, j) += gain(0, j) * dy(i, j) / r - x(i, j) * coef;
            if (dgain) {
                (*dgain)(0, j) += dy(i, j) * x(i, j) / r;
            }
        }
    }
}

inline Matrix to_patches(const ModelConfig& cfg, const Matrix& x) {
    if (x.cols() != cfg.input_dim()) {
        throw ShapeError("model input has " + std::to_string(x.cols()) + " features, expected " +
                         std::to_string(cfg.input_dim()));
    }
    const std::size_t t = cfg.tokens();
    const std::size_t per_side = cfg.image_side / cfg.patch_side;
    const std::size_t ps = cfg.patch_side;
    Matrix p(x.rows() * t, cfg.patch_dim());
    for (std::size_t b = 0; b < x.rows(); ++b) {
        for (std::size_t tok = 0; tok < t; ++tok) {
            const std::size_t pr = tok / per_side;
            const std::size_t pc = tok % per_side;
            for (std::size_t i = 0; i < ps; ++i) {
                for (std::size_t j = 0; j < ps; ++j) {
                    p(b * t + tok, i * ps + j) = x(b, (pr * ps + i) * cfg.image_side + pc * ps + j);
                }
            }
        }
    }
    return p;
}

}  // namespace detail

/// Everything up to (and including) the pooled representation.
inline ForwardCache forward_features(const BaseModel& base, const Overlay& overlay, const Matrix& x) {
    const ModelConfig& cfg = base.config;
    const std::size_t t = cfg.tokens();
    const std::size_t d = cfg.d_model;
    const std::size_t nh = cfg.heads;
    const std::size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(hd));

    ForwardCache c;
    c.batch = x.rows();
    c.patches = detail::to_patches(cfg, x);
    Matrix h = matmul(c.patches, base.embed);
    for (std::size_t r = 0; r < h.rows(); ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            h(r, j) += base.pos(r % t, j);
        }
    }

    c.blocks.resize(cfg.blocks);
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
        const BlockParams& p = base.blocks[l];
        BlockCache& bc = c.blocks[l];
        bc.input = std::move(h);
        bc.norm1 = detail::rms_norm(bc.input, p.norm1, bc.rms1);
        bc.wq = overlay.site_weight(base, {l, Role::query});
        bc.wk = overlay.site_weight(base, {l, Role::key});
        bc.wv = overlay.site_weight(base, {l, Role::value});
        bc.q = matmul(bc.norm1, bc.wq);
        bc.k = matmul(bc.norm1, bc.wk);
        bc.v = matmul(bc.norm1, bc.wv);

        bc.attn.assign(c.batch * nh * t * t, 0.0);
        bc.attn_out = Matrix(c.batch * t, d);
        std::vector<double> scores(t);
        for (std::size_t b = 0; b < c.batch; ++b) {
            for (std::size_t hh = 0; hh < nh; ++hh) {
                const std::size_t off = hh * hd;
                for (std::size_t i = 0; i < t; ++i) {
                    for (std::size_t j = 0; j < t; ++j) {
                        double s = 0.0;
                        for (std::size_t k = 0; k < hd; ++k) {
                            s += bc.q(b * t + i, off + k) * bc.k(b * t + j, off + k);
                        }
                        scores[j] = s * scale;
                    }
                    const std::vector<double> probs = softmax(scores);
                    double* row = &bc.attn[((b * nh + hh) * t + i) * t];
                    for (std::size_t j = 0; j < t; ++j) {
                        row[j] = probs[j];
                        for (std::size_t k = 0; k < hd; ++k) {
                            bc.attn_out(b * t + i, off + k) += probs[j] * bc.v(b * t + j, off + k);
                        }
                    }
                }
            }
        }
        bc.mid = bc.input + matmul(bc.attn_out, p.wo);
        bc.norm2 = detail::rms_norm(bc.mid, p.norm2, bc.rms2);
        bc.pre_act = matmul(bc.norm2, p.w1);
        bc.act = bc.pre_act;
        for (double& v : bc.act.values()) {
            v = detail::gelu(v);
        }
        h = bc.mid + matmul(bc.act, p.w2);
    }

    c.final_in = std::move(h);
    c.final_norm = detail::rms_norm(c.final_in, base.final_norm, c.final_rms);
    c.pooled = Matrix(c.batch, d);
    for (std::size_t b = 0; b < c.batch; ++b) {
        for (std::size_t tok = 0; tok < t; ++tok) {
            for (std::size_t j = 0; j < d; ++j) {
                c.pooled(b, j) += c.final_norm(b * t + tok, j);
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            c.pooled(b, j) /= double(t);
        }
    }
    return c;
}

/// pooled (B×d) · W_h + b_h.
inline Matrix head_logits(const ClassifierHead& head, const Matrix& pooled) {
    Matrix logits = matmul(pooled, head.weight);
    for (std::size_t b = 0; b < logits.rows(); ++b) {
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            logits(b, j) += head.bias(0, j);
        }
    }
    return logits;
}

inline ForwardCache forward(const BaseModel& base, const ClassifierHead& head, const Overlay& overlay,
                            const Matrix& x) {
    if (!x.all_finite()) {
        throw ArgumentError("forward: non-finite input");
    }
    if (head.weight.rows() != base.config.d_model) {
        throw ShapeError("classifier head " + head.weight.shape() + " does not match d_model " +
                         std::to_string(base.config.d_model));
    }
    ForwardCache c = forward_features(base, overlay, x);
    c.logits = head_logits(head, c.pooled);
    return c;
}

/// Gradients for the enabled groups only; disabled groups stay empty.
struct GradBundle {
    std::optional<BaseModel> base;
    std::optional<ClassifierHead> head;
    std::map<SiteId, AdapterGrad> adapters;
    std::map<SiteId, std::vector<double>> composition_v;

    bool empty() const noexcept { return !base && !head && adapters.empty() && composition_v.empty(); }
};

struct LossAndGrads {
    double loss = 0.0;
    GradBundle grads;
};

/// Mean cross-entropy over the batch and its gradients. Head gradients come
/// straight from the logits; the backbone is only differentiated when a
/// base, adapter or composition group is enabled.
inline LossAndGrads loss_and_grads(const BaseModel& base, const ClassifierHead& head, const Overlay& overlay,
                                   const Batch& batch, const TrainableMask& mask) {
    if (batch.size() == 0 || batch.x.rows() != batch.size()) {
        throw ArgumentError("loss_and_grads: batch needs one label per input row");
    }
    if (mask.adapters && !overlay.adapters()) {
        throw ConfigError("adapter gradients requested without an adapter overlay");
    }
    if (mask.composition_v &&
        !(overlay.composed() && overlay.composed()->mode() == CompositionMode::learned)) {
        throw ConfigError("composition gradients requested without a learned composition overlay");
    }
    const ForwardCache c = forward(base, head, overlay, batch.x);
    const std::size_t nb = batch.size();
    const double inv_b = 1.0 / double(nb);

    LossAndGrads out;
    Matrix dlogits(nb, head.classes());
    for (std::size_t b = 0; b < nb; ++b) {
        const CrossEntropy ce = cross_entropy(c.logits.row(b), batch.labels[b]);
        out.loss += ce.loss;
        for (std::size_t j = 0; j < ce.grad.size(); ++j) {
            dlogits(b, j) = ce.grad[j] * inv_b;
        }
    }
    out.loss *= inv_b;
    if (!mask.any()) {
        return out;
    }

    if (mask.head) {
        ClassifierHead gh{matmul_tn(c.pooled, dlogits), Matrix(1, head.classes())};
        for (std::size_t b = 0; b < nb; ++b) {
            for (std::size_t j = 0; j < head.classes(); ++j) {
                gh.bias(0, j) += dlogits(b, j);
            }
        }
        out.grads.head = std::move(gh);
    }
    if (!mask.needs_backbone_grad()) {
        return out;
    }

    const ModelConfig& cfg = base.config;
    const std::size_t t = cfg.tokens();
    const std::size_t d = cfg.d_model;
    const std::size_t nh = cfg.heads;
    const std::size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(hd));

    BaseModel gbase = base.zeros_like();
    std::map<SiteId, Matrix> site_grads;

    const Matrix dpooled = matmul_nt(dlogits, head.weight);
    Matrix dnorm(nb * t, d);
    for (std::size_t r = 0; r < nb * t; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            dnorm(r, j) = dpooled(r / t, j) / double(t);
        }
    }
    Matrix dh(nb * t, d);
    detail::rms_norm_backward(c.final_in, base.final_norm, c.final_rms, dnorm, dh, &gbase.final_norm);

    for (std::size_t li = cfg.blocks; li-- > 0;) {
        const BlockParams& p = base.blocks[li];
        const BlockCache& bc = c.blocks[li];
        BlockParams& gp = gbase.blocks[li];

        // MLP branch: h_out = mid + gelu(norm2·W1)·W2
        Matrix dmid = dh;
        gp.w2 = matmul_tn(bc.act, dh);
        Matrix dpre = matmul_nt(dh, p.w2);
        for (std::size_t i = 0; i < dpre.size(); ++i) {
            dpre.values()[i] *= detail::gelu_grad(bc.pre_act.values()[i]);
        }
        gp.w1 = matmul_tn(bc.norm2, dpre);
        const Matrix dnorm2 = matmul_nt(dpre, p.w1);
        detail::rms_norm_backward(bc.mid, p.norm2, bc.rms2, dnorm2, dmid, &gp.norm2);

        // Attention branch: mid = input + attn_out·Wo
        Matrix dinput = dmid;
        gp.wo = matmul_tn(bc.attn_out, dmid);
        const Matrix dattn_out = matmul_nt(dmid, p.wo);
        Matrix dq(nb * t, d), dk(nb * t, d), dv(nb * t, d);
        std::vector<double> dprob(t);
        for (std::size_t b = 0; b < nb; ++b) {
            for (std::size_t hh = 0; hh < nh; ++hh) {
                const std::size_t off = hh * hd;
                for (std::size_t i = 0; i < t; ++i) {
                    const double* prob = &bc.attn[((b * nh + hh) * t + i) * t];
                    double weighted = 0.0;
                    for (std::size_t j = 0; j < t; ++j) {
                        double s = 0.0;
                        for (std::size_t k = 0; k < hd; ++k) {
                            const double g = dattn_out(b * t + i, off + k);
                            s += g * bc.v(b * t + j, off + k);
                            dv(b * t + j, off + k) += prob[j] * g;
                        }
                        dprob[j] = s;
                        weighted += prob[j] * s;
                    }
                    for (std::size_t j = 0; j < t; ++j) {
                        const double ds = prob[j] * (dprob[j] - weighted) * scale;
                        for (std::size_t k = 0; k < hd; ++k) {
                            dq(b * t + i, off + k) += ds * bc.k(b * t + j, off + k);
                            dk(b * t + j, off + k) += ds * bc.q(b * t + i, off + k);
                        }
                    }
                }
            }
        }
        site_grads[{li, Role::query}] = matmul_tn(bc.norm1, dq);
        site_grads[{li, Role::key}] = matmul_tn(bc.norm1, dk);
        site_grads[{li, Role::value}] = matmul_tn(bc.norm1, dv);
        Matrix dnorm1 = matmul_nt(dq, bc.wq);
        dnorm1 += matmul_nt(dk, bc.wk);
        dnorm1 += matmul_nt(dv, bc.wv);
        detail::rms_norm_backward(bc.input, p.norm1, bc.rms1, dnorm1, dinput, &gp.norm1);
        dh = std::move(dinput);
    }

    if (mask.base) {
        gbase.embed = matmul_tn(c.patches, dh);
        for (std::size_t r = 0; r < nb * t; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                gbase.pos(r % t, j) += dh(r, j);
            }
        }
        for (const auto& [site, g] : site_grads) {
            gbase.site_weight(site) = g;
        }
        out.grads.base = std::move(gbase);
    }
    if (mask.adapters) {
        const AdapterSet& set = *overlay.adapters();
        for (const auto& [site, g] : site_grads) {
            out.grads.adapters[site] = adapter_grad(g, set.at(site));
        }
    }
    if (mask.composition_v) {
        const ComposedModel& cm = *overlay.composed();
        for (const auto& [site, g] : site_grads) {
            out.grads.composition_v[site] = grad_v(g, cm.site_adapters(site), cm.weights()->logits.at(site));
        }
    }
    return out;
}

namespace detail {

inline void check_eval_set(const Matrix& x, std::span<const std::size_t> labels) {
    if (labels.empty()) {
        throw ArgumentError("top1_accuracy: empty query set");
    }
    if (x.rows() != labels.size()) {
        throw ShapeError("top1_accuracy: " + std::to_string(x.rows()) + " inputs for " +
                         std::to_string(labels.size()) + " labels");
    }
}

inline Matrix rows_slice(const Matrix& x, std::size_t begin, std::size_t end) {
    Matrix out(end - begin, x.cols());
    std::copy(x.row(begin).data(), x.row(begin).data() + (end - begin) * x.cols(), out.values().data());
    return out;
}

}  // namespace detail

inline constexpr std::size_t kEvalChunk = 256;

/// Pooled representation for every row of x, computed in fixed-size chunks.
/// Rows are independent, so chunking does not change any value.
inline Matrix pooled_features(const BaseModel& base, const Overlay& overlay, const Matrix& x) {
    Matrix out(x.rows(), base.config.d_model);
    for (std::size_t s = 0; s < x.rows(); s += kEvalChunk) {
        const std::size_t e = std::min(x.rows(), s + kEvalChunk);
        const ForwardCache c = forward_features(base, overlay, detail::rows_slice(x, s, e));
        std::copy(c.pooled.values().begin(), c.pooled.values().end(), out.row(s).data());
    }
    return out;
}

/// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
inline double top1_accuracy_from_logits(const Matrix& logits, std::span<const std::size_t> labels) {
    std::size_t hits = 0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        if (argmax(logits.row(b)) == labels[b]) {
            ++hits;
        }
    }
    return double(hits) / double(labels.size());
}

inline double top1_accuracy(const BaseModel& base, const ClassifierHead& head, const Overlay& overlay,
                            const Matrix& x, std::span<const std::size_t> labels) {
    detail::check_eval_set(x, labels);
    return top1_accuracy_from_logits(head_logits(head, pooled_features(base, overlay, x)), labels);
}

/// Trainable parameter counts per group, classifier head excluded.
struct ParamCounts {
    std::size_t base = 0;
    std::size_t adapters = 0;
    std::size_t composition = 0;

    std::size_t total() const noexcept { return base + adapters + composition; }
};

/// Closed-form |Θ|: base = all backbone params, adapters = sites·r·(d + c),
/// composition = sites·N (or N when one logit vector is shared by all sites).
inline ParamCounts param_counts(const TrainableMask& mask, const ModelConfig& cfg, std::size_t n_upstream,
                                std::size_t rank, bool shared_logits = false) {
    const std::size_t d = cfg.d_model;
    const std::size_t sites = cfg.blocks * kAdaptedRoles.size();
    ParamCounts pc;
    if (mask.base) {
        const std::size_t per_block = 4 * d * d + 2 * d + 2 * d * cfg.mlp_hidden;
        pc.base = cfg.patch_dim() * d + cfg.tokens() * d + cfg.blocks * per_block + d;
    }
    if (mask.adapters) {
        pc.adapters = sites * rank * (d + d);
    }
    if (mask.composition_v) {
        pc.composition = shared_logits ? n_upstream : sites * n_upstream;
    }
    return pc;
}

}  // namespace loracomp
