// SPDX-License-Identifier: Apache-2.0
//
// The transfer protocol:
//   1. pretrain_base     full training of Θ₀ on the suite's base task
//   2. train_upstream    one adapter set (+ task head) per upstream task
//   3. adapt             downstream adaptation from a K-shot support set
// plus multi-seed grids (run_suite) and the ablation sweeps (run_ablation).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "loracomp/composition.hpp"
#include "loracomp/core.hpp"
#include "loracomp/lora.hpp"
#include "loracomp/model.hpp"
#include "loracomp/optim.hpp"
#include "loracomp/parallel.hpp"
#include "loracomp/tasks.hpp"

namespace loracomp {

enum class AdaptMethod {
    classifier_tuning,
    full_finetune,
    lora_scratch,
    uniform_composition,
    learned_composition,
    zero_shot_uniform,
};

inline const std::vector<AdaptMethod>& all_methods() {
    static const std::vector<AdaptMethod> m{AdaptMethod::classifier_tuning,   AdaptMethod::full_finetune,
                                            AdaptMethod::lora_scratch,        AdaptMethod::uniform_composition,
                                            AdaptMethod::learned_composition, AdaptMethod::zero_shot_uniform};
    return m;
}

inline std::string method_name(AdaptMethod m) {
    switch (m) {
    case AdaptMethod::classifier_tuning:
        return "classifier";
    case AdaptMethod::full_finetune:
        return "full-ft";
    case AdaptMethod::lora_scratch:
        return "lora";
    case AdaptMethod::uniform_composition:
        return "uniform";
    case AdaptMethod::learned_composition:
        return "learned";
    case AdaptMethod::zero_shot_uniform:
        return "zero-shot";
    }
    return "?";
}

inline AdaptMethod parse_method(const std::string& s) {
    for (AdaptMethod m : all_methods()) {
        if (method_name(m) == s) {
            return m;
        }
    }
    throw ArgumentError("unknown adaptation method '" + s + "'");
}

inline bool is_composition(AdaptMethod m) {
    return m == AdaptMethod::uniform_composition || m == AdaptMethod::learned_composition ||
           m == AdaptMethod::zero_shot_uniform;
}

/// Groups trained in the method's main phase (warm-up always trains the head only).
inline TrainableMask method_mask(AdaptMethod m) {
    switch (m) {
    case AdaptMethod::classifier_tuning:
    case AdaptMethod::uniform_composition:
        return {.head = true};
    case AdaptMethod::full_finetune:
        return {.base = true, .head = true};
    case AdaptMethod::lora_scratch:
        return {.head = true, .adapters = true};
    case AdaptMethod::learned_composition:
        return {.head = true, .composition_v = true};
    case AdaptMethod::zero_shot_uniform:
        return {};
    }
    return {};
}

struct Hyperparams {
    AdamConfig adam;
    double lr_base = 1e-4;
    double lr_head = 1e-3;
    double lr_adapters = 1e-3;
    double lr_v = 1e-2;
    double lr_pretrain = 3e-3;

    std::size_t pretrain_epochs = 30;
    double pretrain_target = 0.95;
    std::size_t upstream_epochs = 50;
    std::size_t adapt_epochs = 100;
    std::size_t warmup_epochs = 5;
    std::size_t batch_size = 32;
    // Optimizer-step cap per training phase; 0 means epochs alone decide.
    std::size_t max_steps = 0;

    std::size_t rank = 4;
    double alpha = 1.0;

    // Learned composition: one logit vector shared by every site.
    bool shared_logits = false;
    // Learned composition: v-only phase (with line-halving) then head-only,
    // instead of training head and v jointly.
    bool sequential_v = false;
    std::size_t max_halvings = 30;

    void validate() const {
        for (double lr : {lr_base, lr_head, lr_adapters, lr_v, lr_pretrain}) {
            if (!(lr > 0.0)) {
                throw ConfigError("learning rates must be positive");
            }
        }
        if (warmup_epochs > adapt_epochs) {
            throw ConfigError("warm-up epochs exceed adaptation epochs");
        }
        if (batch_size == 0) {
            throw ConfigError("batch size must be positive");
        }
        if (rank == 0) {
            throw ConfigError("rank must be positive");
        }
    }
};

/// An upstream task's trained adapters together with its task-local head.
struct UpstreamModule {
    AdapterSet adapters;
    ClassifierHead head;
    std::vector<std::size_t> labels;
};

// ---------------------------------------------------------------------------
// Optimization plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline Batch gather(const Batch& data, std::span<const std::size_t> idx) {
    Batch b{Matrix(idx.size(), data.x.cols()), {}};
    b.labels.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy(data.x.row(idx[i]).begin(), data.x.row(idx[i]).end(), b.x.row(i).begin());
        b.labels.push_back(data.labels[idx[i]]);
    }
    return b;
}

/// Shuffled minibatch schedule: epoch e is a permutation drawn from (rng, e).
class Schedule {
public:
    Schedule(std::size_t n, std::size_t batch_size, RngStream rng)
        : n_(n), batch_(std::min(batch_size, n)), rng_(rng) {}

    template <class F>
    std::size_t run(std::size_t epochs, std::size_t max_steps, F&& step) {
        std::size_t steps = 0;
        std::vector<std::size_t> order(n_);
        for (std::size_t e = 0; e < epochs; ++e) {
            std::iota(order.begin(), order.end(), 0);
            RngStream er = rng_.child("epoch", epoch_++);
            er.shuffle(order);
            for (std::size_t s = 0; s < n_; s += batch_) {
                if (max_steps && steps >= max_steps) {
                    return steps;
                }
                const std::size_t end = std::min(n_, s + batch_);
                step(std::span<const std::size_t>(order.data() + s, end - s));
                ++steps;
            }
        }
        return steps;
    }

private:
    std::size_t n_;
    std::size_t batch_;
    RngStream rng_;
    std::size_t epoch_ = 0;
};

inline void adam_step_head(Adam& opt, ClassifierHead& head, const ClassifierHead& grad) {
    const std::vector<std::span<double>> p{head.weight.values(), head.bias.values()};
    const std::vector<std::span<const double>> g{grad.weight.values(), grad.bias.values()};
    opt.step(p, g);
}

inline void adam_step_base(Adam& opt, BaseModel& base, BaseModel& grad) {
    std::vector<std::span<double>> p;
    std::vector<std::span<const double>> g;
    base.for_each_param([&](const std::string&, Matrix& m) { p.push_back(m.values()); });
    grad.for_each_param([&](const std::string&, Matrix& m) { g.push_back(m.values()); });
    opt.step(p, g);
}

inline void adam_step_adapters(Adam& opt, AdapterSet& set, const std::map<SiteId, AdapterGrad>& grads) {
    std::vector<std::span<double>> p;
    std::vector<std::span<const double>> g;
    for (auto& [site, ad] : set.sites) {
        const AdapterGrad& ag = grads.at(site);
        p.push_back(ad.a.values());
        p.push_back(ad.b.values());
        g.push_back(ag.da.values());
        g.push_back(ag.db.values());
    }
    opt.step(p, g);
}

/// Logit gradient in optimizer layout: one buffer per site, or a single
/// summed buffer when logits are shared across sites.
inline std::vector<std::vector<double>> logit_grads(const std::map<SiteId, std::vector<double>>& dv, bool shared) {
    std::vector<std::vector<double>> out;
    if (shared) {
        std::vector<double> sum(dv.begin()->second.size(), 0.0);
        for (const auto& [site, g] : dv) {
            for (std::size_t n = 0; n < g.size(); ++n) {
                sum[n] += g[n];
            }
        }
        out.push_back(std::move(sum));
    } else {
        for (const auto& [site, g] : dv) {
            out.push_back(g);
        }
    }
    return out;
}

inline void apply_logit_update(CompositionWeights& w, const std::vector<std::vector<double>>& delta, double scale,
                               bool shared) {
    std::size_t k = 0;
    for (auto& [site, v] : w.logits) {
        const auto& d = delta[shared ? 0 : k++];
        for (std::size_t n = 0; n < v.size(); ++n) {
            v[n] -= scale * d[n];
        }
    }
}

/// Head-only training over fixed pooled features; the backbone is frozen,
/// so features are computed once.
inline void train_head_on_features(ClassifierHead& head, const Matrix& pooled, std::span<const std::size_t> labels,
                                   Adam& opt, Schedule& schedule, std::size_t epochs, std::size_t max_steps) {
    const Batch all{pooled, {labels.begin(), labels.end()}};
    schedule.run(epochs, max_steps, [&](std::span<const std::size_t> idx) {
        const Batch b = gather(all, idx);
        const Matrix logits = head_logits(head, b.x);
        const double inv = 1.0 / double(b.size());
        Matrix dlogits(b.size(), head.classes());
        for (std::size_t r = 0; r < b.size(); ++r) {
            const CrossEntropy ce = cross_entropy(logits.row(r), b.labels[r]);
            for (std::size_t j = 0; j < head.classes(); ++j) {
                dlogits(r, j) = ce.grad[j] * inv;
            }
        }
        ClassifierHead g{matmul_tn(b.x, dlogits), Matrix(1, head.classes())};
        for (std::size_t r = 0; r < b.size(); ++r) {
            for (std::size_t j = 0; j < head.classes(); ++j) {
                g.bias(0, j) += dlogits(r, j);
            }
        }
        adam_step_head(opt, head, g);
    });
}

inline double mean_loss(const BaseModel& base, const ClassifierHead& head, const Overlay& overlay, const Batch& data) {
    return loss_and_grads(base, head, overlay, data, {}).loss;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Phase 1 and 2
// ---------------------------------------------------------------------------

struct PretrainResult {
    BaseModel base;
    ClassifierHead head;  // base-task head, used only for diagnostics
    double train_accuracy = 0.0;
    std::size_t epochs = 0;
};

/// Full-parameter training of Θ₀ on the base task until the train accuracy
/// reaches `pretrain_target` or the epoch cap.
inline PretrainResult pretrain(const SuiteSpec& suite, const Hyperparams& hp, std::uint64_t seed,
                               const ModelConfig& cfg = {}) {
    hp.validate();
    const Episode data = sample_episode(suite.base_task, kAllShots, seed);
    PretrainResult r{BaseModel::init(cfg, RngStream::substream(seed, "base-init")),
                     ClassifierHead::zeros(cfg.d_model, suite.base_task.classes()), 0.0, 0};
    Adam opt_base(hp.lr_pretrain, hp.adam), opt_head(hp.lr_pretrain, hp.adam);
    detail::Schedule schedule(data.support.size(), hp.batch_size, RngStream::substream(seed, "pretrain-batches"));
    while (r.epochs < hp.pretrain_epochs && r.train_accuracy < hp.pretrain_target) {
        schedule.run(1, 0, [&](std::span<const std::size_t> idx) {
            const Batch b = detail::gather(data.support, idx);
            LossAndGrads lg = loss_and_grads(r.base, r.head, Overlay::none(), b, {.base = true, .head = true});
            detail::adam_step_base(opt_base, r.base, *lg.grads.base);
            detail::adam_step_head(opt_head, r.head, *lg.grads.head);
        });
        ++r.epochs;
        r.train_accuracy = top1_accuracy(r.base, r.head, Overlay::none(), data.support.x, data.support.labels);
    }
    if (r.train_accuracy < 0.6) {
        throw DiagnosticError("base pretraining reached only " + std::to_string(r.train_accuracy) +
                              " train accuracy; task or configuration is broken");
    }
    return r;
}

inline BaseModel pretrain_base(const SuiteSpec& suite, const Hyperparams& hp, std::uint64_t seed,
                               const ModelConfig& cfg = {}) {
    return pretrain(suite, hp, seed, cfg).base;
}

/// Adapters on every q/k/v site plus a task-local head, trained on the whole
/// upstream pool. The base model is read-only.
inline UpstreamModule train_upstream(const BaseModel& base, const TaskSpec& task, const Hyperparams& hp,
                                     std::uint64_t seed, std::optional<std::size_t> rank = std::nullopt) {
    hp.validate();
    const std::size_t r = rank.value_or(hp.rank);
    const ModelConfig& cfg = base.config;
    const Episode data = sample_episode(task, kAllShots, seed);

    UpstreamModule up;
    up.labels = task.labels;
    up.adapters.provenance = task.id;
    up.adapters.rank = r;
    up.adapters.alpha = hp.alpha;
    RngStream init = RngStream::substream(seed, "upstream-init").child(task.id);
    for (const SiteId& s : adapted_sites(cfg)) {
        RngStream site_rng = init.child(s.name());
        up.adapters.sites[s] = init_adapter(cfg.d_model, cfg.d_model, r, hp.alpha, site_rng);
    }
    up.head = ClassifierHead::zeros(cfg.d_model, task.classes());

    detail::Schedule schedule(data.support.size(), hp.batch_size,
                              RngStream::substream(seed, "upstream-batches").child(task.id));
    Adam opt_head(hp.lr_head, hp.adam), opt_ad(hp.lr_adapters, hp.adam);
    {
        const Matrix pooled = pooled_features(base, Overlay::none(), data.support.x);
        detail::train_head_on_features(up.head, pooled, data.support.labels, opt_head, schedule, hp.warmup_epochs,
                                       hp.max_steps);
    }
    schedule.run(hp.upstream_epochs, hp.max_steps, [&](std::span<const std::size_t> idx) {
        const Batch b = detail::gather(data.support, idx);
        LossAndGrads lg = loss_and_grads(base, up.head, up.adapters, b, {.head = true, .adapters = true});
        detail::adam_step_adapters(opt_ad, up.adapters, lg.grads.adapters);
        detail::adam_step_head(opt_head, up.head, *lg.grads.head);
    });
    const double acc = top1_accuracy(base, up.head, up.adapters, data.support.x, data.support.labels);
    if (acc < 0.6) {
        throw DiagnosticError("upstream task '" + task.id + "' reached only " + std::to_string(acc) +
                              " train accuracy");
    }
    return up;
}

// ---------------------------------------------------------------------------
// Phase 3
// ---------------------------------------------------------------------------

struct AdaptResult {
    AdaptMethod method = AdaptMethod::classifier_tuning;
    ClassifierHead head;
    std::optional<BaseModel> tuned_base;      // full_finetune only
    std::optional<AdapterSet> adapters;       // lora_scratch only
    std::optional<ComposedModel> composed;    // composition methods
    std::vector<double> v_phase_losses;       // sequential learned composition
    ParamCounts params;

    /// Learned logits, or null for every other method.
    const CompositionWeights* weights() const {
        return composed && composed->weights() ? &*composed->weights() : nullptr;
    }

    Overlay overlay() const {
        if (adapters) return Overlay(*adapters);
        if (composed) return Overlay(*composed);
        return Overlay::none();
    }

    const BaseModel& model_base(const BaseModel& frozen) const { return tuned_base ? *tuned_base : frozen; }

    double accuracy(const BaseModel& frozen, const Batch& query) const {
        return top1_accuracy(model_base(frozen), head, overlay(), query.x, query.labels);
    }
};

namespace detail {

inline std::shared_ptr<const std::vector<AdapterSet>> adapter_sets(std::span<const UpstreamModule> upstream) {
    auto sets = std::make_shared<std::vector<AdapterSet>>();
    for (const UpstreamModule& u : upstream) {
        sets->push_back(u.adapters);
    }
    return sets;
}

/// v-only optimization with a safeguard: a step that raises the full-support
/// loss is halved until it does not (or skipped).
inline void learned_v_phase(const BaseModel& base, const ClassifierHead& head, ComposedModel& composed,
                            const Batch& support, const Hyperparams& hp, std::size_t steps,
                            std::vector<double>& losses) {
    Adam opt(hp.lr_v, hp.adam);
    double current = mean_loss(base, head, composed, support);
    losses.push_back(current);
    for (std::size_t s = 0; s < steps; ++s) {
        const LossAndGrads lg = loss_and_grads(base, head, composed, support, {.composition_v = true});
        const auto grads = logit_grads(lg.grads.composition_v, hp.shared_logits);
        std::vector<std::span<const double>> gs(grads.begin(), grads.end());
        const auto dir = opt.direction(gs);
        const CompositionWeights start = *composed.weights();
        double scale = 1.0;
        bool accepted = false;
        for (std::size_t h = 0; h <= hp.max_halvings; ++h, scale *= 0.5) {
            CompositionWeights trial = start;
            apply_logit_update(trial, dir, scale, hp.shared_logits);
            composed.set_weights(trial);
            const double l = mean_loss(base, head, composed, support);
            if (l <= current) {
                current = l;
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            composed.set_weights(start);
        }
        losses.push_back(current);
    }
}

}  // namespace detail

/// Downstream adaptation on an episode's support set. The head is zero
/// initialized and warmed up alone before the method's groups train.
inline AdaptResult adapt(const BaseModel& base, AdaptMethod method, std::span<const UpstreamModule> upstream,
                         const Episode& episode, const Hyperparams& hp, std::uint64_t seed,
                         std::size_t downstream_classes) {
    hp.validate();
    const ModelConfig& cfg = base.config;
    const std::size_t n_up = upstream.size();
    if (is_composition(method) && n_up == 0) {
        throw ArgumentError(method_name(method) + " needs at least one upstream adapter set");
    }
    if (method != AdaptMethod::zero_shot_uniform && episode.support.size() == 0) {
        throw ArgumentError(method_name(method) + " needs a non-empty support set");
    }

    AdaptResult res;
    res.method = method;
    const TrainableMask mask = method_mask(method);
    res.params = param_counts(mask, cfg, n_up, hp.rank, hp.shared_logits);

    if (method == AdaptMethod::zero_shot_uniform) {
        for (const UpstreamModule& u : upstream) {
            if (u.head.classes() != downstream_classes || u.labels != upstream.front().labels) {
                throw ConfigError("zero-shot composition needs upstream tasks sharing the downstream label space");
            }
        }
        res.composed = compose_model(cfg, detail::adapter_sets(upstream), CompositionMode::uniform);
        res.head = ClassifierHead::zeros(cfg.d_model, downstream_classes);
        const double w = 1.0 / double(n_up);
        for (const UpstreamModule& u : upstream) {
            res.head.weight.add_scaled(u.head.weight, w);
            res.head.bias.add_scaled(u.head.bias, w);
        }
        return res;
    }

    res.head = ClassifierHead::zeros(cfg.d_model, downstream_classes);
    switch (method) {
    case AdaptMethod::full_finetune:
        res.tuned_base = base;
        break;
    case AdaptMethod::lora_scratch: {
        AdapterSet set;
        set.provenance = "downstream-lora";
        set.rank = hp.rank;
        set.alpha = hp.alpha;
        RngStream init = RngStream::substream(seed, "lora-scratch");
        for (const SiteId& s : adapted_sites(cfg)) {
            RngStream site_rng = init.child(s.name());
            set.sites[s] = init_adapter(cfg.d_model, cfg.d_model, hp.rank, hp.alpha, site_rng);
        }
        res.adapters = std::move(set);
        break;
    }
    case AdaptMethod::uniform_composition:
        res.composed = compose_model(cfg, detail::adapter_sets(upstream), CompositionMode::uniform);
        break;
    case AdaptMethod::learned_composition:
        res.composed = compose_model(cfg, detail::adapter_sets(upstream), CompositionMode::learned);
        break;
    default:
        break;
    }

    const Batch& support = episode.support;
    detail::Schedule schedule(support.size(), hp.batch_size, RngStream::substream(seed, "adapt-batches"));
    Adam opt_head(hp.lr_head, hp.adam);
    const std::size_t main_epochs = hp.adapt_epochs - hp.warmup_epochs;

    // Warm-up: head only, over the method's initial (frozen) backbone.
    {
        const Matrix pooled = pooled_features(base, res.overlay(), support.x);
        detail::train_head_on_features(res.head, pooled, support.labels, opt_head, schedule, hp.warmup_epochs,
                                       hp.max_steps);
    }

    if (!mask.needs_backbone_grad()) {
        const Matrix pooled = pooled_features(base, res.overlay(), support.x);
        detail::train_head_on_features(res.head, pooled, support.labels, opt_head, schedule, main_epochs,
                                       hp.max_steps);
        return res;
    }

    if (method == AdaptMethod::learned_composition && hp.sequential_v) {
        const std::size_t v_steps = main_epochs / 2;
        detail::learned_v_phase(base, res.head, *res.composed, support, hp, v_steps, res.v_phase_losses);
        const Matrix pooled = pooled_features(base, res.overlay(), support.x);
        detail::train_head_on_features(res.head, pooled, support.labels, opt_head, schedule, main_epochs - v_steps,
                                       hp.max_steps);
        return res;
    }

    Adam opt_base(hp.lr_base, hp.adam), opt_ad(hp.lr_adapters, hp.adam), opt_v(hp.lr_v, hp.adam);
    schedule.run(main_epochs, hp.max_steps, [&](std::span<const std::size_t> idx) {
        const Batch b = detail::gather(support, idx);
        LossAndGrads lg = loss_and_grads(res.model_base(base), res.head, res.overlay(), b, mask);
        if (mask.base) {
            detail::adam_step_base(opt_base, *res.tuned_base, *lg.grads.base);
        }
        if (mask.adapters) {
            detail::adam_step_adapters(opt_ad, *res.adapters, lg.grads.adapters);
        }
        if (mask.composition_v) {
            CompositionWeights w = *res.composed->weights();
            const auto grads = detail::logit_grads(lg.grads.composition_v, hp.shared_logits);
            std::vector<std::span<double>> ps;
            std::vector<std::vector<double>> shared_buf;
            if (hp.shared_logits) {
                shared_buf.push_back(w.logits.begin()->second);
                ps.push_back(shared_buf[0]);
            } else {
                for (auto& [site, v] : w.logits) {
                    ps.push_back(v);
                }
            }
            std::vector<std::span<const double>> gs(grads.begin(), grads.end());
            opt_v.step(ps, gs);
            if (hp.shared_logits) {
                for (auto& [site, v] : w.logits) {
                    v = shared_buf[0];
                }
            }
            res.composed->set_weights(std::move(w));
        }
        detail::adam_step_head(opt_head, res.head, *lg.grads.head);
    });
    return res;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct ReportRow {
    std::string suite;
    std::string variant;  // ablation axis value, "" for plain runs
    std::string method;
    std::string k;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    std::size_t params = 0;
    std::string status = "ok";
};

/// Mean softmax weight per upstream over all sites, plus the per-site table.
struct WeightDump {
    std::string suite;
    std::string variant;
    std::string k;
    std::uint64_t seed = 0;
    CompositionWeights weights;

    std::vector<double> mean_probabilities() const {
        std::vector<double> mean(weights.count(), 0.0);
        for (const auto& [site, v] : weights.logits) {
            const auto p = softmax(v);
            for (std::size_t n = 0; n < p.size(); ++n) {
                mean[n] += p[n] / double(weights.logits.size());
            }
        }
        return mean;
    }
};

struct AggregateRow {
    std::string suite;
    std::string variant;
    std::string method;
    std::string k;
    std::size_t n = 0;
    double mean = 0.0;
    double std = 0.0;
    std::size_t params = 0;
};

struct EvalReport {
    std::string config_hash;
    std::vector<ReportRow> rows;
    std::vector<WeightDump> weights;
    bool complete = true;

    /// Mean and sample standard deviation over seeds, keyed in first-seen order.
    std::vector<AggregateRow> aggregates() const {
        std::vector<AggregateRow> out;
        std::map<std::tuple<std::string, std::string, std::string, std::string>, std::vector<double>> acc;
        for (const ReportRow& r : rows) {
            if (r.status != "ok") {
                continue;
            }
            auto key = std::make_tuple(r.suite, r.variant, r.method, r.k);
            if (!acc.count(key)) {
                out.push_back({r.suite, r.variant, r.method, r.k, 0, 0.0, 0.0, r.params});
            }
            acc[key].push_back(r.accuracy);
        }
        for (AggregateRow& a : out) {
            const auto& v = acc[std::make_tuple(a.suite, a.variant, a.method, a.k)];
            a.n = v.size();
            a.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
            double ss = 0.0;
            for (double x : v) {
                ss += (x - a.mean) * (x - a.mean);
            }
            a.std = v.size() > 1 ? std::sqrt(ss / double(v.size() - 1)) : 0.0;
        }
        return out;
    }

    std::optional<AggregateRow> find(const std::string& variant, const std::string& method,
                                     const std::string& k) const {
        for (const AggregateRow& a : aggregates()) {
            if (a.variant == variant && a.method == method && a.k == k) {
                return a;
            }
        }
        return std::nullopt;
    }
};

/// A suite with its pretrained base and trained upstream modules.
struct PreparedSuite {
    SuiteSpec suite;
    BaseModel base;
    std::vector<UpstreamModule> upstream;
};

/// Pretrains Θ₀ and every upstream module of a suite with `seed`. Upstream
/// modules train independently; `ranks` (cycled) overrides hp.rank.
inline PreparedSuite prepare_suite(SuiteSpec suite, const Hyperparams& hp, std::uint64_t seed,
                                   const std::vector<std::size_t>& ranks = {}, const ModelConfig& cfg = {}) {
    PreparedSuite p{std::move(suite), {}, {}};
    p.base = pretrain_base(p.suite, hp, seed, cfg);
    p.upstream.resize(p.suite.upstream.size());
    parallel_for(p.suite.upstream.size(), [&](std::size_t i) {
        std::optional<std::size_t> r;
        if (!ranks.empty()) {
            r = ranks[i % ranks.size()];
        }
        p.upstream[i] = train_upstream(p.base, p.suite.upstream[i], hp, seed, r);
    });
    return p;
}

struct CellResult {
    ReportRow row;
    std::optional<WeightDump> weights;
};

/// One (method, K, seed) cell. Episodes depend only on (task, K, seed), so
/// every method in a grid sees the same support set.
inline CellResult run_cell(const PreparedSuite& prepared, std::span<const UpstreamModule> upstream,
                           AdaptMethod method, std::size_t k, std::uint64_t seed, const Hyperparams& hp,
                           const std::string& variant = "") {
    CellResult out;
    out.row = {prepared.suite.name, variant, method_name(method), shots_name(k), seed, 0.0, 0, "ok"};
    try {
        const Episode ep = sample_episode(prepared.suite.downstream, k, seed);
        const AdaptResult res = adapt(prepared.base, method, upstream, ep, hp, seed, prepared.suite.downstream.classes());
        out.row.accuracy = res.accuracy(prepared.base, ep.query);
        out.row.params = res.params.total();
        if (auto w = res.weights()) {
            out.weights = WeightDump{prepared.suite.name, variant, shots_name(k), seed, *w};
        }
    } catch (const std::exception& e) {
        out.row.status = std::string("error: ") + e.what();
    }
    return out;
}

struct GridJob {
    std::string variant;
    std::vector<std::size_t> upstream_idx;  // subset of the prepared upstream modules
    AdaptMethod method;
    std::size_t k;
    std::uint64_t seed;
};

inline void run_jobs(const PreparedSuite& prepared, const std::vector<GridJob>& jobs, const Hyperparams& hp,
                     EvalReport& report) {
    std::vector<CellResult> results(jobs.size());
    parallel_for(jobs.size(), [&](std::size_t i) {
        const GridJob& j = jobs[i];
        std::vector<UpstreamModule> subset;
        for (std::size_t u : j.upstream_idx) {
            subset.push_back(prepared.upstream.at(u));
        }
        results[i] = run_cell(prepared, subset, j.method, j.k, j.seed, hp, j.variant);
    });
    for (CellResult& r : results) {
        if (r.row.status != "ok") {
            report.complete = false;
        }
        report.rows.push_back(std::move(r.row));
        if (r.weights) {
            report.weights.push_back(std::move(*r.weights));
        }
    }
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), 0);
    return v;
}

/// Full factorial over methods × K × seeds on one prepared suite.
inline EvalReport run_suite(const PreparedSuite& prepared, const std::vector<AdaptMethod>& methods,
                            const std::vector<std::size_t>& k_grid, const std::vector<std::uint64_t>& seeds,
                            const Hyperparams& hp) {
    EvalReport report;
    std::vector<GridJob> jobs;
    for (AdaptMethod m : methods) {
        for (std::size_t k : k_grid) {
            for (std::uint64_t s : seeds) {
                jobs.push_back({"", all_indices(prepared.upstream.size()), m, k, s});
            }
        }
    }
    run_jobs(prepared, jobs, hp, report);
    return report;
}

enum class AblationKind { scaling_n, split_size, rank, entangled };

inline std::string ablation_name(AblationKind k) {
    switch (k) {
    case AblationKind::scaling_n:
        return "scaling-n";
    case AblationKind::split_size:
        return "split-size";
    case AblationKind::rank:
        return "rank";
    case AblationKind::entangled:
        return "entangled";
    }
    return "?";
}

inline AblationKind parse_ablation(const std::string& s) {
    for (AblationKind k : {AblationKind::scaling_n, AblationKind::split_size, AblationKind::rank,
                           AblationKind::entangled}) {
        if (ablation_name(k) == s) {
            return k;
        }
    }
    throw ArgumentError("unknown ablation kind '" + s + "'");
}

struct AblationConfig {
    AblationKind kind = AblationKind::scaling_n;
    std::vector<std::size_t> k_grid{kAllShots};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::uint64_t suite_seed = 0;
    Hyperparams hp;
    ModelConfig model;
    std::vector<std::size_t> grid;  // N values, split counts, ranks or window offsets; empty = defaults
};

inline EvalReport run_ablation(const AblationConfig& cfg) {
    EvalReport report;
    const Hyperparams& hp = cfg.hp;
    auto add_jobs = [&](std::vector<GridJob>& jobs, const std::string& variant, const std::vector<std::size_t>& idx,
                        const std::vector<AdaptMethod>& methods) {
        for (AdaptMethod m : methods) {
            for (std::size_t k : cfg.k_grid) {
                for (std::uint64_t s : cfg.seeds) {
                    jobs.push_back({variant, idx, m, k, s});
                }
            }
        }
    };
    const std::vector<AdaptMethod> compositions{AdaptMethod::uniform_composition, AdaptMethod::learned_composition};

    switch (cfg.kind) {
    case AblationKind::scaling_n: {
        const PreparedSuite p = prepare_suite(make_task_shift_suite(5, cfg.suite_seed), hp, cfg.suite_seed, {}, cfg.model);
        const auto ns = cfg.grid.empty() ? std::vector<std::size_t>{1, 2, 3, 4, 5} : cfg.grid;
        std::vector<GridJob> jobs;
        for (std::size_t n : ns) {
            if (n == 0 || n > p.upstream.size()) {
                throw ConfigError("scaling-n grid value " + std::to_string(n) + " outside 1.." +
                                  std::to_string(p.upstream.size()));
            }
            if (n == 1) {
                for (std::size_t i = 0; i < p.upstream.size(); ++i) {
                    add_jobs(jobs, "N=1:" + p.upstream[i].adapters.provenance, {i},
                             {AdaptMethod::uniform_composition});
                }
            } else {
                add_jobs(jobs, "N=" + std::to_string(n), all_indices(n), compositions);
            }
        }
        run_jobs(p, jobs, hp, report);
        break;
    }
    case AblationKind::split_size: {
        const auto splits = cfg.grid.empty() ? std::vector<std::size_t>{1, 3, 5} : cfg.grid;
        for (std::size_t n : splits) {
            const PreparedSuite p =
                prepare_suite(make_label_partition_suite(30, kClassesPerTask, n, cfg.suite_seed), hp,
                              cfg.suite_seed, {}, cfg.model);
            std::vector<GridJob> jobs;
            add_jobs(jobs, "splits=" + std::to_string(n), all_indices(n), compositions);
            run_jobs(p, jobs, hp, report);
        }
        break;
    }
    case AblationKind::rank: {
        const auto ranks = cfg.grid.empty() ? std::vector<std::size_t>{2, 4, 8} : cfg.grid;
        const SuiteSpec suite = make_task_shift_suite(5, cfg.suite_seed);
        for (std::size_t r : ranks) {
            Hyperparams rhp = hp;
            rhp.rank = r;
            const PreparedSuite p = prepare_suite(suite, rhp, cfg.suite_seed, {}, cfg.model);
            std::vector<GridJob> jobs;
            add_jobs(jobs, "r=" + std::to_string(r), all_indices(p.upstream.size()),
                     {AdaptMethod::lora_scratch, AdaptMethod::uniform_composition, AdaptMethod::learned_composition});
            run_jobs(p, jobs, rhp, report);
        }
        const PreparedSuite mixed = prepare_suite(suite, hp, cfg.suite_seed, ranks, cfg.model);
        std::vector<GridJob> jobs;
        add_jobs(jobs, "r=mixed", all_indices(mixed.upstream.size()), compositions);
        run_jobs(mixed, jobs, hp, report);
        break;
    }
    case AblationKind::entangled: {
        // Downstream windows: upstream 4's classes, upstream 2's classes, and a
        // window straddling upstreams 1 and 2.
        const auto offsets = cfg.grid.empty() ? std::vector<std::size_t>{24, 8, 4} : cfg.grid;
        for (std::size_t off : offsets) {
            const PreparedSuite p =
                prepare_suite(make_entangled_suite(4, kClassesPerTask, off, cfg.suite_seed), hp,
                              cfg.suite_seed, {}, cfg.model);
            std::vector<GridJob> jobs;
            add_jobs(jobs, "classes=" + std::to_string(off) + "-" + std::to_string(off + kClassesPerTask - 1),
                     all_indices(p.upstream.size()), compositions);
            run_jobs(p, jobs, hp, report);
        }
        break;
    }
    }
    return report;
}

}  // namespace loracomp
