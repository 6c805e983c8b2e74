// SPDX-License-Identifier: Apache-2.0
//
// Synthetic classification tasks and few-shot episodes.
//
// A class is a prototype image p ∈ ℝ⁶⁴; a sample is transform(p + σ·ε).
// Prototypes of a generator family are random combinations of that
// family's dictionary atoms, so classes of one family share structure while
// different families do not. The three suite builders realize label shift
// (disjoint classes, one family), covariate shift (shared classes, distinct
// input transforms) and task shift (distinct families and classes).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "loracomp/core.hpp"
#include "loracomp/model.hpp"

namespace loracomp {

inline constexpr std::size_t kImageSide = 8;
inline constexpr std::size_t kInputDim = kImageSide * kImageSide;
inline constexpr std::size_t kClassesPerTask = 8;
inline constexpr std::size_t kPoolPerClass = 500;
inline constexpr std::size_t kQueryPerClass = 200;
inline constexpr double kDefaultNoise = 0.1;

/// Shot count meaning "use the whole training pool".
inline constexpr std::size_t kAllShots = std::numeric_limits<std::size_t>::max();

inline std::string shots_name(std::size_t k) { return k == kAllShots ? "all" : std::to_string(k); }

// ---------------------------------------------------------------------------
// Input transforms
// ---------------------------------------------------------------------------

enum class TransformKind { identity, pixel_permutation, sign_flip, mean_blur, contrast };

struct InputTransform {
    TransformKind kind = TransformKind::identity;
    std::uint64_t seed = 0;   // pixel_permutation
    double gamma = 2.0;       // contrast

    std::string name() const {
        switch (kind) {
        case TransformKind::identity:
            return "identity";
        case TransformKind::pixel_permutation:
            return "pixel-permutation";
        case TransformKind::sign_flip:
            return "sign-flip";
        case TransformKind::mean_blur:
            return "mean-blur";
        case TransformKind::contrast:
            return "contrast";
        }
        return "?";
    }

    std::vector<std::size_t> permutation() const {
        std::vector<std::size_t> perm(kInputDim);
        std::iota(perm.begin(), perm.end(), 0);
        RngStream rng = RngStream::substream(seed, "pixel-permutation");
        rng.shuffle(perm);
        return perm;
    }

    /// Applies the transform to one 8×8 image in place.
    void apply(std::span<double> x) const {
        switch (kind) {
        case TransformKind::identity:
            return;
        case TransformKind::pixel_permutation: {
            const std::vector<double> src(x.begin(), x.end());
            const auto perm = permutation();
            for (std::size_t i = 0; i < x.size(); ++i) {
                x[i] = src[perm[i]];
            }
            return;
        }
        case TransformKind::sign_flip:
            for (double& v : x) {
                v = -v;
            }
            return;
        case TransformKind::mean_blur:
            // Non-overlapping 2×2 block average.
            for (std::size_t r = 0; r < kImageSide; r += 2) {
                for (std::size_t c = 0; c < kImageSide; c += 2) {
                    const std::size_t i = r * kImageSide + c;
                    const double m = 0.25 * (x[i] + x[i + 1] + x[i + kImageSide] + x[i + kImageSide + 1]);
                    x[i] = x[i + 1] = x[i + kImageSide] = x[i + kImageSide + 1] = m;
                }
            }
            return;
        case TransformKind::contrast: {
            double mean = 0.0;
            for (double v : x) {
                mean += v;
            }
            mean /= double(x.size());
            for (double& v : x) {
                v = mean + gamma * (v - mean);
            }
            return;
        }
        }
    }

    friend bool operator==(const InputTransform&, const InputTransform&) = default;
};

// ---------------------------------------------------------------------------
// Generator families
// ---------------------------------------------------------------------------

/// Parameters of one prototype generator: `atoms` dictionary directions,
/// each supported on a random `support` fraction of the pixels, mixed with
/// N(0, 1) coefficients and scaled by `scale`.
struct GeneratorFamily {
    std::string tag;
    std::size_t atoms = 12;
    double support = 1.0;
    double scale = 0.25;

    friend bool operator==(const GeneratorFamily&, const GeneratorFamily&) = default;
};

inline GeneratorFamily default_family() { return {"natural", 16, 1.0, 0.3}; }

/// Families used by the task-shift suites; index 0..6, all tags distinct.
inline GeneratorFamily task_shift_family(std::size_t i) {
    static const GeneratorFamily table[] = {
        {"dense-wide", 16, 1.0, 0.25},  {"sparse-quarter", 8, 0.25, 0.5}, {"half-support", 12, 0.5, 0.35},
        {"low-rank", 6, 1.0, 0.3},      {"broad-faint", 24, 1.0, 0.18},   {"sparse-strong", 10, 0.35, 0.55},
        {"base-mix", 20, 0.75, 0.28},
    };
    if (i >= std::size(table)) {
        throw ArgumentError("no task-shift family with index " + std::to_string(i));
    }
    return table[i];
}

/// Dictionary of the family, 64×atoms with unit-norm columns.
inline Matrix family_dictionary(const GeneratorFamily& fam, std::uint64_t seed) {
    RngStream rng = RngStream::substream(seed, "dictionary").child(fam.tag);
    Matrix dict(kInputDim, fam.atoms);
    for (std::size_t a = 0; a < fam.atoms; ++a) {
        double norm = 0.0;
        for (std::size_t i = 0; i < kInputDim; ++i) {
            const bool on = fam.support >= 1.0 || rng.uniform() < fam.support;
            const double v = rng.normal();
            dict(i, a) = on ? v : 0.0;
            norm += dict(i, a) * dict(i, a);
        }
        if (norm == 0.0) {
            dict(a % kInputDim, a) = 1.0;
            norm = 1.0;
        }
        for (std::size_t i = 0; i < kInputDim; ++i) {
            dict(i, a) /= std::sqrt(norm);
        }
    }
    return dict;
}

/// Prototype of global class `cls` under `fam`. Depends only on (seed, family, class).
inline std::vector<double> class_prototype(const GeneratorFamily& fam, const Matrix& dict, std::uint64_t seed,
                                           std::size_t cls) {
    RngStream rng = RngStream::substream(seed, "prototype").child(fam.tag).child("class", cls);
    std::vector<double> coef(fam.atoms);
    for (double& c : coef) {
        c = rng.normal();
    }
    std::vector<double> p(kInputDim, 0.0);
    for (std::size_t i = 0; i < kInputDim; ++i) {
        for (std::size_t a = 0; a < fam.atoms; ++a) {
            p[i] += dict(i, a) * coef[a];
        }
        p[i] *= fam.scale;
    }
    return p;
}

// ---------------------------------------------------------------------------
// Tasks, suites, episodes
// ---------------------------------------------------------------------------

struct TaskSpec {
    std::string id;
    std::vector<std::size_t> labels;  // global class ids; local label = position
    Matrix prototypes;                // classes×64
    double noise = kDefaultNoise;
    InputTransform transform;
    GeneratorFamily family;
    std::uint64_t data_seed = 0;

    std::size_t classes() const noexcept { return labels.size(); }

    friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

enum class Regime { label_shift, covariate_shift, task_shift };

inline std::string regime_name(Regime r) {
    switch (r) {
    case Regime::label_shift:
        return "label_shift";
    case Regime::covariate_shift:
        return "covariate_shift";
    case Regime::task_shift:
        return "task_shift";
    }
    return "?";
}

inline Regime parse_regime(const std::string& s) {
    if (s == "label_shift" || s == "label-shift") return Regime::label_shift;
    if (s == "covariate_shift" || s == "covariate-shift") return Regime::covariate_shift;
    if (s == "task_shift" || s == "task-shift") return Regime::task_shift;
    throw ArgumentError("unknown regime '" + s + "'");
}

struct SuiteSpec {
    Regime regime = Regime::label_shift;
    std::string name;
    std::vector<TaskSpec> upstream;
    TaskSpec downstream;
    TaskSpec base_task;
    std::uint64_t seed = 0;

    /// True when every upstream task shares the downstream label space.
    bool shared_label_space() const {
        return std::all_of(upstream.begin(), upstream.end(),
                           [&](const TaskSpec& t) { return t.labels == downstream.labels; });
    }
};

inline TaskSpec make_task(std::string id, const GeneratorFamily& fam, std::uint64_t seed,
                          std::vector<std::size_t> labels, InputTransform transform = {},
                          double noise = kDefaultNoise) {
    if (labels.empty()) {
        throw ArgumentError("task '" + id + "' needs at least one class");
    }
    const Matrix dict = family_dictionary(fam, seed);
    TaskSpec t;
    t.id = std::move(id);
    t.labels = std::move(labels);
    t.prototypes = Matrix(t.labels.size(), kInputDim);
    for (std::size_t j = 0; j < t.labels.size(); ++j) {
        const auto p = class_prototype(fam, dict, seed, t.labels[j]);
        std::copy(p.begin(), p.end(), t.prototypes.row(j).begin());
    }
    t.noise = noise;
    t.transform = transform;
    t.family = fam;
    t.data_seed = detail::mix64(seed ^ detail::fnv1a(t.id));
    return t;
}

inline std::vector<std::size_t> label_range(std::size_t first, std::size_t count) {
    std::vector<std::size_t> out(count);
    std::iota(out.begin(), out.end(), first);
    return out;
}

/// Disjoint upstream label blocks plus one downstream block taken from a
/// pool of `upstream_classes + downstream_classes` classes of one family.
/// The base task uses the next `kClassesPerTask` classes, unseen by all.
inline SuiteSpec make_label_partition_suite(std::size_t upstream_classes, std::size_t downstream_classes,
                                            std::size_t n_upstream, std::uint64_t seed) {
    if (n_upstream == 0 || upstream_classes % n_upstream != 0) {
        throw ArgumentError("cannot split " + std::to_string(upstream_classes) + " upstream classes into " +
                            std::to_string(n_upstream) + " equal tasks");
    }
    const GeneratorFamily fam = default_family();
    const std::size_t per = upstream_classes / n_upstream;
    SuiteSpec s;
    s.regime = Regime::label_shift;
    s.seed = seed;
    s.name = "label_shift";
    for (std::size_t i = 0; i < n_upstream; ++i) {
        s.upstream.push_back(make_task("upstream-" + std::to_string(i + 1), fam, seed, label_range(i * per, per)));
    }
    s.downstream = make_task("downstream", fam, seed, label_range(upstream_classes, downstream_classes));
    s.base_task =
        make_task("base", fam, seed, label_range(upstream_classes + downstream_classes, kClassesPerTask));
    return s;
}

/// `total_classes` split evenly into n_upstream upstream tasks and one
/// downstream task, all disjoint.
inline SuiteSpec make_label_shift_suite(std::size_t total_classes, std::size_t n_upstream, std::uint64_t seed) {
    if (n_upstream == 0 || total_classes % (n_upstream + 1) != 0) {
        throw ArgumentError(std::to_string(total_classes) + " classes do not split into " +
                            std::to_string(n_upstream + 1) + " equal tasks");
    }
    const std::size_t per = total_classes / (n_upstream + 1);
    return make_label_partition_suite(per * n_upstream, per, n_upstream, seed);
}

/// Label-shift variant where the downstream classes overlap the upstream
/// pool: downstream = classes [offset, offset + per_task).
inline SuiteSpec make_entangled_suite(std::size_t n_upstream, std::size_t per_task, std::size_t downstream_offset,
                                      std::uint64_t seed) {
    if (n_upstream == 0 || per_task == 0) {
        throw ArgumentError("entangled suite needs upstream tasks with at least one class");
    }
    if (downstream_offset + per_task > n_upstream * per_task) {
        throw ArgumentError("entangled downstream window exceeds the upstream class pool");
    }
    const GeneratorFamily fam = default_family();
    SuiteSpec s;
    s.regime = Regime::label_shift;
    s.seed = seed;
    s.name = "entangled";
    for (std::size_t i = 0; i < n_upstream; ++i) {
        s.upstream.push_back(
            make_task("upstream-" + std::to_string(i + 1), fam, seed, label_range(i * per_task, per_task)));
    }
    s.downstream = make_task("downstream", fam, seed, label_range(downstream_offset, per_task));
    s.base_task = make_task("base", fam, seed, label_range(n_upstream * per_task, kClassesPerTask));
    return s;
}

/// Shared classes {0..7}; every task sees them through its own transform.
/// The downstream transform is never used upstream.
inline SuiteSpec make_covariate_shift_suite(std::size_t n_upstream, std::uint64_t seed,
                                            TransformKind downstream_kind = TransformKind::pixel_permutation) {
    const std::vector<TransformKind> pool{TransformKind::identity, TransformKind::sign_flip,
                                          TransformKind::mean_blur, TransformKind::contrast,
                                          TransformKind::pixel_permutation};
    std::vector<TransformKind> available;
    for (TransformKind k : pool) {
        if (k != downstream_kind) {
            available.push_back(k);
        }
    }
    if (n_upstream == 0) {
        throw ArgumentError("covariate-shift suite needs at least one upstream task");
    }
    if (n_upstream > available.size()) {
        throw ConfigError("transform pool exhausted: " + std::to_string(n_upstream) + " upstream domains requested, " +
                          std::to_string(available.size()) + " available");
    }
    const GeneratorFamily fam = default_family();
    const auto labels = label_range(0, kClassesPerTask);
    auto transform = [&](TransformKind k) {
        InputTransform t;
        t.kind = k;
        t.seed = detail::mix64(seed + 17);
        return t;
    };
    SuiteSpec s;
    s.regime = Regime::covariate_shift;
    s.seed = seed;
    s.name = "covariate_shift";
    for (std::size_t i = 0; i < n_upstream; ++i) {
        s.upstream.push_back(make_task("upstream-" + std::to_string(i + 1) + "-" + transform(available[i]).name(), fam,
                                       seed, labels, transform(available[i])));
    }
    s.downstream = make_task("downstream-" + transform(downstream_kind).name(), fam, seed, labels,
                             transform(downstream_kind));
    s.base_task = make_task("base", fam, seed, label_range(kClassesPerTask, kClassesPerTask),
                            transform(TransformKind::identity));
    return s;
}

/// Tasks 0..n_upstream, each with its own family and class block;
/// `downstream_index` picks which of them is held out as downstream.
inline SuiteSpec make_task_shift_suite(std::size_t n_upstream, std::uint64_t seed, std::size_t downstream_index) {
    if (n_upstream == 0) {
        throw ArgumentError("task-shift suite needs at least one upstream task");
    }
    if (n_upstream + 1 > 6) {
        throw ConfigError("task-shift suites support at most 5 upstream tasks");
    }
    if (downstream_index > n_upstream) {
        throw ArgumentError("downstream index outside the task rotation");
    }
    SuiteSpec s;
    s.regime = Regime::task_shift;
    s.seed = seed;
    s.name = "task_shift";
    for (std::size_t i = 0; i <= n_upstream; ++i) {
        const GeneratorFamily fam = task_shift_family(i);
        TaskSpec t = make_task(fam.tag, fam, seed, label_range(i * kClassesPerTask, kClassesPerTask));
        if (i == downstream_index) {
            s.downstream = std::move(t);
        } else {
            s.upstream.push_back(std::move(t));
        }
    }
    const GeneratorFamily base_fam = task_shift_family(6);
    s.base_task = make_task("base", base_fam, seed, label_range(6 * kClassesPerTask, kClassesPerTask));
    return s;
}

inline SuiteSpec make_task_shift_suite(std::size_t n_upstream, std::uint64_t seed) {
    return make_task_shift_suite(n_upstream, seed, n_upstream);
}

/// Every (downstream = i, upstream = rest) configuration.
inline std::vector<SuiteSpec> task_shift_rotation(std::size_t n_tasks, std::uint64_t seed) {
    if (n_tasks < 2) {
        throw ArgumentError("task rotation needs at least two tasks");
    }
    std::vector<SuiteSpec> out;
    for (std::size_t i = 0; i < n_tasks; ++i) {
        out.push_back(make_task_shift_suite(n_tasks - 1, seed, i));
    }
    return out;
}

/// One labeled sample; `index` addresses it within its split.
inline std::vector<double> draw_sample(const TaskSpec& task, std::string_view split, std::size_t local_class,
                                       std::size_t index) {
    RngStream rng = RngStream::substream(task.data_seed, split).child("class", local_class).child("sample", index);
    std::vector<double> x(kInputDim);
    for (std::size_t i = 0; i < kInputDim; ++i) {
        x[i] = task.prototypes(local_class, i) + task.noise * rng.normal();
    }
    task.transform.apply(x);
    return x;
}

struct Episode {
    Batch support;
    Batch query;
    std::size_t k = 0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> support_index;  // pool indices, class-major
};

/// The fixed evaluation split of a task (independent of any episode seed).
inline Batch query_set(const TaskSpec& task, std::size_t per_class = kQueryPerClass) {
    Batch q{Matrix(task.classes() * per_class, kInputDim), {}};
    for (std::size_t c = 0; c < task.classes(); ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            const auto x = draw_sample(task, "query", c, i);
            std::copy(x.begin(), x.end(), q.x.row(c * per_class + i).begin());
            q.labels.push_back(c);
        }
    }
    return q;
}

/// K training samples per class chosen from the task's pool by `seed`,
/// plus the task's query split. K = kAllShots takes the whole pool.
inline Episode sample_episode(const TaskSpec& task, std::size_t k, std::uint64_t seed,
                              std::size_t pool_per_class = kPoolPerClass,
                              std::size_t query_per_class = kQueryPerClass) {
    if (k == 0) {
        throw ArgumentError("episodes need at least one shot per class");
    }
    if (k == kAllShots) {
        k = pool_per_class;
    }
    if (k > pool_per_class) {
        throw ArgumentError(std::to_string(k) + " shots exceed the pool of " + std::to_string(pool_per_class) +
                            " samples per class");
    }
    Episode ep;
    ep.k = k;
    ep.seed = seed;
    ep.support.x = Matrix(task.classes() * k, kInputDim);
    RngStream rng = RngStream::substream(seed, "episode").child(task.id);
    for (std::size_t c = 0; c < task.classes(); ++c) {
        std::vector<std::size_t> idx(pool_per_class);
        std::iota(idx.begin(), idx.end(), 0);
        if (k < pool_per_class) {
            RngStream crng = rng.child("class", c);
            crng.shuffle(idx);
            idx.resize(k);
            std::sort(idx.begin(), idx.end());
        }
        for (std::size_t i = 0; i < k; ++i) {
            const auto x = draw_sample(task, "pool", c, idx[i]);
            std::copy(x.begin(), x.end(), ep.support.x.row(c * k + i).begin());
            ep.support.labels.push_back(c);
            ep.support_index.push_back(idx[i]);
        }
    }
    ep.query = query_set(task, query_per_class);
    return ep;
}

/// Nearest-prototype classifier in transformed input space; the Bayes rule
/// for isotropic noise under identity transforms.
inline double nearest_prototype_accuracy(const TaskSpec& task, const Batch& data) {
    Matrix protos = task.prototypes;
    for (std::size_t c = 0; c < task.classes(); ++c) {
        task.transform.apply(protos.row(c));
    }
    std::size_t hits = 0;
    for (std::size_t r = 0; r < data.size(); ++r) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < task.classes(); ++c) {
            double d = 0.0;
            for (std::size_t i = 0; i < kInputDim; ++i) {
                const double diff = data.x(r, i) - protos(c, i);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        hits += best == data.labels[r];
    }
    return double(hits) / double(data.size());
}

}  // namespace loracomp
