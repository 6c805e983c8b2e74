// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. run_cli() is callable in-process so tests can
// drive it without spawning the binary.
//
// Exit codes: 0 ok, 1 usage, 2 data/format/config, 3 diagnostic.
#pragma once

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "loracomp/analysis.hpp"
#include "loracomp/io.hpp"
#include "loracomp/trainer.hpp"

namespace loracomp {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitDiagnostic = 3 };

namespace detail {

namespace fs = std::filesystem;

struct CliState {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::string base_path;
    std::size_t task = 0;
    std::string method;
    std::string k = "all";
    std::vector<std::string> upstream_paths;
    std::string ablation_kind;
};

inline RunConfig load_config(const CliState& s) {
    RunConfig cfg = s.config_path.empty() ? RunConfig{} : load_run_config(s.config_path);
    if (!s.out_dir.empty()) {
        cfg.output_dir = s.out_dir;
    }
    return cfg;
}

inline std::size_t parse_k(const std::string& k) {
    if (k == "all") {
        return kAllShots;
    }
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(k, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != k.size() || v == 0) {
        throw ArgumentError("--k expects a positive integer or 'all', got '" + k + "'");
    }
    return std::size_t(v);
}

inline fs::path base_path(const CliState& s, const RunConfig& cfg) {
    return s.base_path.empty() ? fs::path(cfg.output_dir) / "base.ckpt" : fs::path(s.base_path);
}

inline void print_aggregates(const EvalReport& r, std::ostream& out) {
    out << std::left << std::setw(16) << "variant" << std::setw(12) << "method" << std::setw(6) << "K"
        << std::setw(20) << "accuracy" << "|Theta|\n";
    for (const AggregateRow& a : r.aggregates()) {
        std::ostringstream acc;
        acc << std::fixed << std::setprecision(2) << 100.0 * a.mean << " +- " << 100.0 * a.std;
        out << std::left << std::setw(16) << (a.variant.empty() ? "-" : a.variant) << std::setw(12) << a.method
            << std::setw(6) << a.k << std::setw(20) << acc.str() << a.params << "\n";
    }
    if (!r.complete) {
        out << "report incomplete: see status column of rows.csv\n";
    }
}

inline int cmd_pretrain(const CliState& s, std::ostream& out) {
    RunConfig cfg = load_config(s);
    if (s.seed) cfg.seed = *s.seed;
    const SuiteSpec suite = make_suite(cfg.suite, cfg.seed);
    const BaseModel base = pretrain_base(suite, cfg.hp, cfg.seed, cfg.model);
    const fs::path path = base_path(s, cfg);
    save_base(base, cfg.seed, path);
    out << "base checkpoint " << path.string() << " (config " << config_hash(cfg) << ")\n";
    return kExitOk;
}

inline int cmd_train_upstream(const CliState& s, std::ostream& out) {
    RunConfig cfg = load_config(s);
    if (s.seed) cfg.seed = *s.seed;
    const SuiteSpec suite = make_suite(cfg.suite, cfg.seed);
    if (s.task == 0 || s.task > suite.upstream.size()) {
        throw ArgumentError("--task must be in 1.." + std::to_string(suite.upstream.size()));
    }
    const BaseModel base = load_base(base_path(s, cfg), cfg.model);
    const TaskSpec& task = suite.upstream[s.task - 1];
    const UpstreamModule up = train_upstream(base, task, cfg.hp, cfg.seed);
    const fs::path path = fs::path(cfg.output_dir) / (task.id + ".adapter");
    save_adapter({up.adapters, cfg.model.hash(), cfg.seed, up.head, up.labels}, path);
    const Batch q = query_set(task);
    out << task.id << " query accuracy " << top1_accuracy(base, up.head, up.adapters, q.x, q.labels) << " -> "
        << path.string() << "\n";
    return kExitOk;
}

inline int cmd_adapt(const CliState& s, std::ostream& out) {
    const RunConfig cfg = load_config(s);
    const AdaptMethod method = parse_method(s.method);
    const std::size_t k = parse_k(s.k);
    const std::uint64_t seed = s.seed.value_or(cfg.seeds.front());
    const SuiteSpec suite = make_suite(cfg.suite, cfg.seed);
    if (method == AdaptMethod::zero_shot_uniform && !suite.shared_label_space()) {
        throw ConfigError("zero-shot composition needs a suite whose upstream tasks share the downstream labels; '" +
                          suite.name + "' does not");
    }
    const BaseModel base = load_base(base_path(s, cfg), cfg.model);
    std::vector<UpstreamModule> upstream;
    if (is_composition(method)) {
        std::vector<fs::path> paths(s.upstream_paths.begin(), s.upstream_paths.end());
        if (paths.empty()) {
            for (const TaskSpec& t : suite.upstream) {
                paths.push_back(fs::path(cfg.output_dir) / (t.id + ".adapter"));
            }
        }
        for (const fs::path& p : paths) {
            AdapterFile f = load_adapter(p, cfg.model.hash());
            UpstreamModule u;
            u.adapters = std::move(f.set);
            if (f.head) {
                u.head = *f.head;
            }
            u.labels = std::move(f.labels);
            upstream.push_back(std::move(u));
        }
    }
    const Episode ep = sample_episode(suite.downstream, k, seed);
    const AdaptResult res = adapt(base, method, upstream, ep, cfg.hp, seed, suite.downstream.classes());

    EvalReport report;
    report.config_hash = config_hash(cfg);
    report.rows.push_back({suite.name, "", method_name(method), shots_name(k), seed, res.accuracy(base, ep.query),
                           res.params.total(), "ok"});
    if (auto w = res.weights()) {
        report.weights.push_back({suite.name, "", shots_name(k), seed, *w});
    }
    const fs::path dir =
        fs::path(cfg.output_dir) / "adapt" / (method_name(method) + "-k" + shots_name(k) + "-s" + std::to_string(seed));
    atomic_write(dir / "row.csv", report_rows_csv(report));
    if (!report.weights.empty()) {
        atomic_write(dir / "weights.csv", report_weights_csv(report));
    }
    if (res.adapters) {
        save_adapter({*res.adapters, cfg.model.hash(), seed, res.head, suite.downstream.labels},
                     dir / "downstream.adapter");
    }
    if (res.tuned_base) {
        save_base(*res.tuned_base, seed, dir / "tuned_base.ckpt");
    }
    const ReportRow& row = report.rows.front();
    out << row.suite << " " << row.method << " K=" << row.k << " seed=" << row.seed << " accuracy "
        << format_double(row.accuracy) << " |Theta|=" << row.params << "\n";
    return kExitOk;
}

inline int cmd_bench(const CliState& s, std::ostream& out) {
    RunConfig cfg = load_config(s);
    if (s.seed) cfg.seed = *s.seed;
    const PreparedSuite p = prepare_suite(make_suite(cfg.suite, cfg.seed), cfg.hp, cfg.seed, {}, cfg.model);
    EvalReport r = run_suite(p, cfg.methods, cfg.k_grid, cfg.seeds, cfg.hp);
    r.config_hash = config_hash(cfg);
    write_report(r, cfg.output_dir);
    print_aggregates(r, out);
    out << r.rows.size() << " rows -> " << cfg.output_dir << "\n";
    return kExitOk;
}

inline int cmd_ablate(const CliState& s, std::ostream& out) {
    RunConfig cfg = load_config(s);
    if (s.seed) cfg.seed = *s.seed;
    AblationConfig a;
    a.kind = parse_ablation(s.ablation_kind.empty() ? cfg.ablation : s.ablation_kind);
    a.k_grid = cfg.k_grid;
    a.seeds = cfg.seeds;
    a.suite_seed = cfg.seed;
    a.hp = cfg.hp;
    a.model = cfg.model;
    a.grid = cfg.ablation_grid;
    EvalReport r = run_ablation(a);
    r.config_hash = config_hash(cfg);
    const fs::path dir = fs::path(cfg.output_dir) / ("ablation-" + ablation_name(a.kind));
    write_report(r, dir);
    print_aggregates(r, out);
    out << r.rows.size() << " rows -> " << dir.string() << "\n";
    return kExitOk;
}

/// Ground-truth LoRA on the full downstream pool, one learned composition
/// at the config's first (K, seed), and the CKA map over the query split.
inline int cmd_analyze_cka(const CliState& s, bool no_center, std::ostream& out) {
    RunConfig cfg = load_config(s);
    if (s.seed) cfg.seed = *s.seed;
    const PreparedSuite p = prepare_suite(make_suite(cfg.suite, cfg.seed), cfg.hp, cfg.seed, {}, cfg.model);
    const UpstreamModule gt = train_upstream(p.base, p.suite.downstream, cfg.hp, cfg.seed);
    const std::size_t k = cfg.k_grid.front();
    const std::uint64_t seed = cfg.seeds.front();
    const Episode ep = sample_episode(p.suite.downstream, k, seed);
    const AdaptResult res = adapt(p.base, AdaptMethod::learned_composition, p.upstream, ep, cfg.hp, seed,
                                  p.suite.downstream.classes());
    std::vector<AdapterSet> sets;
    for (const UpstreamModule& u : p.upstream) {
        sets.push_back(u.adapters);
    }
    const CkaMap cka = cka_map(p.base, sets, gt.adapters, ep.query.x, !no_center);
    const WeightMap w = weight_map(*res.weights());
    const fs::path dir = fs::path(cfg.output_dir) / "cka";
    export_maps(cka, w, dir);
    out << "alignment " << format_double(alignment(cka, w)) << " over " << cka.sites.size() << " sites -> "
        << dir.string() << "\n";
    return kExitOk;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Few-shot transfer by composing LoRA adapters on a tiny transformer"};
    app.require_subcommand(1);
    detail::CliState s;
    bool no_center = false;

    auto common = [&](CLI::App* c, bool need_config) {
        auto* opt = c->add_option("--config", s.config_path, "run config (JSON)")->check(CLI::ExistingFile);
        if (need_config) {
            opt->required();
        }
        c->add_option("--out", s.out_dir, "output directory (overrides the config)");
    };

    auto* pre = app.add_subcommand("pretrain", "train the base model on the suite's base task");
    common(pre, true);
    pre->add_option("--seed", s.seed, "suite seed (overrides the config)");
    pre->add_option("--base", s.base_path, "checkpoint path (default <out>/base.ckpt)");

    auto* up = app.add_subcommand("train-upstream", "train adapters for one upstream task");
    common(up, true);
    up->add_option("--task", s.task, "upstream task, 1-based")->required();
    up->add_option("--seed", s.seed, "suite seed (overrides the config)");
    up->add_option("--base", s.base_path, "base checkpoint (default <out>/base.ckpt)");

    auto* ad = app.add_subcommand("adapt", "adapt to the downstream task with one method");
    common(ad, true);
    ad->add_option("--method", s.method, "classifier|full-ft|lora|uniform|learned|zero-shot")->required();
    ad->add_option("--k", s.k, "shots per class, or 'all'");
    ad->add_option("--seed", s.seed, "episode seed (default: first seed of the config)");
    ad->add_option("--base", s.base_path, "base checkpoint (default <out>/base.ckpt)");
    ad->add_option("--upstream", s.upstream_paths, "upstream adapter files (default <out>/<task>.adapter)");

    auto* bench = app.add_subcommand("bench", "full method x K x seed report");
    common(bench, true);
    bench->add_option("--seed", s.seed, "suite seed (overrides the config)");

    auto* abl = app.add_subcommand("ablate", "ablation sweep");
    common(abl, true);
    abl->add_option("--kind", s.ablation_kind, "scaling-n|split-size|rank|entangled")
        ->check(CLI::IsMember({"scaling-n", "split-size", "rank", "entangled"}));
    abl->add_option("--seed", s.seed, "suite seed (overrides the config)");

    auto* cka = app.add_subcommand("analyze-cka", "CKA map against a downstream ground-truth adapter");
    common(cka, true);
    cka->add_option("--seed", s.seed, "suite seed (overrides the config)");
    cka->add_flag("--no-center", no_center, "skip column centering before CKA");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        const CLI::App* sub = nullptr;
        for (const CLI::App* c : app.get_subcommands()) {
            sub = c;
        }
        err << (sub ? sub->help() : app.help());
        return kExitUsage;
    }

    try {
        if (pre->parsed()) return detail::cmd_pretrain(s, out);
        if (up->parsed()) return detail::cmd_train_upstream(s, out);
        if (ad->parsed()) return detail::cmd_adapt(s, out);
        if (bench->parsed()) return detail::cmd_bench(s, out);
        if (abl->parsed()) return detail::cmd_ablate(s, out);
        if (cka->parsed()) return detail::cmd_analyze_cka(s, no_center, out);
    } catch (const DiagnosticError& e) {
        err << "diagnostic: " << e.what() << "\n";
        return kExitDiagnostic;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}

}  // namespace loracomp
