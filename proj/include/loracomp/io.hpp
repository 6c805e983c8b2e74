// SPDX-License-Identifier: Apache-2.0
//
// On-disk artifacts (adapter files, base checkpoints), run configuration
// and report emission. Byte layouts are documented in docs/formats.md.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "loracomp/analysis.hpp"
#include "loracomp/errors.hpp"
#include "loracomp/lora.hpp"
#include "loracomp/model.hpp"
#include "loracomp/model_config.hpp"
#include "loracomp/tasks.hpp"
#include "loracomp/textio.hpp"
#include "loracomp/trainer.hpp"

namespace loracomp {

inline constexpr int kAdapterFormatVersion = 1;
inline constexpr int kBaseFormatVersion = 1;
inline constexpr const char* kReportSchema = "loracomp.report/1";

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) {
        s[std::size_t(i)] = digits[v & 0xF];
    }
    return s;
}

namespace detail {

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
}

inline double get_f64(const char* p) {
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) {
        bits = (bits << 8) | static_cast<unsigned char>(p[i]);
    }
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

inline void put_matrix(std::string& out, const Matrix& m) {
    for (double v : m.values()) {
        put_f64(out, v);
    }
}

/// Header lines "key value..." up to a "payload <bytes>" line, then raw bytes.
struct ParsedArtifact {
    std::string magic;
    int version = 0;
    std::vector<std::pair<std::string, std::string>> fields;
    std::string_view payload;
    std::size_t declared = 0;

    const std::string& field(const std::string& key, const std::string& where) const {
        for (const auto& [k, v] : fields) {
            if (k == key) {
                return v;
            }
        }
        throw FormatError(FormatError::Kind::malformed, where + ": missing header field '" + key + "'");
    }

    std::vector<std::string> all(const std::string& key) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : fields) {
            if (k == key) {
                out.push_back(v);
            }
        }
        return out;
    }
};

inline ParsedArtifact parse_artifact(const std::string& bytes, const std::string& expected_magic, int version,
                                     const std::string& where) {
    ParsedArtifact a;
    std::size_t pos = 0;
    auto next_line = [&]() -> std::optional<std::string> {
        const auto nl = bytes.find('\n', pos);
        if (nl == std::string::npos) {
            return std::nullopt;
        }
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    const auto first = next_line();
    if (!first) {
        throw FormatError(FormatError::Kind::truncated, where + ": file ends inside the header");
    }
    const auto sp = first->find(' ');
    a.magic = first->substr(0, sp);
    if (a.magic != expected_magic || sp == std::string::npos) {
        throw FormatError(FormatError::Kind::malformed, where + ": not a " + expected_magic + " file");
    }
    try {
        a.version = std::stoi(first->substr(sp + 1));
    } catch (const std::exception&) {
        throw FormatError(FormatError::Kind::malformed, where + ": unreadable format version");
    }
    if (a.version != version) {
        throw FormatError(FormatError::Kind::version_mismatch, where + ": format version " +
                                                                   std::to_string(a.version) + ", expected " +
                                                                   std::to_string(version));
    }
    for (;;) {
        const auto line = next_line();
        if (!line) {
            throw FormatError(FormatError::Kind::truncated, where + ": file ends inside the header");
        }
        const auto s = line->find(' ');
        const std::string key = line->substr(0, s);
        const std::string value = s == std::string::npos ? "" : line->substr(s + 1);
        if (key == "payload") {
            try {
                a.declared = std::stoull(value);
            } catch (const std::exception&) {
                throw FormatError(FormatError::Kind::truncated, where + ": unreadable payload length");
            }
            break;
        }
        a.fields.emplace_back(key, value);
    }
    a.payload = std::string_view(bytes).substr(pos);
    if (a.payload.size() != a.declared) {
        throw FormatError(FormatError::Kind::truncated, where + ": payload holds " + std::to_string(a.payload.size()) +
                                                            " bytes, header declares " + std::to_string(a.declared));
    }
    return a;
}

/// Sequential reader over the payload; every read is bounds-checked.
class PayloadReader {
public:
    PayloadReader(std::string_view data, std::string where) : data_(data), where_(std::move(where)) {}

    Matrix matrix(std::size_t rows, std::size_t cols) {
        const std::size_t need = rows * cols * 8;
        if (pos_ + need > data_.size()) {
            throw FormatError(FormatError::Kind::truncated, where_ + ": payload shorter than the header's shapes");
        }
        Matrix m(rows, cols);
        for (double& v : m.values()) {
            v = get_f64(data_.data() + pos_);
            pos_ += 8;
        }
        return m;
    }

    void finish() const {
        if (pos_ != data_.size()) {
            throw FormatError(FormatError::Kind::truncated, where_ + ": payload length disagrees with the header's shapes");
        }
    }

private:
    std::string_view data_;
    std::string where_;
    std::size_t pos_ = 0;
};

inline std::uint64_t parse_u64(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used);
        if (used != s.size()) {
            throw std::invalid_argument(s);
        }
        return v;
    } catch (const std::exception&) {
        throw FormatError(FormatError::Kind::malformed, where + ": expected an integer, got '" + s + "'");
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Adapter files
// ---------------------------------------------------------------------------

/// An adapter set plus the metadata that travels with it. The task head
/// is optional; zero-shot composition needs it.
struct AdapterFile {
    AdapterSet set;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::optional<ClassifierHead> head;
    std::vector<std::size_t> labels;
};

inline std::string encode_adapter(const AdapterFile& f) {
    std::string h = "loracomp-adapter " + std::to_string(kAdapterFormatVersion) + "\n";
    h += "config_hash " + hex64(f.config_hash) + "\n";
    h += "provenance " + f.set.provenance + "\n";
    h += "seed " + std::to_string(f.seed) + "\n";
    h += "rank " + std::to_string(f.set.rank) + "\n";
    h += "alpha " + format_double(f.set.alpha) + "\n";
    std::string payload;
    for (const auto& [site, ad] : f.set.sites) {
        validate_adapter(ad);
        h += "site " + site.name() + " " + std::to_string(ad.in_dim()) + " " + std::to_string(ad.out_dim()) + " " +
             std::to_string(ad.rank()) + " " + format_double(ad.alpha) + "\n";
        detail::put_matrix(payload, ad.a);
        detail::put_matrix(payload, ad.b);
    }
    if (f.head) {
        h += "head " + std::to_string(f.head->weight.rows()) + " " + std::to_string(f.head->classes()) + "\n";
        std::string labels;
        for (std::size_t i = 0; i < f.labels.size(); ++i) {
            labels += (i ? "," : "") + std::to_string(f.labels[i]);
        }
        h += "labels " + labels + "\n";
        detail::put_matrix(payload, f.head->weight);
        detail::put_matrix(payload, f.head->bias);
    }
    h += "payload " + std::to_string(payload.size()) + "\n";
    return h + payload;
}

inline void save_adapter(const AdapterFile& f, const std::filesystem::path& path) {
    atomic_write(path, encode_adapter(f));
}

/// Parses an adapter file; with `expected_hash` the file must come from the
/// same model configuration.
inline AdapterFile decode_adapter(const std::string& bytes, std::optional<std::uint64_t> expected_hash,
                                  const std::string& where) {
    const auto a = detail::parse_artifact(bytes, "loracomp-adapter", kAdapterFormatVersion, where);
    AdapterFile f;
    const std::string& hash = a.field("config_hash", where);
    f.config_hash = 0;
    try {
        f.config_hash = std::stoull(hash, nullptr, 16);
    } catch (const std::exception&) {
        throw FormatError(FormatError::Kind::malformed, where + ": bad config hash");
    }
    if (expected_hash && *expected_hash != f.config_hash) {
        throw FormatError(FormatError::Kind::hash_mismatch, where + ": adapters were trained for model config " +
                                                                hash + ", target model is " + hex64(*expected_hash));
    }
    f.set.provenance = a.field("provenance", where);
    f.seed = detail::parse_u64(a.field("seed", where), where);
    f.set.rank = detail::parse_u64(a.field("rank", where), where);
    f.set.alpha = parse_double(a.field("alpha", where));

    detail::PayloadReader rd(a.payload, where);
    for (const std::string& line : a.all("site")) {
        const auto parts = split(line, ' ');
        if (parts.size() != 5) {
            throw FormatError(FormatError::Kind::malformed, where + ": bad site line '" + line + "'");
        }
        const SiteId s = parse_site(parts[0]);
        const std::size_t d = detail::parse_u64(parts[1], where);
        const std::size_t c = detail::parse_u64(parts[2], where);
        const std::size_t r = detail::parse_u64(parts[3], where);
        if (d == 0 || c == 0 || r == 0 || f.set.sites.count(s)) {
            throw FormatError(FormatError::Kind::malformed, where + ": bad site line '" + line + "'");
        }
        LoraAdapter ad;
        ad.alpha = parse_double(parts[4]);
        ad.a = rd.matrix(d, r);
        ad.b = rd.matrix(c, r);
        f.set.sites[s] = std::move(ad);
    }
    const auto heads = a.all("head");
    if (!heads.empty()) {
        const auto parts = split(heads.front(), ' ');
        if (parts.size() != 2) {
            throw FormatError(FormatError::Kind::malformed, where + ": bad head line");
        }
        const std::size_t d = detail::parse_u64(parts[0], where);
        const std::size_t c = detail::parse_u64(parts[1], where);
        for (const std::string& l : split(a.field("labels", where), ',')) {
            f.labels.push_back(detail::parse_u64(l, where));
        }
        if (f.labels.size() != c) {
            throw FormatError(FormatError::Kind::malformed, where + ": label list does not match the head");
        }
        ClassifierHead head;
        head.weight = rd.matrix(d, c);
        head.bias = rd.matrix(1, c);
        f.head = std::move(head);
    }
    rd.finish();
    return f;
}

inline AdapterFile load_adapter(const std::filesystem::path& path, std::optional<std::uint64_t> expected_hash = {}) {
    return decode_adapter(read_file(path), expected_hash, path.string());
}

// ---------------------------------------------------------------------------
// Base checkpoints
// ---------------------------------------------------------------------------

inline std::string encode_base(const BaseModel& base, std::uint64_t seed) {
    const ModelConfig& c = base.config;
    std::string h = "loracomp-base " + std::to_string(kBaseFormatVersion) + "\n";
    h += "config_hash " + hex64(c.hash()) + "\n";
    h += "config " + c.canonical() + "\n";
    h += "seed " + std::to_string(seed) + "\n";
    std::string payload;
    base.for_each_param([&](const std::string& name, const Matrix& m) {
        h += "param " + name + " " + std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
        detail::put_matrix(payload, m);
    });
    h += "payload " + std::to_string(payload.size()) + "\n";
    return h + payload;
}

inline void save_base(const BaseModel& base, std::uint64_t seed, const std::filesystem::path& path) {
    atomic_write(path, encode_base(base, seed));
}

inline BaseModel decode_base(const std::string& bytes, const ModelConfig& cfg, const std::string& where) {
    const auto a = detail::parse_artifact(bytes, "loracomp-base", kBaseFormatVersion, where);
    if (a.field("config_hash", where) != hex64(cfg.hash())) {
        throw FormatError(FormatError::Kind::hash_mismatch, where + ": checkpoint is for model config " +
                                                                a.field("config", where) + ", expected " +
                                                                cfg.canonical());
    }
    BaseModel base = BaseModel::init(cfg, RngStream(0));
    const auto params = a.all("param");
    std::size_t i = 0;
    detail::PayloadReader rd(a.payload, where);
    base.for_each_param([&](const std::string& name, Matrix& m) {
        if (i >= params.size()) {
            throw FormatError(FormatError::Kind::malformed, where + ": missing parameter " + name);
        }
        const auto parts = split(params[i++], ' ');
        if (parts.size() != 3 || parts[0] != name || detail::parse_u64(parts[1], where) != m.rows() ||
            detail::parse_u64(parts[2], where) != m.cols()) {
            throw FormatError(FormatError::Kind::malformed, where + ": unexpected parameter entry for " + name);
        }
        m = rd.matrix(m.rows(), m.cols());
    });
    if (i != params.size()) {
        throw FormatError(FormatError::Kind::malformed, where + ": unexpected extra parameters");
    }
    rd.finish();
    return base;
}

inline BaseModel load_base(const std::filesystem::path& path, const ModelConfig& cfg = {}) {
    return decode_base(read_file(path), cfg, path.string());
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Which suite a run uses. Fields irrelevant to the regime are ignored.
struct SuiteConfig {
    std::string kind = "label_shift";  // label_shift | covariate_shift | task_shift | entangled
    std::size_t n_upstream = 3;
    std::size_t total_classes = 32;        // label_shift
    std::size_t downstream_offset = 8;     // entangled
    std::size_t downstream_index = 5;      // task_shift; defaults to the last task when > n_upstream
    std::string downstream_transform = "pixel-permutation";  // covariate_shift
};

struct RunConfig {
    SuiteConfig suite;
    std::uint64_t seed = 0;  // suite, base and upstream seed
    std::vector<AdaptMethod> methods{AdaptMethod::classifier_tuning, AdaptMethod::full_finetune,
                                     AdaptMethod::lora_scratch, AdaptMethod::uniform_composition,
                                     AdaptMethod::learned_composition};
    std::vector<std::size_t> k_grid{1, 5, 10, 20, kAllShots};
    std::vector<std::uint64_t> seeds{0, 1, 2};  // episode and adaptation seeds
    Hyperparams hp;
    ModelConfig model;
    std::string ablation = "scaling-n";
    std::vector<std::size_t> ablation_grid;
    std::string output_dir = "out";
};

inline TransformKind parse_transform(const std::string& s) {
    for (TransformKind k : {TransformKind::identity, TransformKind::pixel_permutation, TransformKind::sign_flip,
                            TransformKind::mean_blur, TransformKind::contrast}) {
        InputTransform t;
        t.kind = k;
        if (t.name() == s) {
            return k;
        }
    }
    throw ConfigError("unknown transform '" + s + "'");
}

inline SuiteSpec make_suite(const SuiteConfig& c, std::uint64_t seed) {
    if (c.kind == "label_shift") {
        return make_label_shift_suite(c.total_classes, c.n_upstream, seed);
    }
    if (c.kind == "entangled") {
        return make_entangled_suite(c.n_upstream, kClassesPerTask, c.downstream_offset, seed);
    }
    if (c.kind == "covariate_shift") {
        return make_covariate_shift_suite(c.n_upstream, seed, parse_transform(c.downstream_transform));
    }
    if (c.kind == "task_shift") {
        return make_task_shift_suite(c.n_upstream, seed, std::min(c.downstream_index, c.n_upstream));
    }
    throw ConfigError("unknown suite kind '" + c.kind + "'");
}

namespace detail {

inline nlohmann::ordered_json shots_json(std::size_t k) {
    if (k == kAllShots) {
        return "all";
    }
    return k;
}

inline std::size_t shots_from_json(const nlohmann::json& j) {
    if (j.is_string()) {
        if (j.get<std::string>() != "all") {
            throw ConfigError("K must be a positive integer or \"all\"");
        }
        return kAllShots;
    }
    const auto k = j.get<std::int64_t>();
    if (k <= 0) {
        throw ConfigError("K must be a positive integer or \"all\"");
    }
    return std::size_t(k);
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) {
        out = j.at(key).get<T>();
    }
}

}  // namespace detail

/// Canonical JSON form; every field is written, in a fixed order.
inline nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["suite"] = {{"kind", c.suite.kind},
                  {"n_upstream", c.suite.n_upstream},
                  {"total_classes", c.suite.total_classes},
                  {"downstream_offset", c.suite.downstream_offset},
                  {"downstream_index", c.suite.downstream_index},
                  {"downstream_transform", c.suite.downstream_transform}};
    j["seed"] = c.seed;
    auto methods = nlohmann::ordered_json::array();
    for (AdaptMethod m : c.methods) {
        methods.push_back(method_name(m));
    }
    j["methods"] = methods;
    auto ks = nlohmann::ordered_json::array();
    for (std::size_t k : c.k_grid) {
        ks.push_back(detail::shots_json(k));
    }
    j["k_grid"] = ks;
    j["seeds"] = c.seeds;
    const Hyperparams& h = c.hp;
    j["hyperparams"] = {{"adam_beta1", h.adam.beta1},
                        {"adam_beta2", h.adam.beta2},
                        {"adam_eps", h.adam.eps},
                        {"lr_base", h.lr_base},
                        {"lr_head", h.lr_head},
                        {"lr_adapters", h.lr_adapters},
                        {"lr_v", h.lr_v},
                        {"lr_pretrain", h.lr_pretrain},
                        {"pretrain_epochs", h.pretrain_epochs},
                        {"pretrain_target", h.pretrain_target},
                        {"upstream_epochs", h.upstream_epochs},
                        {"adapt_epochs", h.adapt_epochs},
                        {"warmup_epochs", h.warmup_epochs},
                        {"batch_size", h.batch_size},
                        {"max_steps", h.max_steps},
                        {"rank", h.rank},
                        {"alpha", h.alpha},
                        {"shared_logits", h.shared_logits},
                        {"sequential_v", h.sequential_v},
                        {"max_halvings", h.max_halvings}};
    j["model"] = {{"image_side", c.model.image_side}, {"patch_side", c.model.patch_side},
                  {"d_model", c.model.d_model},       {"heads", c.model.heads},
                  {"blocks", c.model.blocks},         {"mlp_hidden", c.model.mlp_hidden}};
    j["ablation"] = {{"kind", c.ablation}, {"grid", c.ablation_grid}};
    j["output_dir"] = c.output_dir;
    return j;
}

/// Missing keys keep their defaults; unknown keys are rejected so typos
/// do not silently fall back to defaults.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    const RunConfig defaults;
    const nlohmann::ordered_json canonical = to_json(defaults);
    auto check_keys = [](const nlohmann::json& obj, const nlohmann::ordered_json& ref, const std::string& where) {
        if (!obj.is_object()) {
            throw ConfigError(where + " must be an object");
        }
        for (const auto& [k, v] : obj.items()) {
            if (!ref.contains(k)) {
                throw ConfigError("unknown config key '" + where + k + "'");
            }
        }
    };
    RunConfig c;
    try {
        check_keys(j, canonical, "");
        if (j.contains("suite")) {
            const auto& s = j.at("suite");
            check_keys(s, canonical["suite"], "suite.");
            detail::read_opt(s, "kind", c.suite.kind);
            detail::read_opt(s, "n_upstream", c.suite.n_upstream);
            detail::read_opt(s, "total_classes", c.suite.total_classes);
            detail::read_opt(s, "downstream_offset", c.suite.downstream_offset);
            detail::read_opt(s, "downstream_index", c.suite.downstream_index);
            detail::read_opt(s, "downstream_transform", c.suite.downstream_transform);
        }
        detail::read_opt(j, "seed", c.seed);
        if (j.contains("methods")) {
            c.methods.clear();
            for (const auto& m : j.at("methods")) {
                c.methods.push_back(parse_method(m.get<std::string>()));
            }
        }
        if (j.contains("k_grid")) {
            c.k_grid.clear();
            for (const auto& k : j.at("k_grid")) {
                c.k_grid.push_back(detail::shots_from_json(k));
            }
        }
        detail::read_opt(j, "seeds", c.seeds);
        if (j.contains("hyperparams")) {
            const auto& h = j.at("hyperparams");
            check_keys(h, canonical["hyperparams"], "hyperparams.");
            Hyperparams& p = c.hp;
            detail::read_opt(h, "adam_beta1", p.adam.beta1);
            detail::read_opt(h, "adam_beta2", p.adam.beta2);
            detail::read_opt(h, "adam_eps", p.adam.eps);
            detail::read_opt(h, "lr_base", p.lr_base);
            detail::read_opt(h, "lr_head", p.lr_head);
            detail::read_opt(h, "lr_adapters", p.lr_adapters);
            detail::read_opt(h, "lr_v", p.lr_v);
            detail::read_opt(h, "lr_pretrain", p.lr_pretrain);
            detail::read_opt(h, "pretrain_epochs", p.pretrain_epochs);
            detail::read_opt(h, "pretrain_target", p.pretrain_target);
            detail::read_opt(h, "upstream_epochs", p.upstream_epochs);
            detail::read_opt(h, "adapt_epochs", p.adapt_epochs);
            detail::read_opt(h, "warmup_epochs", p.warmup_epochs);
            detail::read_opt(h, "batch_size", p.batch_size);
            detail::read_opt(h, "max_steps", p.max_steps);
            detail::read_opt(h, "rank", p.rank);
            detail::read_opt(h, "alpha", p.alpha);
            detail::read_opt(h, "shared_logits", p.shared_logits);
            detail::read_opt(h, "sequential_v", p.sequential_v);
            detail::read_opt(h, "max_halvings", p.max_halvings);
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            check_keys(m, canonical["model"], "model.");
            detail::read_opt(m, "image_side", c.model.image_side);
            detail::read_opt(m, "patch_side", c.model.patch_side);
            detail::read_opt(m, "d_model", c.model.d_model);
            detail::read_opt(m, "heads", c.model.heads);
            detail::read_opt(m, "blocks", c.model.blocks);
            detail::read_opt(m, "mlp_hidden", c.model.mlp_hidden);
        }
        if (j.contains("ablation")) {
            const auto& a = j.at("ablation");
            check_keys(a, canonical["ablation"], "ablation.");
            detail::read_opt(a, "kind", c.ablation);
            detail::read_opt(a, "grid", c.ablation_grid);
        }
        detail::read_opt(j, "output_dir", c.output_dir);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    c.hp.validate();
    try {
        c.model.validate();
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    if (c.model.image_side != kImageSide) {
        throw ConfigError("tasks produce " + std::to_string(kImageSide) + "x" + std::to_string(kImageSide) +
                          " inputs; model.image_side must match");
    }
    if (c.methods.empty() || c.k_grid.empty() || c.seeds.empty()) {
        throw ConfigError("methods, k_grid and seeds must be non-empty");
    }
    parse_ablation(c.ablation);
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

/// Hash of the canonical config text minus the output directory; embedded
/// in every report a run writes.
inline std::string config_hash(const RunConfig& c) {
    nlohmann::ordered_json j = to_json(c);
    j.erase("output_dir");
    return hex64(detail::fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline std::string report_rows_csv(const EvalReport& r) {
    std::string out = "suite,variant,method,k,seed,accuracy,params,status,config_hash\n";
    for (const ReportRow& row : r.rows) {
        std::string status = row.status;
        for (char& ch : status) {
            if (ch == ',' || ch == '\n' || ch == '"') {
                ch = ';';
            }
        }
        out += row.suite + "," + row.variant + "," + row.method + "," + row.k + "," + std::to_string(row.seed) + "," +
               format_double(row.accuracy) + "," + std::to_string(row.params) + "," + status + "," +
               r.config_hash + "\n";
    }
    return out;
}

inline std::string report_aggregates_csv(const EvalReport& r) {
    std::string out = "suite,variant,method,k,n,mean,std,params,config_hash\n";
    for (const AggregateRow& a : r.aggregates()) {
        out += a.suite + "," + a.variant + "," + a.method + "," + a.k + "," + std::to_string(a.n) + "," +
               format_double(a.mean) + "," + format_double(a.std) + "," + std::to_string(a.params) + "," +
               r.config_hash + "\n";
    }
    return out;
}

/// Per-site softmax weights of every learned composition cell.
inline std::string report_weights_csv(const EvalReport& r) {
    std::string out = "suite,variant,k,seed,site,upstream,logit,weight,config_hash\n";
    for (const WeightDump& w : r.weights) {
        for (const auto& [site, logits] : w.weights.logits) {
            const auto p = softmax(logits);
            for (std::size_t n = 0; n < logits.size(); ++n) {
                out += w.suite + "," + w.variant + "," + w.k + "," + std::to_string(w.seed) + "," + site.name() + "," +
                       w.weights.upstream_order[n] + "," + format_double(logits[n]) + "," + format_double(p[n]) + "," +
                       r.config_hash + "\n";
            }
        }
    }
    return out;
}

/// Mean weight per upstream over sites, one row per learned cell.
inline std::string report_mean_weights_csv(const EvalReport& r) {
    std::string out = "suite,variant,k,seed,upstream,mean_weight,config_hash\n";
    for (const WeightDump& w : r.weights) {
        const auto mean = w.mean_probabilities();
        for (std::size_t n = 0; n < mean.size(); ++n) {
            out += w.suite + "," + w.variant + "," + w.k + "," + std::to_string(w.seed) + "," +
                   w.weights.upstream_order[n] + "," + format_double(mean[n]) + "," + r.config_hash + "\n";
        }
    }
    return out;
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["schema"] = kReportSchema;
    j["config_hash"] = r.config_hash;
    j["complete"] = r.complete;
    auto rows = nlohmann::ordered_json::array();
    for (const ReportRow& row : r.rows) {
        rows.push_back({{"suite", row.suite},
                        {"variant", row.variant},
                        {"method", row.method},
                        {"k", row.k},
                        {"seed", row.seed},
                        {"accuracy", row.accuracy},
                        {"params", row.params},
                        {"status", row.status}});
    }
    j["rows"] = rows;
    auto aggs = nlohmann::ordered_json::array();
    for (const AggregateRow& a : r.aggregates()) {
        aggs.push_back({{"suite", a.suite},
                        {"variant", a.variant},
                        {"method", a.method},
                        {"k", a.k},
                        {"n", a.n},
                        {"mean", a.mean},
                        {"std", a.std},
                        {"params", a.params}});
    }
    j["aggregates"] = aggs;
    auto weights = nlohmann::ordered_json::array();
    for (const WeightDump& w : r.weights) {
        nlohmann::ordered_json sites;
        for (const auto& [site, logits] : w.weights.logits) {
            sites[site.name()] = softmax(logits);
        }
        weights.push_back({{"suite", w.suite},
                           {"variant", w.variant},
                           {"k", w.k},
                           {"seed", w.seed},
                           {"upstream", w.weights.upstream_order},
                           {"mean_weight", w.mean_probabilities()},
                           {"sites", sites}});
    }
    j["weights"] = weights;
    return j;
}

/// Writes rows.csv, aggregates.csv, weights.csv, mean_weights.csv and
/// report.json into `dir`.
inline void write_report(const EvalReport& r, const std::filesystem::path& dir) {
    atomic_write(dir / "rows.csv", report_rows_csv(r));
    atomic_write(dir / "aggregates.csv", report_aggregates_csv(r));
    atomic_write(dir / "weights.csv", report_weights_csv(r));
    atomic_write(dir / "mean_weights.csv", report_mean_weights_csv(r));
    atomic_write(dir / "report.json", report_json(r).dump(2) + "\n");
}

}  // namespace loracomp
