// SPDX-License-Identifier: Apache-2.0
//
// Linear CKA between site activations under different adapters, and the
// heatmap exports that put CKA next to the learned composition weights.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "loracomp/composition.hpp"
#include "loracomp/core.hpp"
#include "loracomp/lora.hpp"
#include "loracomp/model.hpp"
#include "loracomp/textio.hpp"

namespace loracomp {

/// ‖YᵀX‖²_F / (‖XᵀX‖_F‖YᵀY‖_F) over m samples (rows). Columns are mean-centered
/// first unless `center` is false.
inline double linear_cka(const Matrix& x, const Matrix& y, bool center = true) {
    if (x.rows() != y.rows()) {
        throw ShapeError("linear_cka: " + std::to_string(x.rows()) + " vs " + std::to_string(y.rows()) + " samples");
    }
    if (x.rows() < 2) {
        throw ArgumentError("linear_cka needs at least two samples");
    }
    auto prep = [&](const Matrix& m, const char* which) {
        if (!m.all_finite()) {
            throw ArgumentError(std::string("linear_cka: non-finite entries in ") + which);
        }
        Matrix c = m;
        if (center) {
            for (std::size_t j = 0; j < c.cols(); ++j) {
                double mean = 0.0;
                for (std::size_t i = 0; i < c.rows(); ++i) {
                    mean += c(i, j);
                }
                mean /= double(c.rows());
                for (std::size_t i = 0; i < c.rows(); ++i) {
                    c(i, j) -= mean;
                }
            }
        }
        if (frob_norm(c) == 0.0) {
            throw DegenerateInputError(std::string("linear_cka: ") + which + " has zero norm" +
                                       (center ? " after centering" : ""));
        }
        return c;
    };
    const Matrix xc = prep(x, "X");
    const Matrix yc = prep(y, "Y");
    const double cross = frob_norm(matmul_tn(yc, xc));
    const double value = cross * cross / (frob_norm(matmul_tn(xc, xc)) * frob_norm(matmul_tn(yc, yc)));
    return std::clamp(value, 0.0, 1.0);
}

/// Token-mean of a site's projection output, one row per probe sample.
inline Matrix collect_features(const BaseModel& base, const Overlay& overlay, const Matrix& probe, const SiteId& site) {
    if (site.block >= base.config.blocks) {
        throw ArgumentError("collect_features: model has no site " + site.name());
    }
    if (probe.rows() == 0) {
        throw ArgumentError("collect_features: empty probe set");
    }
    const std::size_t t = base.config.tokens();
    const std::size_t d = base.config.d_model;
    Matrix out(probe.rows(), d);
    for (std::size_t s = 0; s < probe.rows(); s += kEvalChunk) {
        const std::size_t e = std::min(probe.rows(), s + kEvalChunk);
        const ForwardCache c = forward_features(base, overlay, detail::rows_slice(probe, s, e));
        const Matrix& act = c.site_output(site);
        for (std::size_t b = 0; b < e - s; ++b) {
            for (std::size_t tok = 0; tok < t; ++tok) {
                for (std::size_t j = 0; j < d; ++j) {
                    out(s + b, j) += act(b * t + tok, j) / double(t);
                }
            }
        }
    }
    return out;
}

/// Site × upstream grid. `raw` keeps the CKA values, `values` the rows
/// normalized to sum to one.
struct CkaMap {
    std::vector<SiteId> sites;
    std::vector<std::string> upstream;
    Matrix raw{1, 1};
    Matrix values{1, 1};
    bool centered = true;
};

/// Softmax composition weights laid out like a CkaMap.
struct WeightMap {
    std::vector<SiteId> sites;
    std::vector<std::string> upstream;
    Matrix values{1, 1};
};

inline WeightMap weight_map(const CompositionWeights& w) {
    WeightMap m;
    m.upstream = w.upstream_order;
    m.values = Matrix(w.logits.size(), w.count());
    std::size_t r = 0;
    for (const auto& [site, logits] : w.logits) {
        m.sites.push_back(site);
        const auto p = softmax(logits);
        std::copy(p.begin(), p.end(), m.values.row(r++).begin());
    }
    return m;
}

/// CKA between the features each upstream set induces and the features of a
/// ground-truth adapter trained on the downstream task, per site.
inline CkaMap cka_map(const BaseModel& base, const std::vector<AdapterSet>& upstream, const AdapterSet& ground_truth,
                      const Matrix& probe, bool center = true) {
    if (upstream.empty()) {
        throw ArgumentError("cka_map: no upstream adapter sets");
    }
    CkaMap m;
    m.centered = center;
    m.sites = adapted_sites(base.config);
    for (const AdapterSet& set : upstream) {
        m.upstream.push_back(set.provenance);
    }
    m.raw = Matrix(m.sites.size(), upstream.size());
    m.values = Matrix(m.sites.size(), upstream.size());
    for (std::size_t i = 0; i < m.sites.size(); ++i) {
        const SiteId& s = m.sites[i];
        try {
            const Matrix gt = collect_features(base, ground_truth, probe, s);
            double total = 0.0;
            for (std::size_t n = 0; n < upstream.size(); ++n) {
                m.raw(i, n) = linear_cka(collect_features(base, upstream[n], probe, s), gt, center);
                total += m.raw(i, n);
            }
            if (total == 0.0) {
                throw DegenerateInputError("all CKA values are zero");
            }
            for (std::size_t n = 0; n < upstream.size(); ++n) {
                m.values(i, n) = m.raw(i, n) / total;
            }
        } catch (const DegenerateInputError& e) {
            throw DegenerateInputError("site " + s.name() + ": " + e.what());
        }
    }
    return m;
}

/// Fraction of shared sites where the CKA argmax and the weight argmax agree.
inline double alignment(const CkaMap& cka, const WeightMap& w) {
    if (cka.sites != w.sites || cka.upstream != w.upstream) {
        throw ShapeError("alignment: CKA and weight maps are not aligned");
    }
    std::size_t agree = 0;
    for (std::size_t i = 0; i < cka.sites.size(); ++i) {
        agree += argmax(cka.values.row(i)) == argmax(w.values.row(i)) ? 1 : 0;
    }
    return double(agree) / double(cka.sites.size());
}

namespace detail {

inline std::string grid_csv(const std::vector<SiteId>& sites, const std::vector<std::string>& upstream,
                            const Matrix& values) {
    std::string out = "site";
    for (const std::string& u : upstream) {
        out += "," + u;
    }
    out += "\n";
    for (std::size_t i = 0; i < sites.size(); ++i) {
        out += sites[i].name();
        for (std::size_t n = 0; n < upstream.size(); ++n) {
            out += "," + format_double(values(i, n));
        }
        out += "\n";
    }
    return out;
}

}  // namespace detail

/// A grid read back from CSV.
struct Grid {
    std::vector<SiteId> sites;
    std::vector<std::string> upstream;
    Matrix values{1, 1};
};

inline SiteId parse_site(const std::string& name) {
    // "b<block>.<role>"
    const auto dot = name.find('.');
    if (name.size() < 4 || name[0] != 'b' || dot == std::string::npos) {
        throw FormatError(FormatError::Kind::malformed, "bad site name '" + name + "'");
    }
    try {
        return {static_cast<std::size_t>(std::stoul(name.substr(1, dot - 1))), parse_role(name.substr(dot + 1))};
    } catch (const std::exception&) {
        throw FormatError(FormatError::Kind::malformed, "bad site name '" + name + "'");
    }
}

inline Grid read_grid_csv(const std::filesystem::path& path) {
    const auto lines = split(read_file(path), '\n');
    if (lines.size() < 2 || lines[0].rfind("site,", 0) != 0) {
        throw FormatError(FormatError::Kind::malformed, path.string() + ": missing grid header");
    }
    Grid g;
    auto head = split(lines[0], ',');
    g.upstream.assign(head.begin() + 1, head.end());
    std::vector<double> flat;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) {
            continue;
        }
        const auto cells = split(lines[i], ',');
        if (cells.size() != head.size()) {
            throw FormatError(FormatError::Kind::malformed, path.string() + ": ragged row " + std::to_string(i));
        }
        g.sites.push_back(parse_site(cells[0]));
        for (std::size_t c = 1; c < cells.size(); ++c) {
            flat.push_back(parse_double(cells[c]));
        }
    }
    if (g.sites.empty() || g.upstream.empty()) {
        throw FormatError(FormatError::Kind::malformed, path.string() + ": empty grid");
    }
    g.values = Matrix::from_rows(g.sites.size(), g.upstream.size(), std::move(flat));
    return g;
}

/// Writes cka.csv, cka_raw.csv, weights.csv and alignment.json into `dir`.
inline void export_maps(const CkaMap& cka, const WeightMap& w, const std::filesystem::path& dir) {
    const double frac = alignment(cka, w);
    atomic_write(dir / "cka.csv", detail::grid_csv(cka.sites, cka.upstream, cka.values));
    atomic_write(dir / "cka_raw.csv", detail::grid_csv(cka.sites, cka.upstream, cka.raw));
    atomic_write(dir / "weights.csv", detail::grid_csv(w.sites, w.upstream, w.values));

    nlohmann::ordered_json j;
    j["schema"] = "loracomp.alignment/1";
    j["centered"] = cka.centered;
    j["upstream"] = cka.upstream;
    j["alignment"] = frac;
    nlohmann::ordered_json sites = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < cka.sites.size(); ++i) {
        sites.push_back({{"site", cka.sites[i].name()},
                         {"cka_argmax", cka.upstream[argmax(cka.values.row(i))]},
                         {"weight_argmax", w.upstream[argmax(w.values.row(i))]}});
    }
    j["sites"] = sites;
    atomic_write(dir / "alignment.json", j.dump(2) + "\n");
}

}  // namespace loracomp
