// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>

#include "fd_oracle.hpp"
#include "loracomp/model.hpp"
#include "loracomp/optim.hpp"

namespace loracomp {
namespace {

using testing::ParamView;
using testing::append;
using testing::reference_loss;
using testing::worst_directional_error;

AdapterSet random_set(RngStream& rng, const ModelConfig& cfg, std::size_t rank, std::string name,
                      double sigma = 0.3) {
    AdapterSet set;
    set.provenance = std::move(name);
    set.rank = rank;
    for (const SiteId& s : adapted_sites(cfg)) {
        set.sites[s] = {gaussian(rng, cfg.d_model, rank, sigma), gaussian(rng, cfg.d_model, rank, sigma), 1.0};
    }
    return set;
}

Batch random_batch(RngStream& rng, const ModelConfig& cfg, std::size_t n, std::size_t classes) {
    Batch b{gaussian(rng, n, cfg.input_dim(), 1.0), {}};
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(rng.below(classes));
    return b;
}

struct Micro : ::testing::Test {
    ModelConfig cfg = ModelConfig::micro();
    RngStream rng{123};
    BaseModel base = BaseModel::init(cfg, RngStream(1));
    ClassifierHead head{gaussian(rng, cfg.d_model, 2, 0.7), gaussian(rng, 1, 2, 0.3)};
    Batch batch = random_batch(rng, cfg, 6, 2);
};

TEST_F(Micro, FreshAdapterOverlayMatchesNoOverlayExactly) {
    AdapterSet fresh;
    RngStream r(4);
    for (const SiteId& s : adapted_sites(cfg)) fresh.sites[s] = init_adapter(cfg.d_model, cfg.d_model, 2, 1.0, r);
    EXPECT_EQ(forward(base, head, fresh, batch.x).logits, forward(base, head, Overlay::none(), batch.x).logits);
}

TEST_F(Micro, CancellingCompositionMatchesNoOverlayExactly) {
    AdapterSet a = random_set(rng, cfg, 2, "a");
    AdapterSet b = a;
    b.provenance = "b";
    for (auto& [site, ad] : b.sites) ad.b *= -1.0;
    const ComposedModel cm = compose_model(cfg, std::vector<AdapterSet>{a, b}, CompositionMode::uniform);
    EXPECT_EQ(forward(base, head, cm, batch.x).logits, forward(base, head, Overlay::none(), batch.x).logits);
}

TEST_F(Micro, DuplicatedAndPermutedRows) {
    Matrix x(3, cfg.input_dim());
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t j = 0; j < cfg.input_dim(); ++j) x(r, j) = batch.x(0, j);
    const Matrix dup = forward(base, head, Overlay::none(), x).logits;
    EXPECT_EQ(dup.row(0)[0], dup.row(2)[0]);
    EXPECT_EQ(dup.row(1)[1], dup.row(2)[1]);

    const Matrix logits = forward(base, head, Overlay::none(), batch.x).logits;
    std::vector<std::size_t> perm{3, 1, 5, 0, 2, 4};
    Matrix px(6, cfg.input_dim());
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t j = 0; j < cfg.input_dim(); ++j) px(r, j) = batch.x(perm[r], j);
    const Matrix plogits = forward(base, head, Overlay::none(), px).logits;
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(plogits(r, j), logits(perm[r], j));
}

TEST_F(Micro, AttentionRowsSumToOne) {
    const ForwardCache c = forward(base, head, Overlay::none(), batch.x);
    const std::size_t t = cfg.tokens();
    for (const BlockCache& bc : c.blocks) {
        for (std::size_t row = 0; row < bc.attn.size() / t; ++row) {
            double s = 0.0;
            for (std::size_t j = 0; j < t; ++j) s += bc.attn[row * t + j];
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST_F(Micro, MaskOffGivesLossOnly) {
    const LossAndGrads lg = loss_and_grads(base, head, Overlay::none(), batch, {});
    EXPECT_TRUE(lg.grads.empty());
    EXPECT_NEAR(lg.loss, reference_loss(base, head, Overlay::none(), batch), 1e-12);
}

TEST_F(Micro, DuplicatingTheBatchKeepsMeanLoss) {
    Batch twice{Matrix(12, cfg.input_dim()), {}};
    for (std::size_t r = 0; r < 12; ++r) {
        for (std::size_t j = 0; j < cfg.input_dim(); ++j) twice.x(r, j) = batch.x(r % 6, j);
        twice.labels.push_back(batch.labels[r % 6]);
    }
    EXPECT_NEAR(loss_and_grads(base, head, Overlay::none(), twice, {}).loss,
                loss_and_grads(base, head, Overlay::none(), batch, {}).loss, 1e-12);
}

TEST_F(Micro, InvalidLabelAndMaskMisuse) {
    Batch bad = batch;
    bad.labels[0] = 7;
    EXPECT_THROW(loss_and_grads(base, head, Overlay::none(), bad, {}), ArgumentError);
    TrainableMask adapters_only{.adapters = true};
    EXPECT_THROW(loss_and_grads(base, head, Overlay::none(), batch, adapters_only), ConfigError);
    TrainableMask v_only{.composition_v = true};
    EXPECT_THROW(loss_and_grads(base, head, Overlay::none(), batch, v_only), ConfigError);
}

TEST_F(Micro, BaseAndHeadGradientsMatchFiniteDifferences) {
    AdapterSet set = random_set(rng, cfg, 2, "a");
    const TrainableMask mask{.base = true, .head = true};
    const LossAndGrads lg = loss_and_grads(base, head, set, batch, mask);
    ASSERT_TRUE(lg.grads.base && lg.grads.head);

    ParamView view;
    BaseModel gb = *lg.grads.base;
    std::vector<Matrix*> grads;
    gb.for_each_param([&](const std::string&, Matrix& g) { grads.push_back(&g); });
    std::size_t k = 0;
    base.for_each_param([&](const std::string&, Matrix& p) { append(view, p, *grads[k++]); });
    auto loss = [&] { return reference_loss(base, head, set, batch); };
    RngStream dirs(5);
    EXPECT_LE(worst_directional_error(view, loss, dirs, 100), 1e-5);

    ParamView hv;
    append(hv, head.weight, lg.grads.head->weight);
    append(hv, head.bias, lg.grads.head->bias);
    EXPECT_LE(worst_directional_error(hv, loss, dirs, 100), 1e-5);
}

TEST_F(Micro, EveryBaseTensorMatchesFiniteDifferencesIndividually) {
    const LossAndGrads lg = loss_and_grads(base, head, Overlay::none(), batch, {.base = true});
    BaseModel gb = *lg.grads.base;
    std::vector<std::pair<std::string, Matrix*>> grads;
    gb.for_each_param([&](const std::string& n, Matrix& g) { grads.emplace_back(n, &g); });
    std::size_t k = 0;
    auto loss = [&] { return reference_loss(base, head, Overlay::none(), batch); };
    base.for_each_param([&](const std::string& name, Matrix& p) {
        ParamView view;
        append(view, p, *grads[k++].second);
        RngStream dirs(k);
        EXPECT_LE(worst_directional_error(view, loss, dirs, 10), 1e-5) << name;
    });
}

TEST_F(Micro, AdapterGradientsMatchFiniteDifferences) {
    AdapterSet set = random_set(rng, cfg, 2, "a");
    const LossAndGrads lg = loss_and_grads(base, head, set, batch, {.head = true, .adapters = true});
    ASSERT_EQ(lg.grads.adapters.size(), adapted_sites(cfg).size());
    EXPECT_FALSE(lg.grads.base);
    ParamView view;
    for (auto& [site, ad] : set.sites) {
        append(view, ad.a, lg.grads.adapters.at(site).da);
        append(view, ad.b, lg.grads.adapters.at(site).db);
    }
    auto loss = [&] { return reference_loss(base, head, set, batch); };
    RngStream dirs(6);
    EXPECT_LE(worst_directional_error(view, loss, dirs, 100), 1e-5);
}

TEST_F(Micro, CompositionLogitGradientsMatchFiniteDifferences) {
    std::vector<AdapterSet> sets{random_set(rng, cfg, 1, "u0"), random_set(rng, cfg, 2, "u1"),
                                 random_set(rng, cfg, 3, "u2")};
    ComposedModel cm = compose_model(cfg, sets, CompositionMode::learned);
    CompositionWeights w = *cm.weights();
    for (auto& [site, v] : w.logits)
        for (double& x : v) x = rng.normal();
    cm.set_weights(w);

    const LossAndGrads lg = loss_and_grads(base, head, cm, batch, {.composition_v = true});
    ParamView view;
    for (auto& [site, v] : w.logits) {
        const auto& g = lg.grads.composition_v.at(site);
        EXPECT_NEAR(std::accumulate(g.begin(), g.end(), 0.0), 0.0, 1e-12);
        for (std::size_t i = 0; i < v.size(); ++i) {
            view.params.push_back(&v[i]);
            view.grad.push_back(g[i]);
        }
    }
    view.refresh = [&] { cm.set_weights(w); };
    auto loss = [&] { return reference_loss(base, head, cm, batch); };
    RngStream dirs(7);
    EXPECT_LE(worst_directional_error(view, loss, dirs, 100), 1e-5);
}

TEST_F(Micro, DefaultConfigAdapterGradientsMatchFiniteDifferences) {
    const ModelConfig full;
    BaseModel b = BaseModel::init(full, RngStream(2));
    ClassifierHead h{gaussian(rng, full.d_model, 8, 0.5), Matrix(1, 8)};
    Batch bt = random_batch(rng, full, 4, 8);
    AdapterSet set = random_set(rng, full, 4, "a", 0.2);
    const LossAndGrads lg = loss_and_grads(b, h, set, bt, {.adapters = true});
    auto loss = [&] { return reference_loss(b, h, set, bt); };
    for (auto& [site, ad] : set.sites) {
        ParamView view;
        append(view, ad.a, lg.grads.adapters.at(site).da);
        append(view, ad.b, lg.grads.adapters.at(site).db);
        RngStream dirs(site.block * 3 + static_cast<int>(site.role));
        EXPECT_LE(worst_directional_error(view, loss, dirs, 10), 1e-5) << site.name();
    }
}

TEST_F(Micro, Top1Accuracy) {
    const Matrix logits = forward(base, head, Overlay::none(), batch.x).logits;
    std::vector<std::size_t> predicted, wrong;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        predicted.push_back(argmax(logits.row(r)));
        wrong.push_back(1 - predicted.back());
    }
    EXPECT_EQ(top1_accuracy(base, head, Overlay::none(), batch.x, predicted), 1.0);
    EXPECT_EQ(top1_accuracy(base, head, Overlay::none(), batch.x, wrong), 0.0);

    // Independent recount: explicit comparisons rather than argmax().
    std::size_t hits = 0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const bool first_wins = logits(r, 0) >= logits(r, 1);
        hits += (first_wins ? 0u : 1u) == batch.labels[r];
    }
    EXPECT_DOUBLE_EQ(top1_accuracy(base, head, Overlay::none(), batch.x, batch.labels),
                     double(hits) / double(batch.size()));
    EXPECT_THROW(top1_accuracy(base, head, Overlay::none(), Matrix(1, cfg.input_dim()), {}), ArgumentError);
}

TEST(Top1, TiesGoToLowestClass) {
    const Matrix logits{{0.5, 0.5, 0.1}};
    EXPECT_EQ(top1_accuracy_from_logits(logits, std::vector<std::size_t>{0}), 1.0);
    EXPECT_EQ(top1_accuracy_from_logits(logits, std::vector<std::size_t>{1}), 0.0);
}

TEST(ParamCounts, ClosedForms) {
    const ModelConfig cfg;
    EXPECT_EQ(param_counts({.head = true, .composition_v = true}, cfg, 3, 4).total(), 18u);
    EXPECT_EQ(param_counts({.head = true}, cfg, 3, 4).total(), 0u);
    EXPECT_EQ(param_counts({.head = true, .adapters = true}, cfg, 0, 4).total(), 768u);
    EXPECT_EQ(param_counts({.head = true, .composition_v = true}, cfg, 3, 4, true).total(), 3u);
    // Recount from an actual model.
    const BaseModel base = BaseModel::init(cfg, RngStream(0));
    EXPECT_EQ(param_counts({.base = true, .head = true}, cfg, 0, 0).total(), base.param_count());
}

TEST(Training, LossFallsOnSeparableToyProblem) {
    const ModelConfig cfg = ModelConfig::micro();
    BaseModel base = BaseModel::init(cfg, RngStream(3));
    ClassifierHead head = ClassifierHead::zeros(cfg.d_model, 2);
    RngStream rng(4);
    Batch batch{Matrix(32, cfg.input_dim()), {}};
    for (std::size_t r = 0; r < 32; ++r) {
        const std::size_t y = r % 2;
        for (std::size_t j = 0; j < cfg.input_dim(); ++j) batch.x(r, j) = (y ? 1.0 : -1.0) + 0.3 * rng.normal();
        batch.labels.push_back(y);
    }
    Adam opt_base(1e-2), opt_head(1e-2);
    double loss = 0.0;
    for (int step = 0; step < 50; ++step) {
        LossAndGrads lg = loss_and_grads(base, head, Overlay::none(), batch, {.base = true, .head = true});
        loss = lg.loss;
        std::vector<std::span<double>> p;
        std::vector<std::span<const double>> g;
        BaseModel& gb = *lg.grads.base;
        std::vector<const Matrix*> gl;
        gb.for_each_param([&](const std::string&, Matrix& m) { gl.push_back(&m); });
        base.for_each_param([&](const std::string&, Matrix& m) { p.push_back(m.values()); });
        for (const Matrix* m : gl) g.push_back(m->values());
        opt_base.step(p, g);
        std::vector<std::span<double>> hp{head.weight.values(), head.bias.values()};
        std::vector<std::span<const double>> hg{lg.grads.head->weight.values(), lg.grads.head->bias.values()};
        opt_head.step(hp, hg);
    }
    EXPECT_LT(loss, 0.1);
}

}  // namespace
}  // namespace loracomp
