// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>

#include "loracomp/composition.hpp"

namespace loracomp {
namespace {

std::vector<LoraAdapter> random_adapters(RngStream& rng, std::size_t n, std::size_t d, std::size_t c,
                                         std::vector<std::size_t> ranks = {}) {
    std::vector<LoraAdapter> out;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t r = ranks.empty() ? 2 : ranks[i % ranks.size()];
        out.push_back({gaussian(rng, d, r, 1.0), gaussian(rng, c, r, 1.0), 0.5 + rng.uniform()});
    }
    return out;
}

std::vector<const LoraAdapter*> ptrs(const std::vector<LoraAdapter>& v) {
    std::vector<const LoraAdapter*> out;
    for (const auto& a : v) out.push_back(&a);
    return out;
}

Matrix scaled_delta(const LoraAdapter& ad) { return ad.alpha * delta_weight(ad); }

TEST(UniformDelta, SingleAdapterIsItsScaledDelta) {
    RngStream rng(1);
    const auto ads = random_adapters(rng, 1, 5, 4);
    EXPECT_EQ(uniform_delta(ptrs(ads)), scaled_delta(ads[0]));
}

TEST(UniformDelta, IdenticalAdaptersCollapse) {
    RngStream rng(2);
    const auto one = random_adapters(rng, 1, 6, 6);
    const std::vector<LoraAdapter> same(4, one[0]);
    EXPECT_LE(max_abs_diff(uniform_delta(ptrs(same)), scaled_delta(one[0])), 1e-15);
}

TEST(UniformDelta, OppositeDeltasCancel) {
    RngStream rng(3);
    auto ads = random_adapters(rng, 1, 4, 4);
    LoraAdapter neg = ads[0];
    neg.b *= -1.0;
    ads.push_back(neg);
    EXPECT_EQ(frob_norm(uniform_delta(ptrs(ads))), 0.0);
}

TEST(UniformDelta, Errors) {
    EXPECT_THROW(uniform_delta({}), ArgumentError);
    RngStream rng(4);
    auto a = random_adapters(rng, 1, 4, 4);
    auto b = random_adapters(rng, 1, 4, 5);
    const std::vector<const LoraAdapter*> mixed{&a[0], &b[0]};
    EXPECT_THROW(uniform_delta(mixed), ShapeError);
}

TEST(LearnedDelta, ZeroLogitsEqualUniformExactly) {
    RngStream rng(5);
    for (std::size_t n = 1; n <= 6; ++n) {
        const auto ads = random_adapters(rng, n, 5, 7, {2, 4, 1});
        EXPECT_EQ(learned_delta(ptrs(ads), std::vector<double>(n, 0.0)), uniform_delta(ptrs(ads)));
    }
}

TEST(LearnedDelta, SaturatedLogitSelectsOneAdapter) {
    RngStream rng(6);
    const auto ads = random_adapters(rng, 4, 6, 6);
    std::vector<double> v{40.0, -40.0, -40.0, -40.0};
    EXPECT_LE(max_abs_diff(learned_delta(ptrs(ads), v), scaled_delta(ads[0])), 1e-12);
}

TEST(LearnedDelta, SingleAdapterIgnoresLogit) {
    RngStream rng(7);
    const auto ads = random_adapters(rng, 1, 3, 3);
    for (double v : {-5.0, 0.0, 12.5}) {
        EXPECT_EQ(learned_delta(ptrs(ads), std::vector<double>{v}), scaled_delta(ads[0]));
    }
}

TEST(LearnedDelta, LengthMismatch) {
    RngStream rng(8);
    const auto ads = random_adapters(rng, 3, 3, 3);
    EXPECT_THROW(learned_delta(ptrs(ads), std::vector<double>{0, 0}), ArgumentError);
}

TEST(GradV, TrivialCases) {
    RngStream rng(9);
    const auto one = random_adapters(rng, 1, 4, 4);
    const std::vector<LoraAdapter> same(3, one[0]);
    const Matrix g = gaussian(rng, 4, 4, 1.0);
    for (double x : grad_v(g, ptrs(same), std::vector<double>{0.3, -1.0, 2.0})) EXPECT_EQ(x, 0.0);
    const auto ads = random_adapters(rng, 3, 4, 4);
    for (double x : grad_v(Matrix(4, 4), ptrs(ads), std::vector<double>{0.3, -1.0, 2.0})) EXPECT_EQ(x, 0.0);
    EXPECT_THROW(grad_v(Matrix(3, 4), ptrs(ads), std::vector<double>{0, 0, 0}), ShapeError);
}

// L(v) = ½‖W₀ + learned_delta(v) − T‖²_F, so ∂L/∂Ŵ = Ŵ − T.
TEST(GradV, MatchesFiniteDifferences) {
    RngStream rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        const auto ads = random_adapters(rng, 2 + trial % 4, 5, 4, {1, 2, 3});
        const Matrix w0 = gaussian(rng, 5, 4, 1.0);
        const Matrix target = gaussian(rng, 5, 4, 1.0);
        std::vector<double> v(ads.size());
        for (double& x : v) x = rng.normal();
        auto loss = [&](const std::vector<double>& logits) {
            const Matrix r = w0 + learned_delta(ptrs(ads), logits) - target;
            return 0.5 * frob_inner(r, r);
        };
        const Matrix g = w0 + learned_delta(ptrs(ads), v) - target;
        const auto dv = grad_v(g, ptrs(ads), v);
        const double h = 1e-6;
        for (std::size_t n = 0; n < v.size(); ++n) {
            auto up = v, down = v;
            up[n] += h;
            down[n] -= h;
            const double fd = (loss(up) - loss(down)) / (2 * h);
            EXPECT_LE(std::abs(fd - dv[n]) / std::max({std::abs(fd), std::abs(dv[n]), 1e-8}), 1e-5);
        }
    }
}

TEST(LearnedDelta, ConvexHullAndZeroSumOnFuzzedInputs) {
    RngStream rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(6);
        const auto ads = random_adapters(rng, n, 4, 3, {1, 2, 3});
        std::vector<double> v(n);
        for (double& x : v) x = 5.0 * rng.normal();
        const Matrix delta = learned_delta(ptrs(ads), v);
        std::vector<Matrix> each;
        for (const auto& a : ads) each.push_back(scaled_delta(a));
        for (std::size_t i = 0; i < delta.size(); ++i) {
            double lo = each[0].values()[i], hi = lo;
            for (const auto& m : each) {
                lo = std::min(lo, m.values()[i]);
                hi = std::max(hi, m.values()[i]);
            }
            EXPECT_GE(delta.values()[i], lo - 1e-12);
            EXPECT_LE(delta.values()[i], hi + 1e-12);
        }
        const auto dv = grad_v(gaussian(rng, 4, 3, 1.0), ptrs(ads), v);
        EXPECT_NEAR(std::accumulate(dv.begin(), dv.end(), 0.0), 0.0, 1e-12);
    }
}

AdapterSet random_set(RngStream& rng, const ModelConfig& cfg, std::size_t rank, std::string name) {
    AdapterSet set;
    set.provenance = std::move(name);
    set.rank = rank;
    for (const SiteId& s : adapted_sites(cfg)) {
        set.sites[s] = {gaussian(rng, cfg.d_model, rank, 0.3), gaussian(rng, cfg.d_model, rank, 0.3), 1.0};
    }
    return set;
}

TEST(ComposeModel, MixedRanksAndModes) {
    const ModelConfig cfg;
    RngStream rng(12);
    std::vector<AdapterSet> sets{random_set(rng, cfg, 2, "u0"), random_set(rng, cfg, 4, "u1"),
                                 random_set(rng, cfg, 8, "u2")};
    const std::vector<AdapterSet> before = sets;
    const ComposedModel uni = compose_model(cfg, sets, CompositionMode::uniform);
    const ComposedModel learned = compose_model(cfg, sets, CompositionMode::learned);
    for (const SiteId& s : adapted_sites(cfg)) {
        EXPECT_EQ(uni.delta(s).rows(), cfg.d_model);
        EXPECT_EQ(uni.delta(s).cols(), cfg.d_model);
        EXPECT_EQ(uni.delta(s), learned.delta(s));
    }
    EXPECT_EQ(sets, before);
    EXPECT_EQ(learned.weights()->count(), 3u);
}

TEST(ComposeModel, CoverageAndWeightErrors) {
    const ModelConfig cfg;
    RngStream rng(13);
    AdapterSet partial = random_set(rng, cfg, 2, "p");
    partial.sites.erase(partial.sites.begin());
    EXPECT_THROW(compose_model(cfg, std::vector<AdapterSet>{partial}, CompositionMode::uniform), ConfigError);
    EXPECT_THROW(compose_model(cfg, std::vector<AdapterSet>{}, CompositionMode::uniform), ArgumentError);
    const std::vector<AdapterSet> sets{random_set(rng, cfg, 2, "a"), random_set(rng, cfg, 2, "b")};
    auto w = CompositionWeights::zeros(adapted_sites(cfg), {"a", "c"});
    EXPECT_THROW(compose_model(cfg, sets, CompositionMode::learned, w), ConfigError);
    auto w3 = CompositionWeights::zeros(adapted_sites(cfg), {"a", "b", "c"});
    EXPECT_THROW(compose_model(cfg, sets, CompositionMode::learned, w3), ConfigError);
}

}  // namespace
}  // namespace loracomp
