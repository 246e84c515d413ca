// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "scaleforge/moe.hpp"

using namespace scaleforge;

namespace {

Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor::from({1, n}, std::move(v));
}

void randomize(ParamStore& store, Rng& r, double std = 0.5) {
    for (auto& p : store.params()) {
        if (p.role == ParamRole::Temperature) continue;
        Tensor fresh = randn_init(p.value.shape(), std, r);
        std::copy(fresh.data().begin(), fresh.data().end(), p.value.mutable_data().begin());
    }
}

MoeLayer random_layer(ParamStore& store, std::size_t experts, std::size_t k, std::size_t d, std::uint64_t seed,
                      std::optional<double> capacity = {}) {
    RouterConfig c;
    c.num_experts = experts;
    c.top_k = k;
    c.routing_dim = 4;
    c.temperature_init = 0.5;
    c.capacity_factor = capacity;
    MoeLayer m = MoeLayer::make(store, "moe", c, d, 2 * d, false, 1e-5, StackSide::Decoder, "moe");
    Rng r(seed);
    randomize(store, r);
    m.temperature.mutable_data()[0] = c.temperature_init;
    return m;
}

// Runs every expert on every token, then combines with the sparse gates.
std::vector<double> dense_oracle(const MoeLayer& m, const Tensor& x, const RouterOutput& r) {
    const std::size_t t = x.dim(0), d = x.dim(1);
    std::vector<Tensor> all;
    for (const auto& e : m.experts) all.push_back(e(x));
    std::vector<double> out(t * d, 0.0);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < r.indices[i].size(); ++j) {
            if (!r.kept[i][j]) continue;
            const Tensor& y = all[r.indices[i][j]];
            for (std::size_t c = 0; c < d; ++c) out[i * d + c] += r.gates.at(i, j) * y.at(i, c);
        }
    return out;
}

}  // namespace

TEST(RouterConfig, Validation) {
    RouterConfig c;
    c.top_k = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = RouterConfig{};
    c.num_experts = 1;
    c.top_k = 2;
    EXPECT_THROW(c.validate(), ConfigError);
    c = RouterConfig{};
    c.routing_dim = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = RouterConfig{};
    c.balance_weight = -0.1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = RouterConfig{};
    c.temperature_init = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(XmoeScores, AlignedAndOrthogonalExperts) {
    Tensor h = row({1.0, 0.0});
    Tensor proj = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor embs = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor s = xmoe_scores(h, proj, embs, Tensor::scalar(1.0));
    // The 1e-9 norm eps moves the cosine off 1 by a few 1e-9.
    EXPECT_NEAR(s[0], 1.0, 1e-8);
    EXPECT_EQ(s[1], 0.0);
}

TEST(XmoeScores, HalvingTemperatureDoublesScores) {
    Rng r(5);
    Tensor h = randn_init({6, 8}, 1.0, r);
    Tensor proj = randn_init({8, 4}, 1.0, r);
    Tensor embs = randn_init({3, 4}, 1.0, r);
    Tensor a = xmoe_scores(h, proj, embs, Tensor::scalar(1.0));
    Tensor b = xmoe_scores(h, proj, embs, Tensor::scalar(0.5));
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(b[i], 2.0 * a[i]);
}

TEST(XmoeScores, PowerOfTwoScalingIsBitIdentical) {
    Rng r(6);
    Tensor h = randn_init({16, 8}, 1.0, r);
    Tensor proj = randn_init({8, 4}, 1.0, r);
    Tensor embs = randn_init({4, 4}, 1.0, r);
    Tensor base = xmoe_scores(h, proj, embs, Tensor::scalar(0.07));
    for (double c : {2.0, 0.25, 1024.0, 0x1p-40}) {
        std::vector<double> v(h.data().begin(), h.data().end());
        for (double& x : v) x *= c;
        Tensor s = xmoe_scores(Tensor::from(h.shape(), v), proj, embs, Tensor::scalar(0.07));
        for (std::size_t i = 0; i < s.numel(); ++i) ASSERT_EQ(s[i], base[i]) << "factor " << c;
    }
}

TEST(XmoeScores, GeneralScalingKeepsSelection) {
    Rng r(7);
    Tensor h = randn_init({32, 8}, 1.0, r);
    Tensor proj = randn_init({8, 4}, 1.0, r);
    Tensor embs = randn_init({4, 4}, 1.0, r);
    RouterOutput a = route_topk(xmoe_scores(h, proj, embs, Tensor::scalar(0.07)), 2);
    for (double c : {10.0, 0.3, 7.5}) {
        std::vector<double> v(h.data().begin(), h.data().end());
        for (double& x : v) x *= c;
        RouterOutput b = route_topk(xmoe_scores(Tensor::from(h.shape(), v), proj, embs, Tensor::scalar(0.07)), 2);
        EXPECT_EQ(a.indices, b.indices);
        for (std::size_t i = 0; i < a.probs.numel(); ++i) EXPECT_NEAR(a.probs[i], b.probs[i], 1e-9);
    }
}

TEST(XmoeScores, ZeroRowStaysFinite) {
    Tensor h = Tensor::zeros({2, 3});
    Tensor proj = Tensor::full({3, 2}, 1.0);
    Tensor embs = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor s = xmoe_scores(h, proj, embs, Tensor::scalar(1.0));
    for (double v : s.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(XmoeScores, RejectsBadShapesAndTemperature) {
    Tensor h = Tensor::zeros({2, 3});
    EXPECT_THROW(xmoe_scores(h, Tensor::zeros({4, 2}), Tensor::zeros({2, 2}), Tensor::scalar(1.0)), ShapeError);
    EXPECT_THROW(xmoe_scores(h, Tensor::zeros({3, 2}), Tensor::zeros({2, 2}), Tensor::scalar(0.0)), ConfigError);
}

TEST(RouteTopk, Top1IsArgmaxWithUnitGate) {
    RouterOutput r = route_topk(row({2.0, 1.0, 0.5}), 1);
    EXPECT_EQ(r.indices[0], (std::vector<std::size_t>{0}));
    EXPECT_EQ(r.gates[0], 1.0);
}

TEST(RouteTopk, Top2RenormalizesClosedForm) {
    RouterOutput r = route_topk(row({2.0, 1.0, 0.5}), 2);
    EXPECT_EQ(r.indices[0], (std::vector<std::size_t>{0, 1}));
    const double e2 = std::exp(2.0), e1 = std::exp(1.0);
    EXPECT_NEAR(r.gates[0], e2 / (e2 + e1), 1e-15);
    EXPECT_NEAR(r.gates[1], e1 / (e2 + e1), 1e-15);
    EXPECT_NEAR(r.gates[0], 0.731059, 1e-6);
    EXPECT_NEAR(r.gates[1], 0.268941, 1e-6);
    const double z = e2 + e1 + std::exp(0.5);
    EXPECT_NEAR(r.probs[2], std::exp(0.5) / z, 1e-15);
}

TEST(RouteTopk, TiesGoToLowerIndex) {
    EXPECT_EQ(route_topk(row({1.0, 1.0}), 1).indices[0], (std::vector<std::size_t>{0}));
    EXPECT_EQ(route_topk(row({0.0, 3.0, 3.0, 3.0}), 2).indices[0], (std::vector<std::size_t>{1, 2}));
}

TEST(RouteTopk, RejectsKAboveExperts) {
    EXPECT_THROW(route_topk(row({1.0}), 2), ConfigError);
    EXPECT_THROW(route_topk(row({1.0, 2.0, 3.0}), 3), ConfigError);
}

TEST(RouteTopk, GateAndProbSumsAndNoDropsByDefault) {
    Rng r(8);
    for (std::size_t k : {1, 2}) {
        Tensor s = randn_init({32, 8}, 3.0, r);
        RouterOutput o = route_topk(s, k);
        for (std::size_t i = 0; i < 32; ++i) {
            double p = 0.0, g = 0.0;
            for (std::size_t e = 0; e < 8; ++e) p += o.probs.at(i, e);
            for (std::size_t j = 0; j < k; ++j) g += o.gates.at(i, j);
            EXPECT_NEAR(p, 1.0, 1e-12);
            EXPECT_NEAR(g, 1.0, 1e-12);
            EXPECT_FALSE(o.dropped[i]);
            // Selected set is the top-k by probability.
            std::vector<std::size_t> order(8);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return o.probs.at(i, a) > o.probs.at(i, b); });
            for (std::size_t j = 0; j < k; ++j) EXPECT_EQ(o.indices[i][j], order[j]);
        }
    }
}

TEST(RouteTopk, CapacityBoundsExpertLoad) {
    // Every token prefers expert 0.
    std::vector<double> v;
    for (int i = 0; i < 10; ++i) v.insert(v.end(), {3.0, 2.0, 1.0, 0.0});
    Tensor s = Tensor::from({10, 4}, v);
    for (std::size_t k : {1, 2}) {
        for (double c : {0.5, 1.0, 1.5}) {
            RouterOutput o = route_topk(s, k, c);
            const auto cap = static_cast<std::size_t>(std::ceil(c * 10.0 * static_cast<double>(k) / 4.0));
            for (std::size_t l : expert_load(o)) EXPECT_LE(l, cap);
            EXPECT_EQ(expert_load(o)[0], cap);
            // First-come first-served in token order.
            EXPECT_TRUE(o.kept[0][0]);
            EXPECT_FALSE(o.kept[9][0]);
            for (std::size_t i = 0; i < 10; ++i) {
                double g = 0.0;
                for (std::size_t j = 0; j < k; ++j) g += o.kept[i][j] ? o.gates.at(i, j) : 0.0;
                if (!o.dropped[i]) EXPECT_NEAR(g, 1.0, 1e-12);
            }
        }
    }
    RouterOutput tight = route_topk(s, 1, 0.4);
    EXPECT_TRUE(tight.dropped[9]);
}

TEST(BalanceLoss, UniformRoutingIsOne) {
    // Equal probabilities everywhere; a 1e-300 nudge spreads top-1 choices
    // evenly over the experts without moving any probability.
    std::vector<double> w;
    for (int i = 0; i < 8; ++i)
        for (int e = 0; e < 4; ++e) w.push_back(e == i % 4 ? 1e-300 : 0.0);
    RouterOutput u = route_topk(Tensor::from({8, 4}, w), 1);
    EXPECT_EQ(u.probs[0], 0.25);
    EXPECT_NEAR(balance_loss(u).item(), 1.0, 1e-12);
    EXPECT_NEAR(routing_entropy(u), std::log(4.0), 1e-12);
}

TEST(BalanceLoss, CollapsedRoutingIsE) {
    std::vector<double> v;
    for (int i = 0; i < 6; ++i) v.insert(v.end(), {800.0, 0.0, 0.0});
    RouterOutput r = route_topk(Tensor::from({6, 3}, v), 1);
    EXPECT_NEAR(balance_loss(r).item(), 3.0, 1e-12);
    EXPECT_NEAR(routing_entropy(r), 0.0, 1e-12);
}

TEST(BalanceLoss, HandArithmeticExample) {
    // Rows with p0 in {0.7, 0.7, 0.8, 0.2}: f = [0.75, 0.25], p = [0.6, 0.4].
    std::vector<double> v;
    for (double p0 : {0.7, 0.7, 0.8, 0.2}) v.insert(v.end(), {std::log(p0 / (1.0 - p0)), 0.0});
    RouterOutput r = route_topk(Tensor::from({4, 2}, v), 1);
    EXPECT_NEAR(balance_loss(r).item(), 1.10, 1e-12);
}

TEST(RoutingEntropy, ClosedFormThreeExperts) {
    std::vector<double> v{std::log(2.0), 0.0, 0.0};
    RouterOutput r = route_topk(Tensor::from({1, 3}, v), 1);
    EXPECT_NEAR(routing_entropy(r), 1.5 * std::log(2.0), 1e-12);
    EXPECT_NEAR(routing_entropy(r), 1.039721, 1e-6);
}

TEST(BalanceLoss, GradientFlowsThroughMeanProbability) {
    Tensor s = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 2.0}, true);
    RouterOutput r = route_topk(s, 1);
    backward(balance_loss(r));
    double norm = 0.0;
    for (double g : s.grad()) norm += g * g;
    EXPECT_GT(norm, 0.0);
}

TEST(MoeLayer, SparseDispatchMatchesDenseOracle) {
    for (std::size_t experts : {2, 4, 8}) {
        for (std::size_t k : {1, 2}) {
            ParamStore store;
            MoeLayer m = random_layer(store, experts, k, 6, 100 + experts * 10 + k);
            Rng r(experts + k);
            Tensor x = randn_init({32, 6}, 1.0, r);
            MoeResult res = m.forward(x);
            std::vector<double> want = dense_oracle(m, x, res.routing);
            for (std::size_t i = 0; i < want.size(); ++i)
                ASSERT_NEAR(res.output[i], want[i], 1e-12) << "E=" << experts << " k=" << k;
        }
    }
}

TEST(MoeLayer, CapacityDropsZeroRows) {
    ParamStore store;
    MoeLayer m = random_layer(store, 4, 1, 6, 3, 0.25);
    Rng r(1);
    Tensor x = randn_init({16, 6}, 1.0, r);
    MoeResult res = m.forward(x);
    std::vector<double> want = dense_oracle(m, x, res.routing);
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < 16; ++i) {
        if (!res.routing.dropped[i]) continue;
        ++dropped;
        for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(res.output.at(i, c), 0.0);
    }
    EXPECT_GT(dropped, 0u);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(res.output[i], want[i], 1e-12);
}

TEST(MoeLayer, IdenticalExpertsMatchSingleFfn) {
    ParamStore store;
    MoeLayer m = random_layer(store, 4, 2, 6, 9);
    for (std::size_t e = 1; e < 4; ++e) {
        auto copy = [](const Tensor& from, Tensor& to) {
            std::copy(from.data().begin(), from.data().end(), to.mutable_data().begin());
        };
        copy(m.experts[0].fc1.weight, m.experts[e].fc1.weight);
        copy(m.experts[0].fc1.bias, m.experts[e].fc1.bias);
        copy(m.experts[0].fc2.weight, m.experts[e].fc2.weight);
        copy(m.experts[0].fc2.bias, m.experts[e].fc2.bias);
    }
    Rng r(2);
    Tensor x = randn_init({12, 6}, 1.0, r);
    Tensor got = m.forward(x).output;
    Tensor want = m.experts[0](x);
    for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(MoeLayer, EqualGatesAverageExpertDeltas) {
    // Zero routing embeddings give uniform probs; k = 2 then picks experts 0 and 1
    // with gates 1/2. Experts output constant +1 and +3 through their biases.
    ParamStore store;
    RouterConfig c;
    c.num_experts = 2;
    c.top_k = 2;
    c.routing_dim = 2;
    c.temperature_init = 1.0;
    MoeLayer m = MoeLayer::make(store, "moe", c, 3, 4, false, 1e-5, StackSide::Decoder, "moe");
    m.temperature.mutable_data()[0] = 1.0;
    for (double& v : m.experts[0].fc2.bias.mutable_data()) v = 1.0;
    for (double& v : m.experts[1].fc2.bias.mutable_data()) v = 3.0;
    Rng r(4);
    MoeResult res = m.forward(randn_init({5, 3}, 1.0, r));
    for (double v : res.output.data()) EXPECT_NEAR(v, 2.0, 1e-15);
}

TEST(MoeLayer, GradientsReachRouterAndSelectedExperts) {
    ParamStore store;
    MoeLayer m = random_layer(store, 4, 2, 6, 12);
    Rng r(3);
    Tensor x = randn_init({16, 6}, 1.0, r);
    MoeResult res = m.forward(x);
    std::vector<double> w(res.output.numel());
    for (double& v : w) v = r.normal();
    backward(add(dot_const(res.output, w), res.balance));
    auto norm = [](const Tensor& t) {
        double s = 0.0;
        for (double g : t.grad()) s += g * g;
        return s;
    };
    EXPECT_GT(norm(m.proj), 0.0);
    EXPECT_GT(norm(m.expert_embs), 0.0);
    EXPECT_GT(norm(m.temperature), 0.0);
    const auto load = expert_load(res.routing);
    for (std::size_t e = 0; e < 4; ++e) {
        if (load[e] > 0) EXPECT_GT(norm(m.experts[e].fc1.weight), 0.0);
        else EXPECT_EQ(norm(m.experts[e].fc1.weight), 0.0);
    }
}

TEST(MoeLayer, SingleExpertHasNoRouterGradient) {
    ParamStore store;
    MoeLayer m = random_layer(store, 1, 1, 6, 2);
    Rng r(3);
    MoeResult res = m.forward(randn_init({8, 6}, 1.0, r));
    backward(sum(res.output));
    for (double g : m.proj.grad()) EXPECT_EQ(g, 0.0);
    for (double v : res.routing.gates.data()) EXPECT_EQ(v, 1.0);
}
