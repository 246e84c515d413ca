// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "scaleforge/blocks.hpp"

using namespace scaleforge;

namespace {

ModelConfig small(Arch arch, NormVariant norm, std::size_t layers = 2) {
    ModelConfig c;
    c.arch = arch;
    c.layers_enc = arch == Arch::Decoder ? 0 : layers;
    c.layers_dec = arch == Arch::Encoder ? 0 : layers;
    c.hidden = 16;
    c.heads = 2;
    c.ffn_inner = 32;
    c.vocab = 11;
    c.max_positions = 16;
    c.norm = norm;
    return c;
}

double matrix_std(const Tensor& t) {
    double m = 0.0;
    for (double v : t.data()) m += v;
    m /= static_cast<double>(t.numel());
    double s = 0.0;
    for (double v : t.data()) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(t.numel()));
}

std::vector<int> tokens(std::size_t n, std::size_t v, std::uint64_t seed) {
    Rng r(seed);
    std::vector<int> t(n);
    for (int& x : t) x = static_cast<int>(r.below(v));
    return t;
}

const Tensor& param(const Model& m, const std::string& name) {
    const Parameter* p = m.store().find(name);
    if (p == nullptr) throw std::runtime_error("missing " + name);
    return p->value;
}

}  // namespace

TEST(ModelConfig, Validation) {
    ModelConfig c = small(Arch::Decoder, NormVariant::PreLN);
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small(Arch::Decoder, NormVariant::PreLN);
    c.moe_frequency = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, MoeFrequencySelectsEveryKthLayer) {
    ModelConfig c = small(Arch::Decoder, NormVariant::PreLN, 4);
    c.moe = RouterConfig{};
    c.moe_frequency = 2;
    EXPECT_FALSE(c.is_moe_layer(0));
    EXPECT_TRUE(c.is_moe_layer(1));
    EXPECT_FALSE(c.is_moe_layer(2));
    EXPECT_TRUE(c.is_moe_layer(3));
    Model m(c, 1);
    EXPECT_EQ(m.count_moe_layers(), 2u);
}

TEST(Sublayer, LayerNormCountsPerVariant) {
    ModelConfig c = small(Arch::Decoder, NormVariant::PreLN);
    for (auto [v, n] : std::vector<std::pair<NormVariant, std::size_t>>{
             {NormVariant::PostLN, 1}, {NormVariant::PreLN, 1}, {NormVariant::SubLN, 2}, {NormVariant::DeepNorm, 1}}) {
        ParamStore store;
        Sublayer att = build_sublayer_attention(c, v, store, "a", StackSide::Decoder, 1.0, false, true);
        Sublayer ffn = build_sublayer_ffn(c, v, store, "f", StackSide::Decoder, 1.0);
        EXPECT_EQ(att.count_layer_norms(), n) << variant_name(v);
        EXPECT_EQ(ffn.count_layer_norms(), n) << variant_name(v);
    }
}

TEST(Model, LayerNormCountFormula) {
    for (std::size_t layers : {1, 2, 5}) {
        const auto l = layers;
        EXPECT_EQ(Model(small(Arch::Decoder, NormVariant::PostLN, l), 1).count_layer_norms(), 2 * l);
        EXPECT_EQ(Model(small(Arch::Decoder, NormVariant::DeepNorm, l), 1).count_layer_norms(), 2 * l);
        EXPECT_EQ(Model(small(Arch::Decoder, NormVariant::PreLN, l), 1).count_layer_norms(), 2 * l + 1);
        EXPECT_EQ(Model(small(Arch::Decoder, NormVariant::SubLN, l), 1).count_layer_norms(), 4 * l + 1);
        // Encoder-decoder: encoder layers have 2 sublayers, decoder layers 3.
        EXPECT_EQ(Model(small(Arch::EncoderDecoder, NormVariant::PostLN, l), 1).count_layer_norms(), 5 * l);
        EXPECT_EQ(Model(small(Arch::EncoderDecoder, NormVariant::PreLN, l), 1).count_layer_norms(), 5 * l + 2);
        EXPECT_EQ(Model(small(Arch::EncoderDecoder, NormVariant::SubLN, l), 1).count_layer_norms(), 10 * l + 2);
    }
}

TEST(Model, NoFinalLayerNormForPostAndDeepNorm) {
    EXPECT_FALSE(Model(small(Arch::Decoder, NormVariant::PostLN), 1).decoder().final_ln.has_value());
    EXPECT_FALSE(Model(small(Arch::Decoder, NormVariant::DeepNorm), 1).decoder().final_ln.has_value());
    EXPECT_TRUE(Model(small(Arch::Decoder, NormVariant::PreLN), 1).decoder().final_ln.has_value());
    EXPECT_TRUE(Model(small(Arch::Decoder, NormVariant::SubLN), 1).decoder().final_ln.has_value());
}

TEST(FeedForward, ShapesOfProjections) {
    ModelConfig c = small(Arch::Decoder, NormVariant::PreLN);
    c.hidden = 8;
    c.ffn_inner = 32;
    c.heads = 2;
    ParamStore store;
    Sublayer s = build_sublayer_ffn(c, NormVariant::PreLN, store, "f", StackSide::Decoder, 1.0);
    EXPECT_EQ(s.ffn.fc1.weight.shape(), (Shape{8, 32}));
    EXPECT_EQ(s.ffn.fc2.weight.shape(), (Shape{32, 8}));
}

TEST(Sublayer, ZeroSecondProjectionIsIdentity) {
    ModelConfig c = small(Arch::Decoder, NormVariant::SubLN);
    ParamStore store;
    Sublayer s = build_sublayer_ffn(c, NormVariant::SubLN, store, "f", StackSide::Decoder, 1.0);
    Rng r(3);
    for (auto& p : store.params()) {
        Tensor fresh = randn_init(p.value.shape(), 0.5, r);
        std::copy(fresh.data().begin(), fresh.data().end(), p.value.mutable_data().begin());
    }
    for (double& v : s.ffn.fc2.weight.mutable_data()) v = 0.0;
    for (double& v : s.ffn.fc2.bias.mutable_data()) v = 0.0;
    Tensor x = randn_init({5, c.hidden}, 1.0, r);
    ForwardContext ctx;
    Tensor y = s.apply(x, SequenceLayout{1, 5, 0, nullptr}, ctx, nullptr);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Sublayer, GradientReachesBothLayerNormGains) {
    ModelConfig c = small(Arch::Decoder, NormVariant::SubLN);
    ParamStore store;
    Sublayer s = build_sublayer_ffn(c, NormVariant::SubLN, store, "f", StackSide::Decoder, 1.0);
    Rng r(4);
    for (auto& p : store.params()) {
        Tensor fresh = randn_init(p.value.shape(), 0.5, r);
        std::copy(fresh.data().begin(), fresh.data().end(), p.value.mutable_data().begin());
    }
    Tensor x = randn_init({6, c.hidden}, 1.0, r);
    ForwardContext ctx;
    Tensor y = s.apply(x, SequenceLayout{1, 6, 0, nullptr}, ctx, nullptr);
    std::vector<double> w(y.numel());
    for (double& v : w) v = r.normal();
    backward(dot_const(y, w));
    for (const Tensor* g : {&s.ln.gain, &s.ffn.inner_ln->gain}) {
        double norm = 0.0;
        for (double v : g->grad()) norm += v * v;
        EXPECT_GT(norm, 0.0);
    }
}

TEST(Model, OutputShapeAndAllVariants) {
    for (NormVariant v : {NormVariant::PostLN, NormVariant::PreLN, NormVariant::SubLN, NormVariant::DeepNorm}) {
        ModelConfig c = small(Arch::Decoder, v);
        c.vocab = 64;
        Model m(c, 1);
        Tensor logits = m.forward_tokens(tokens(16, 64, 2));
        EXPECT_EQ(logits.shape(), (Shape{16, 64})) << variant_name(v);
    }
}

TEST(Model, TokenOutOfRangeThrows) {
    Model m(small(Arch::Decoder, NormVariant::PreLN), 1);
    const std::vector<int> bad{0, 11};
    EXPECT_THROW(m.forward_tokens(bad), ShapeError);
}

TEST(Model, DecoderIsCausal) {
    for (NormVariant v : {NormVariant::PostLN, NormVariant::SubLN}) {
        Model m(small(Arch::Decoder, v), 5);
        std::vector<int> t = tokens(10, 11, 6);
        Tensor a = m.forward_tokens(t);
        const std::size_t j = 6;
        t[j] = (t[j] + 1) % 11;
        Tensor b = m.forward_tokens(t);
        const std::size_t vocab = 11;
        for (std::size_t i = 0; i < j * vocab; ++i) EXPECT_EQ(a[i], b[i]);
        bool changed = false;
        for (std::size_t i = j * vocab; i < a.numel(); ++i) changed = changed || a[i] != b[i];
        EXPECT_TRUE(changed);
    }
}

TEST(Model, CrossAttentionReachesEveryTargetPosition) {
    Model m(small(Arch::EncoderDecoder, NormVariant::SubLN), 5);
    std::vector<int> src = tokens(7, 11, 1);
    const std::vector<int> tgt = tokens(6, 11, 2);
    Tensor a = m.forward_pair(src, tgt);
    src[6] = (src[6] + 3) % 11;
    Tensor b = m.forward_pair(src, tgt);
    for (std::size_t row = 0; row < 6; ++row) {
        bool changed = false;
        for (std::size_t j = 0; j < 11; ++j) changed = changed || a.at(row, j) != b.at(row, j);
        EXPECT_TRUE(changed) << "target position " << row;
    }
}

TEST(Model, EvalForwardIsDeterministic) {
    ModelConfig c = small(Arch::Decoder, NormVariant::PreLN);
    c.dropout = 0.1;
    Model m(c, 9);
    const auto t = tokens(8, 11, 3);
    Tensor a = m.forward_tokens(t);
    Tensor b = m.forward_tokens(t);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(DefaultInit, FormulasPerArchitecture) {
    ModelConfig dec = small(Arch::Decoder, NormVariant::DeepNorm, 8);
    ModelInit i = default_init(dec);
    EXPECT_DOUBLE_EQ(i.decoder.alpha, std::pow(16.0, 0.25));
    EXPECT_DOUBLE_EQ(i.decoder.beta, std::pow(64.0, -0.25));
    EXPECT_NEAR(i.decoder.beta, 0.3536, 1e-4);
    EXPECT_EQ(i.decoder.gamma, 1.0);

    ModelConfig sub = small(Arch::Decoder, NormVariant::SubLN, 8);
    EXPECT_DOUBLE_EQ(default_init(sub).decoder.gamma, std::sqrt(std::log(16.0)));
    EXPECT_EQ(default_init(sub).decoder.alpha, 1.0);

    ModelConfig enc = small(Arch::Encoder, NormVariant::DeepNorm, 6);
    EXPECT_DOUBLE_EQ(default_init(enc).encoder.alpha, std::pow(12.0, 0.25));
    EXPECT_DOUBLE_EQ(default_init(enc).encoder.beta, std::pow(48.0, -0.25));

    ModelConfig ed = small(Arch::EncoderDecoder, NormVariant::DeepNorm);
    ed.layers_enc = 6;
    ed.layers_dec = 4;
    ModelInit e = default_init(ed);
    EXPECT_DOUBLE_EQ(e.encoder.alpha, 0.81 * std::pow(std::pow(6.0, 4) * 4.0, 1.0 / 16));
    EXPECT_DOUBLE_EQ(e.encoder.beta, 0.87 * std::pow(std::pow(6.0, 4) * 4.0, -1.0 / 16));
    EXPECT_DOUBLE_EQ(e.decoder.alpha, std::pow(12.0, 0.25));
    EXPECT_DOUBLE_EQ(e.decoder.beta, std::pow(48.0, -0.25));

    ed.norm = NormVariant::SubLN;
    ModelInit s = default_init(ed);
    EXPECT_DOUBLE_EQ(s.decoder.gamma, std::sqrt(std::log(12.0)));
    EXPECT_DOUBLE_EQ(s.encoder.gamma, std::sqrt(std::log(12.0) * std::log(12.0) / 3.0));

    ModelConfig post = small(Arch::Decoder, NormVariant::PostLN);
    ModelInit p = default_init(post);
    EXPECT_EQ(p.decoder.alpha, 1.0);
    EXPECT_EQ(p.decoder.beta, 1.0);
    EXPECT_EQ(p.decoder.gamma, 1.0);
}

TEST(DefaultInit, OverridesWin) {
    ModelConfig c = small(Arch::Decoder, NormVariant::DeepNorm);
    c.alpha = 1.5;
    c.beta = 0.5;
    ModelInit i = default_init(c);
    EXPECT_EQ(i.decoder.alpha, 1.5);
    EXPECT_EQ(i.decoder.beta, 0.5);
}

TEST(InitWeights, SpecVariantMismatchThrows) {
    ModelConfig c = small(Arch::Decoder, NormVariant::PostLN);
    ModelInit bad;
    bad.decoder.gamma = 2.0;
    EXPECT_THROW(Model(c, bad, 1), ConfigError);
    ModelInit neg;
    neg.decoder.alpha = -1.0;
    EXPECT_THROW(Model(small(Arch::Decoder, NormVariant::DeepNorm), neg, 1), ConfigError);
}

TEST(InitWeights, GammaOneIsBaseline) {
    ModelConfig sub = small(Arch::Decoder, NormVariant::SubLN);
    ModelInit one;
    Model a(sub, one, 3);
    ModelConfig pre = small(Arch::Decoder, NormVariant::PreLN);
    Model b(pre, 3);
    for (const auto& p : b.store().params()) {
        const Tensor& q = param(a, p.name);
        for (std::size_t i = 0; i < q.numel(); ++i) ASSERT_EQ(q[i], p.value[i]) << p.name;
    }
}

TEST(InitWeights, GammaScalesOnlyTheScaledSet) {
    ModelConfig c = small(Arch::Decoder, NormVariant::SubLN);
    c.hidden = 64;
    c.ffn_inner = 256;
    c.heads = 4;
    ModelInit one, two;
    two.decoder.gamma = 2.0;
    Model a(c, one, 3), b(c, two, 3);
    for (const auto& p : a.store().params()) {
        const Tensor& q = param(b, p.name);
        const bool scaled = two.decoder.scales(p.role);
        for (std::size_t i = 0; i < q.numel(); ++i)
            ASSERT_EQ(q[i], scaled ? 2.0 * p.value[i] : p.value[i]) << p.name;
    }
    const double ratio = matrix_std(param(b, "dec.layers.0.ffn.fc1.weight")) /
                         matrix_std(param(a, "dec.layers.0.ffn.fc1.weight"));
    EXPECT_NEAR(ratio, 2.0, 1e-12);
}

TEST(InitWeights, DeepNormBetaReadBackFromMatrixStd) {
    ModelConfig c = small(Arch::Decoder, NormVariant::DeepNorm, 8);
    c.hidden = 128;
    c.heads = 4;
    c.ffn_inner = 512;
    Model m(c, 11);
    const double beta = std::pow(64.0, -0.25);
    for (const std::string name : {"dec.layers.3.self_attn.v_proj.weight", "dec.layers.3.self_attn.out_proj.weight",
                                   "dec.layers.3.ffn.fc1.weight", "dec.layers.3.ffn.fc2.weight"}) {
        const Tensor& w = param(m, name);
        const double xavier = std::sqrt(2.0 / static_cast<double>(w.dim(0) + w.dim(1)));
        EXPECT_NEAR(matrix_std(w) / xavier, beta, 0.03 * beta) << name;
    }
    const Tensor& q = param(m, "dec.layers.3.self_attn.q_proj.weight");
    EXPECT_NEAR(matrix_std(q) / std::sqrt(2.0 / 256.0), 1.0, 0.03);
    const Tensor& emb = param(m, "dec.embed_tokens");
    EXPECT_GT(matrix_std(emb), 0.0);
}

TEST(InitWeights, LayerNormAndBiasConstants) {
    Model m(small(Arch::Decoder, NormVariant::SubLN), 2);
    for (const auto& p : m.store().params()) {
        if (p.role == ParamRole::LnGain)
            for (double v : p.value.data()) EXPECT_EQ(v, 1.0);
        if (p.role == ParamRole::LnBias || p.role == ParamRole::Bias)
            for (double v : p.value.data()) EXPECT_EQ(v, 0.0);
    }
}

TEST(DeepNorm, UnitConstantsMatchPostLnBitForBit) {
    for (Arch arch : {Arch::Decoder, Arch::EncoderDecoder}) {
        ModelConfig post = small(arch, NormVariant::PostLN);
        ModelConfig deep = small(arch, NormVariant::DeepNorm);
        deep.alpha = 1.0;
        deep.beta = 1.0;
        Model a(post, 21), b(deep, 21);
        Batch batch;
        batch.batch = 2;
        batch.tgt_len = 5;
        batch.tgt_in = tokens(10, 11, 1);
        batch.targets = tokens(10, 11, 2);
        if (arch == Arch::EncoderDecoder) {
            batch.src_len = 4;
            batch.src = tokens(8, 11, 3);
        }
        ForwardContext ctx;
        Tensor la = cross_entropy(a.forward(batch, ctx).logits, batch.targets);
        Tensor lb = cross_entropy(b.forward(batch, ctx).logits, batch.targets);
        ASSERT_EQ(la.item(), lb.item());
        backward(la);
        backward(lb);
        const auto& pa = a.store().params();
        const auto& pb = b.store().params();
        ASSERT_EQ(pa.size(), pb.size());
        for (std::size_t k = 0; k < pa.size(); ++k) {
            ASSERT_EQ(pa[k].name, pb[k].name);
            for (std::size_t i = 0; i < pa[k].value.numel(); ++i) {
                ASSERT_EQ(pa[k].value[i], pb[k].value[i]) << pa[k].name;
                ASSERT_EQ(pa[k].value.grad()[i], pb[k].value.grad()[i]) << pa[k].name;
            }
        }
    }
}

TEST(Model, TiedEmbeddingsHaveNoHead) {
    ModelConfig c = small(Arch::Decoder, NormVariant::PreLN);
    c.tie_embeddings = true;
    Model m(c, 1);
    EXPECT_EQ(m.store().find("head.weight"), nullptr);
    EXPECT_EQ(m.forward_tokens(tokens(4, 11, 1)).shape(), (Shape{4, 11}));
}
