// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "scaleforge/error.hpp"
#include "scaleforge/layers.hpp"
#include "scaleforge/moe.hpp"
#include "scaleforge/ops.hpp"
#include "scaleforge/rng.hpp"

namespace scaleforge {

enum class NormVariant { PostLN, PreLN, SubLN, DeepNorm };
enum class Arch { Decoder, Encoder, EncoderDecoder };

inline const char* variant_name(NormVariant v) {
    switch (v) {
        case NormVariant::PostLN: return "postln";
        case NormVariant::PreLN: return "preln";
        case NormVariant::SubLN: return "subln";
        case NormVariant::DeepNorm: return "deepnorm";
    }
    return "?";
}

inline NormVariant parse_variant(const std::string& s) {
    if (s == "postln") return NormVariant::PostLN;
    if (s == "preln") return NormVariant::PreLN;
    if (s == "subln") return NormVariant::SubLN;
    if (s == "deepnorm") return NormVariant::DeepNorm;
    throw ConfigError("unknown norm variant '" + s + "' (postln, preln, subln, deepnorm)");
}

inline const char* arch_name(Arch a) {
    switch (a) {
        case Arch::Decoder: return "decoder";
        case Arch::Encoder: return "encoder";
        case Arch::EncoderDecoder: return "encoder-decoder";
    }
    return "?";
}

inline Arch parse_arch(const std::string& s) {
    if (s == "decoder") return Arch::Decoder;
    if (s == "encoder") return Arch::Encoder;
    if (s == "encoder-decoder") return Arch::EncoderDecoder;
    throw ConfigError("unknown arch '" + s + "' (decoder, encoder, encoder-decoder)");
}

struct ModelConfig {
    Arch arch = Arch::Decoder;
    std::size_t layers_enc = 0;
    std::size_t layers_dec = 2;
    std::size_t hidden = 64;
    std::size_t heads = 4;
    std::size_t ffn_inner = 256;
    std::size_t vocab = 64;
    std::size_t max_positions = 64;
    NormVariant norm = NormVariant::SubLN;
    std::optional<RouterConfig> moe;
    std::size_t moe_frequency = 2;
    double dropout = 0.0;
    double attn_dropout = 0.0;
    bool tie_embeddings = false;
    double ln_eps = 1e-5;
    // Overrides of the depth-derived init constants; unset means "use the rule".
    std::optional<double> gamma;
    std::optional<double> alpha;
    std::optional<double> beta;

    bool has_encoder() const { return arch != Arch::Decoder; }
    bool has_decoder() const { return arch != Arch::Encoder; }

    void validate() const {
        if (hidden == 0 || heads == 0 || hidden % heads != 0)
            throw ConfigError("hidden (" + std::to_string(hidden) + ") must be divisible by heads (" +
                              std::to_string(heads) + ")");
        if (ffn_inner == 0) throw ConfigError("ffn_inner must be positive");
        if (vocab < 2) throw ConfigError("vocab must be >= 2");
        if (max_positions == 0) throw ConfigError("max_positions must be positive");
        if (has_encoder() && layers_enc == 0) throw ConfigError("encoder needs at least one layer");
        if (has_decoder() && layers_dec == 0) throw ConfigError("decoder needs at least one layer");
        if (moe_frequency < 1) throw ConfigError("moe_frequency must be >= 1");
        if (moe) moe->validate();
        if (dropout < 0.0 || dropout >= 1.0 || attn_dropout < 0.0 || attn_dropout >= 1.0)
            throw ConfigError("dropout probabilities must be in [0, 1)");
        for (const auto& o : {gamma, alpha, beta})
            if (o && !(*o > 0.0)) throw ConfigError("gamma/alpha/beta overrides must be positive");
    }

    bool is_moe_layer(std::size_t layer_index) const {
        return moe.has_value() && (layer_index + 1) % moe_frequency == 0;
    }
};

/// Depth-dependent init constants of one stack.
struct InitSpec {
    double gamma = 1.0;  // Sub-LN weight gain
    double alpha = 1.0;  // DeepNorm residual multiplier
    double beta = 1.0;   // DeepNorm weight gain
    std::vector<std::string> scaled_parameter_set{"v_proj", "out_proj", "fc1", "fc2"};

    double weight_gain(NormVariant v) const {
        switch (v) {
            case NormVariant::SubLN: return gamma;
            case NormVariant::DeepNorm: return beta;
            default: return 1.0;
        }
    }

    bool scales(ParamRole role) const {
        return std::find(scaled_parameter_set.begin(), scaled_parameter_set.end(), role_name(role)) !=
               scaled_parameter_set.end();
    }
};

struct ModelInit {
    InitSpec encoder;
    InitSpec decoder;
};

inline void validate_init(NormVariant v, const InitSpec& s) {
    if (!(s.gamma > 0.0) || !(s.alpha > 0.0) || !(s.beta > 0.0))
        throw ConfigError("init: gamma, alpha, beta must be positive");
    const bool gamma_ok = v == NormVariant::SubLN || s.gamma == 1.0;
    const bool ab_ok = v == NormVariant::DeepNorm || (s.alpha == 1.0 && s.beta == 1.0);
    if (!gamma_ok || !ab_ok)
        throw ConfigError(std::string("init spec does not match variant ") + variant_name(v) +
                          ": gamma applies only to subln, alpha/beta only to deepnorm");
}

/// Default constants per stack, then any config overrides.
///
/// DeepNorm: decoder-only alpha=(2N)^(1/4), beta=(8N)^(-1/4); encoder-only the
/// same with M; encoder-decoder encoder alpha=0.81 (M^4 N)^(1/16),
/// beta=0.87 (M^4 N)^(-1/16), decoder alpha=(3N)^(1/4), beta=(12N)^(-1/4).
/// Sub-LN gamma: decoder-only sqrt(log 2N), encoder-only sqrt(log 2M);
/// encoder-decoder decoder sqrt(log 3N), encoder sqrt(log(3N) log(2M) / 3).
inline ModelInit default_init(const ModelConfig& cfg) {
    ModelInit init;
    const double m = static_cast<double>(cfg.layers_enc);
    const double n = static_cast<double>(cfg.layers_dec);
    auto apply = [&](InitSpec& s, double alpha, double beta, double gamma) {
        if (cfg.norm == NormVariant::DeepNorm) {
            s.alpha = alpha;
            s.beta = beta;
        }
        if (cfg.norm == NormVariant::SubLN) s.gamma = gamma;
    };
    switch (cfg.arch) {
        case Arch::Decoder:
            apply(init.decoder, std::pow(2.0 * n, 0.25), std::pow(8.0 * n, -0.25), std::sqrt(std::log(2.0 * n)));
            break;
        case Arch::Encoder:
            apply(init.encoder, std::pow(2.0 * m, 0.25), std::pow(8.0 * m, -0.25), std::sqrt(std::log(2.0 * m)));
            break;
        case Arch::EncoderDecoder: {
            const double mn = std::pow(m, 4.0) * n;
            apply(init.encoder, 0.81 * std::pow(mn, 1.0 / 16.0), 0.87 * std::pow(mn, -1.0 / 16.0),
                  std::sqrt(std::log(3.0 * n) * std::log(2.0 * m) / 3.0));
            apply(init.decoder, std::pow(3.0 * n, 0.25), std::pow(12.0 * n, -0.25), std::sqrt(std::log(3.0 * n)));
            break;
        }
    }
    for (InitSpec* s : {&init.encoder, &init.decoder}) {
        if (cfg.gamma) s->gamma = *cfg.gamma;
        if (cfg.alpha) s->alpha = *cfg.alpha;
        if (cfg.beta) s->beta = *cfg.beta;
    }
    return init;
}

enum class SublayerKind { SelfAttention, CrossAttention, FeedForward, MixtureOfExperts };

/// Token layout shared by all sublayers of one forward pass.
struct SequenceLayout {
    std::size_t batch = 1;
    std::size_t len = 0;         // tokens per sequence in the residual stream
    std::size_t memory_len = 0;  // encoder tokens per sequence (cross-attention)
    const Tensor* memory = nullptr;
};

/// One residual sublayer. For a sublayer function f:
///   PostLN    LN(x + f(x))
///   PreLN     x + f(LN(x))
///   SubLN     x + f(LN(x)), f carrying an extra LN before its output projection
///   DeepNorm  LN(alpha x + f(x))
struct Sublayer {
    SublayerKind kind = SublayerKind::FeedForward;
    NormVariant variant = NormVariant::PreLN;
    double alpha = 1.0;
    double dropout = 0.0;
    double attn_dropout = 0.0;
    bool causal = false;
    LayerNorm ln;
    Attention attn;
    FeedForward ffn;
    std::optional<MoeLayer> moe;

    std::size_t count_layer_norms() const {
        std::size_t n = 1;
        if (attn.inner_ln) ++n;
        if (ffn.inner_ln) ++n;
        if (moe)
            for (const auto& e : moe->experts) n += e.inner_ln ? 1 : 0;
        return n;
    }

    Tensor apply(const Tensor& x, const SequenceLayout& layout, ForwardContext& ctx, std::vector<MoeResult>* aux) const {
        auto f = [&](const Tensor& h) -> Tensor {
            switch (kind) {
                case SublayerKind::SelfAttention:
                    return attn(h, h, layout.batch, layout.len, layout.len, causal, attn_dropout, ctx);
                case SublayerKind::CrossAttention:
                    return attn(h, *layout.memory, layout.batch, layout.len, layout.memory_len, false, attn_dropout,
                                ctx);
                case SublayerKind::FeedForward:
                    return ffn(h);
                case SublayerKind::MixtureOfExperts: {
                    MoeResult r = moe->forward(h);
                    Tensor out = r.output;
                    if (aux) aux->push_back(std::move(r));
                    return out;
                }
            }
            throw ConfigError("unknown sublayer kind");
        };
        switch (variant) {
            case NormVariant::PostLN:
                return ln(add(x, maybe_dropout(f(x), dropout, ctx)));
            case NormVariant::PreLN:
            case NormVariant::SubLN:
                return add(x, maybe_dropout(f(ln(x)), dropout, ctx));
            case NormVariant::DeepNorm: {
                // Skipping the identity scale keeps the tape, and so the gradient
                // summation order, identical to PostLN when alpha is 1.
                Tensor res = alpha == 1.0 ? x : scale(x, alpha);
                return ln(add(res, maybe_dropout(f(x), dropout, ctx)));
            }
        }
        throw ConfigError("unknown norm variant");
    }
};

inline Sublayer build_sublayer_attention(const ModelConfig& cfg, NormVariant variant, ParamStore& store,
                                         const std::string& name, StackSide side, double alpha, bool cross,
                                         bool causal) {
    Sublayer s;
    s.kind = cross ? SublayerKind::CrossAttention : SublayerKind::SelfAttention;
    s.variant = variant;
    s.alpha = alpha;
    s.dropout = cfg.dropout;
    s.attn_dropout = cfg.attn_dropout;
    s.causal = causal;
    s.ln = LayerNorm::make(store, name + ".ln", cfg.hidden, side, name + ".ln", cfg.ln_eps);
    s.attn = Attention::make(store, name, cfg.hidden, cfg.heads, variant == NormVariant::SubLN, cfg.ln_eps, side);
    return s;
}

/// Dense FFN sublayer, or an MoE sublayer when `moe` is given.
inline Sublayer build_sublayer_ffn(const ModelConfig& cfg, NormVariant variant, ParamStore& store,
                                   const std::string& name, StackSide side, double alpha,
                                   const std::optional<RouterConfig>& moe = {}) {
    Sublayer s;
    s.variant = variant;
    s.alpha = alpha;
    s.dropout = cfg.dropout;
    s.ln = LayerNorm::make(store, name + ".ln", cfg.hidden, side, name + ".ln", cfg.ln_eps);
    const bool sub_ln = variant == NormVariant::SubLN;
    if (moe) {
        s.kind = SublayerKind::MixtureOfExperts;
        s.moe = MoeLayer::make(store, name + ".moe", *moe, cfg.hidden, cfg.ffn_inner, sub_ln, cfg.ln_eps, side,
                               name + ".ffn");
    } else {
        s.kind = SublayerKind::FeedForward;
        s.ffn = FeedForward::make(store, name + ".ffn", cfg.hidden, cfg.ffn_inner, sub_ln, cfg.ln_eps, side,
                                  name + ".ffn");
    }
    return s;
}

struct Stack {
    StackSide side = StackSide::Decoder;
    bool causal = false;
    std::vector<std::vector<Sublayer>> layers;
    std::optional<LayerNorm> final_ln;  // PreLN and SubLN only

    Tensor forward(Tensor x, const SequenceLayout& layout, ForwardContext& ctx, std::vector<MoeResult>* aux) const {
        for (const auto& layer : layers)
            for (const auto& sub : layer) x = sub.apply(x, layout, ctx, aux);
        return final_ln ? (*final_ln)(x) : x;
    }

    std::size_t count_layer_norms() const {
        std::size_t n = final_ln ? 1 : 0;
        for (const auto& layer : layers)
            for (const auto& sub : layer) n += sub.count_layer_norms();
        return n;
    }
};

/// A batch of token sequences laid out row-major, `batch` sequences each.
/// Decoder: tgt_in/targets. Encoder: src/targets. Encoder-decoder: all three.
struct Batch {
    std::size_t batch = 1;
    std::size_t src_len = 0;
    std::size_t tgt_len = 0;
    std::vector<int> src;
    std::vector<int> tgt_in;
    std::vector<int> targets;
};

struct ForwardResult {
    Tensor logits;  // [batch * len, V]
    std::vector<MoeResult> moe;
};

class Model;
inline void init_weights(Model& model, const ModelInit& spec, std::uint64_t seed);

class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed) : Model(cfg, default_init(cfg), seed) {}

    Model(ModelConfig cfg, const ModelInit& init, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        if (cfg_.has_encoder()) validate_init(cfg_.norm, init.encoder);
        if (cfg_.has_decoder()) validate_init(cfg_.norm, init.decoder);
        init_ = init;
        build();
        init_weights(*this, init_, seed);
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    const ModelConfig& config() const { return cfg_; }
    const ModelInit& init_spec() const { return init_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    const Stack& encoder() const { return encoder_; }
    const Stack& decoder() const { return decoder_; }

    std::size_t count_layer_norms() const {
        return (cfg_.has_encoder() ? encoder_.count_layer_norms() : 0) +
               (cfg_.has_decoder() ? decoder_.count_layer_norms() : 0);
    }

    std::size_t count_moe_layers() const {
        std::size_t n = 0;
        for (const Stack* s : {&encoder_, &decoder_})
            for (const auto& layer : s->layers)
                for (const auto& sub : layer) n += sub.moe ? 1 : 0;
        return n;
    }

    ForwardResult forward(const Batch& b, ForwardContext& ctx) const {
        ForwardResult res;
        Tensor h;
        if (cfg_.arch == Arch::Encoder) {
            check_tokens(b.src, b.batch * b.src_len, "src");
            SequenceLayout layout{b.batch, b.src_len, 0, nullptr};
            h = encoder_.forward(embed(enc_tokens_, enc_positions_, b.src, b.batch, b.src_len, ctx), layout, ctx,
                                 &res.moe);
        } else {
            check_tokens(b.tgt_in, b.batch * b.tgt_len, "tgt_in");
            Tensor memory;
            SequenceLayout layout{b.batch, b.tgt_len, 0, nullptr};
            if (cfg_.arch == Arch::EncoderDecoder) {
                check_tokens(b.src, b.batch * b.src_len, "src");
                SequenceLayout enc_layout{b.batch, b.src_len, 0, nullptr};
                memory = encoder_.forward(embed(enc_tokens_, enc_positions_, b.src, b.batch, b.src_len, ctx),
                                          enc_layout, ctx, &res.moe);
                layout.memory = &memory;
                layout.memory_len = b.src_len;
            }
            h = decoder_.forward(embed(dec_tokens_, dec_positions_, b.tgt_in, b.batch, b.tgt_len, ctx), layout, ctx,
                                 &res.moe);
        }
        if (cfg_.tie_embeddings) {
            res.logits = matmul(h, transpose(cfg_.arch == Arch::Encoder ? enc_tokens_ : dec_tokens_));
        } else {
            res.logits = head_(h);
        }
        return res;
    }

    /// Eval-mode logits [t, V] for one sequence (decoder or encoder arch).
    Tensor forward_tokens(std::span<const int> tokens) const {
        Batch b;
        b.batch = 1;
        if (cfg_.arch == Arch::Encoder) {
            b.src.assign(tokens.begin(), tokens.end());
            b.src_len = tokens.size();
        } else if (cfg_.arch == Arch::Decoder) {
            b.tgt_in.assign(tokens.begin(), tokens.end());
            b.tgt_len = tokens.size();
        } else {
            throw ConfigError("forward_tokens: encoder-decoder models need forward_pair");
        }
        ForwardContext ctx;
        return forward(b, ctx).logits;
    }

    /// Eval-mode logits [t_tgt, V] for one (source, shifted target) pair.
    Tensor forward_pair(std::span<const int> src, std::span<const int> tgt_in) const {
        if (cfg_.arch != Arch::EncoderDecoder) throw ConfigError("forward_pair needs an encoder-decoder model");
        Batch b;
        b.src.assign(src.begin(), src.end());
        b.tgt_in.assign(tgt_in.begin(), tgt_in.end());
        b.src_len = src.size();
        b.tgt_len = tgt_in.size();
        ForwardContext ctx;
        return forward(b, ctx).logits;
    }

private:
    void check_tokens(const std::vector<int>& ids, std::size_t expected, const char* what) const {
        if (ids.size() != expected)
            throw ShapeError(std::string("batch field ") + what + " has " + std::to_string(ids.size()) +
                             " tokens, expected " + std::to_string(expected));
        for (int id : ids)
            if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab)
                throw ShapeError("token id " + std::to_string(id) + " out of range [0, " +
                                 std::to_string(cfg_.vocab) + ")");
    }

    Tensor embed(const Tensor& tokens, const Tensor& positions, const std::vector<int>& ids, std::size_t batch,
                 std::size_t len, ForwardContext& ctx) const {
        if (len > cfg_.max_positions)
            throw ShapeError("sequence length " + std::to_string(len) + " exceeds max_positions " +
                             std::to_string(cfg_.max_positions));
        std::vector<int> pos(batch * len);
        for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i % len);
        Tensor x = add(embedding_lookup(tokens, ids), embedding_lookup(positions, pos));
        return maybe_dropout(x, cfg_.dropout, ctx);
    }

    void build_stack(Stack& stack, StackSide side, std::size_t layers, const InitSpec& spec, bool causal, bool cross,
                     const std::string& prefix) {
        stack.side = side;
        stack.causal = causal;
        for (std::size_t i = 0; i < layers; ++i) {
            const std::string base = prefix + ".layers." + std::to_string(i);
            std::vector<Sublayer> subs;
            subs.push_back(build_sublayer_attention(cfg_, cfg_.norm, store_, base + ".self_attn", side, spec.alpha,
                                                    false, causal));
            if (cross)
                subs.push_back(build_sublayer_attention(cfg_, cfg_.norm, store_, base + ".cross_attn", side,
                                                        spec.alpha, true, false));
            std::optional<RouterConfig> moe;
            if (cfg_.is_moe_layer(i)) moe = cfg_.moe;
            subs.push_back(build_sublayer_ffn(cfg_, cfg_.norm, store_, base, side, spec.alpha, moe));
            stack.layers.push_back(std::move(subs));
        }
        if (cfg_.norm == NormVariant::PreLN || cfg_.norm == NormVariant::SubLN)
            stack.final_ln = LayerNorm::make(store_, prefix + ".final_ln", cfg_.hidden, side, prefix + ".final_ln",
                                             cfg_.ln_eps);
    }

    void build() {
        const std::size_t d = cfg_.hidden;
        if (cfg_.has_encoder()) {
            enc_tokens_ = store_.add("enc.embed_tokens", {cfg_.vocab, d}, ParamRole::TokenEmbedding,
                                     StackSide::Encoder, "enc.embed_tokens");
            enc_positions_ = store_.add("enc.embed_positions", {cfg_.max_positions, d}, ParamRole::PositionEmbedding,
                                        StackSide::Encoder, "enc.embed_positions");
            build_stack(encoder_, StackSide::Encoder, cfg_.layers_enc, init_.encoder, false, false, "enc");
        }
        if (cfg_.has_decoder()) {
            dec_tokens_ = store_.add("dec.embed_tokens", {cfg_.vocab, d}, ParamRole::TokenEmbedding,
                                     StackSide::Decoder, "dec.embed_tokens");
            dec_positions_ = store_.add("dec.embed_positions", {cfg_.max_positions, d}, ParamRole::PositionEmbedding,
                                        StackSide::Decoder, "dec.embed_positions");
            build_stack(decoder_, StackSide::Decoder, cfg_.layers_dec, init_.decoder, true,
                        cfg_.arch == Arch::EncoderDecoder, "dec");
        }
        if (!cfg_.tie_embeddings) {
            const StackSide side = cfg_.has_decoder() ? StackSide::Decoder : StackSide::Encoder;
            head_ = Linear::make(store_, "head", d, cfg_.vocab, ParamRole::Head, side, "head", false, false);
        }
    }

    ModelConfig cfg_;
    ModelInit init_;
    ParamStore store_;
    Stack encoder_;
    Stack decoder_;
    Tensor enc_tokens_;
    Tensor enc_positions_;
    Tensor dec_tokens_;
    Tensor dec_positions_;
    Linear head_;
};

/// Baseline init followed by the depth-dependent gain.
///
/// Weight matrices start Xavier-normal, std = sqrt(2 / (fan_in + fan_out)).
/// Matrices whose role is in the stack's scaled_parameter_set get std
/// multiplied by gamma (Sub-LN) or beta (DeepNorm). Embeddings use
/// std = hidden^-1/2 and are never scaled; LN gains start at 1, biases at 0.
/// Every parameter draws from its own stream keyed by (seed, init_key).
inline void init_weights(Model& model, const ModelInit& spec, std::uint64_t seed) {
    const ModelConfig& cfg = model.config();
    if (cfg.has_encoder()) validate_init(cfg.norm, spec.encoder);
    if (cfg.has_decoder()) validate_init(cfg.norm, spec.decoder);
    for (auto& p : model.store().params()) {
        auto data = p.value.mutable_data();
        switch (p.role) {
            case ParamRole::LnGain:
            case ParamRole::LnBias:
            case ParamRole::Bias:
            case ParamRole::Temperature:
                std::fill(data.begin(), data.end(), p.init_constant);
                continue;
            default:
                break;
        }
        Rng rng = Rng::stream(seed, p.init_key);
        const Shape& shape = p.value.shape();
        double std = 0.0;
        if (p.role == ParamRole::TokenEmbedding || p.role == ParamRole::PositionEmbedding) {
            std = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
        } else {
            std = std::sqrt(2.0 / static_cast<double>(shape[0] + shape[1]));
            const InitSpec& side = p.side == StackSide::Encoder ? spec.encoder : spec.decoder;
            if (p.side != StackSide::None && side.scales(p.role)) std *= side.weight_gain(cfg.norm);
        }
        Tensor fresh = randn_init(shape, std, rng);
        std::copy(fresh.data().begin(), fresh.data().end(), data.begin());
    }
}

}  // namespace scaleforge
