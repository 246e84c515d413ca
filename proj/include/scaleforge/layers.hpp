// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "scaleforge/ops.hpp"
#include "scaleforge/rng.hpp"
#include "scaleforge/tensor.hpp"

// Parameter registry and the small modules (linear, layer norm, attention,
// FFN) that the MoE layer and the transformer stacks are built from.
namespace scaleforge {

enum class ParamRole {
    TokenEmbedding,
    PositionEmbedding,
    QProj,
    KProj,
    VProj,
    OutProj,
    Fc1,
    Fc2,
    Head,
    Bias,
    LnGain,
    LnBias,
    RouterProj,
    ExpertEmbedding,
    Temperature,
};

inline const char* role_name(ParamRole r) {
    switch (r) {
        case ParamRole::TokenEmbedding: return "token_embedding";
        case ParamRole::PositionEmbedding: return "position_embedding";
        case ParamRole::QProj: return "q_proj";
        case ParamRole::KProj: return "k_proj";
        case ParamRole::VProj: return "v_proj";
        case ParamRole::OutProj: return "out_proj";
        case ParamRole::Fc1: return "fc1";
        case ParamRole::Fc2: return "fc2";
        case ParamRole::Head: return "head";
        case ParamRole::Bias: return "bias";
        case ParamRole::LnGain: return "ln_gain";
        case ParamRole::LnBias: return "ln_bias";
        case ParamRole::RouterProj: return "router_proj";
        case ParamRole::ExpertEmbedding: return "expert_embedding";
        case ParamRole::Temperature: return "temperature";
    }
    return "?";
}

enum class StackSide { None, Encoder, Decoder };

struct Parameter {
    std::string name;
    Tensor value;
    ParamRole role;
    StackSide side = StackSide::None;
    // Key of the RNG stream used at init. Expert 0 of an MoE layer shares the
    // key of the dense FFN it replaces.
    std::string init_key;
    bool expert = false;
    double init_constant = 0.0;
};

/// Owns the flat, ordered parameter list of a model.
class ParamStore {
public:
    Tensor add(std::string name, Shape shape, ParamRole role, StackSide side, std::string init_key,
               bool expert = false, double init_constant = 0.0) {
        Tensor t = Tensor::zeros(std::move(shape), true);
        params_.push_back(Parameter{std::move(name), t, role, side, std::move(init_key), expert, init_constant});
        return t;
    }

    std::vector<Parameter>& params() { return params_; }
    const std::vector<Parameter>& params() const { return params_; }

    const Parameter* find(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.value.zero_grad();
    }

private:
    std::vector<Parameter> params_;
};

struct ForwardContext {
    bool training = false;
    Rng* rng = nullptr;  // dropout source; required when training with p > 0
};

inline Tensor maybe_dropout(const Tensor& x, double p, ForwardContext& ctx) {
    if (!ctx.training || p == 0.0) return x;
    if (ctx.rng == nullptr) throw ConfigError("dropout in training mode needs an Rng");
    return dropout(x, p, *ctx.rng, true);
}

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]; undefined when the layer has no bias

    static Linear make(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, ParamRole role,
                       StackSide side, const std::string& key, bool expert = false, bool with_bias = true) {
        Linear l;
        l.weight = store.add(name + ".weight", {in, out}, role, side, key + ".weight", expert);
        if (with_bias) l.bias = store.add(name + ".bias", {out}, ParamRole::Bias, side, key + ".bias", expert);
        return l;
    }

    Tensor operator()(const Tensor& x) const {
        Tensor y = matmul(x, weight);
        return bias.defined() ? add(y, bias) : y;
    }
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;
    double eps = 1e-5;

    static LayerNorm make(ParamStore& store, const std::string& name, std::size_t d, StackSide side,
                          const std::string& key, double eps, bool expert = false) {
        LayerNorm ln;
        ln.gain = store.add(name + ".gain", {d}, ParamRole::LnGain, side, key + ".gain", expert, 1.0);
        ln.bias = store.add(name + ".bias", {d}, ParamRole::LnBias, side, key + ".bias", expert);
        ln.eps = eps;
        return ln;
    }

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
};

/// Position-wise FFN: fc2(drop?(LN_inner?(gelu(fc1(x))))). The inner LayerNorm
/// exists only for Sub-LN models.
struct FeedForward {
    Linear fc1;
    Linear fc2;
    std::optional<LayerNorm> inner_ln;

    static FeedForward make(ParamStore& store, const std::string& name, std::size_t d, std::size_t d_ff,
                            bool sub_ln, double eps, StackSide side, const std::string& key, bool expert = false) {
        FeedForward f;
        f.fc1 = Linear::make(store, name + ".fc1", d, d_ff, ParamRole::Fc1, side, key + ".fc1", expert);
        if (sub_ln) f.inner_ln = LayerNorm::make(store, name + ".inner_ln", d_ff, side, key + ".inner_ln", eps, expert);
        f.fc2 = Linear::make(store, name + ".fc2", d_ff, d, ParamRole::Fc2, side, key + ".fc2", expert);
        return f;
    }

    Tensor operator()(const Tensor& x) const {
        Tensor h = gelu(fc1(x));
        if (inner_ln) h = (*inner_ln)(h);
        return fc2(h);
    }
};

/// Multi-head scaled dot-product attention with 1/sqrt(d/h) scaling. Rows of
/// the query input are grouped as `batch` consecutive sequences of `tq` tokens,
/// and key/value rows as `batch` sequences of `tk` tokens.
struct Attention {
    Linear q_proj;
    Linear k_proj;
    Linear v_proj;
    Linear out_proj;
    std::optional<LayerNorm> inner_ln;  // Sub-LN: normalizes the merged heads before out_proj
    std::size_t heads = 1;

    static Attention make(ParamStore& store, const std::string& name, std::size_t d, std::size_t heads, bool sub_ln,
                          double eps, StackSide side) {
        Attention a;
        a.heads = heads;
        a.q_proj = Linear::make(store, name + ".q_proj", d, d, ParamRole::QProj, side, name + ".q_proj");
        a.k_proj = Linear::make(store, name + ".k_proj", d, d, ParamRole::KProj, side, name + ".k_proj");
        a.v_proj = Linear::make(store, name + ".v_proj", d, d, ParamRole::VProj, side, name + ".v_proj");
        if (sub_ln) a.inner_ln = LayerNorm::make(store, name + ".inner_ln", d, side, name + ".inner_ln", eps);
        a.out_proj = Linear::make(store, name + ".out_proj", d, d, ParamRole::OutProj, side, name + ".out_proj");
        return a;
    }

    Tensor operator()(const Tensor& xq, const Tensor& xkv, std::size_t batch, std::size_t tq, std::size_t tk,
                      bool causal, double attn_dropout, ForwardContext& ctx) const {
        const std::size_t d = xq.dim(1);
        const std::size_t dk = d / heads;
        const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dk));
        Tensor q = q_proj(xq);
        Tensor k = k_proj(xkv);
        Tensor v = v_proj(xkv);
        std::vector<Tensor> rows;
        rows.reserve(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            std::vector<Tensor> head_out;
            head_out.reserve(heads);
            for (std::size_t h = 0; h < heads; ++h) {
                Tensor qh = slice(q, b * tq, tq, h * dk, dk);
                Tensor kh = slice(k, b * tk, tk, h * dk, dk);
                Tensor vh = slice(v, b * tk, tk, h * dk, dk);
                Tensor s = scale(matmul(qh, transpose(kh)), scale_factor);
                if (causal) s = causal_mask_fill(s);
                Tensor p = maybe_dropout(softmax(s), attn_dropout, ctx);
                head_out.push_back(matmul(p, vh));
            }
            rows.push_back(heads == 1 ? head_out[0] : concat(head_out, 1));
        }
        Tensor merged = batch == 1 ? rows[0] : concat(rows, 0);
        if (inner_ln) merged = (*inner_ln)(merged);
        return out_proj(merged);
    }
};

}  // namespace scaleforge
