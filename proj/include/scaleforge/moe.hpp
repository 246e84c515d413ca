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

#include "scaleforge/error.hpp"
#include "scaleforge/layers.hpp"
#include "scaleforge/ops.hpp"

namespace scaleforge {

struct RouterConfig {
    std::size_t num_experts = 4;
    std::size_t top_k = 2;
    std::size_t routing_dim = 16;
    double temperature_init = 0.07;
    double temperature_min = 0.005;
    double temperature_max = 1.0;
    std::optional<double> capacity_factor;  // unset: no token dropping
    double balance_weight = 0.01;

    // E = 1 is accepted: it is the degenerate router used to check that the
    // sparse path reduces to a dense FFN.
    void validate() const {
        if (num_experts < 1) throw ConfigError("router: num_experts must be >= 1");
        if (top_k != 1 && top_k != 2) throw ConfigError("router: top_k must be 1 or 2");
        if (top_k > num_experts) throw ConfigError("router: top_k exceeds num_experts");
        if (routing_dim < 1) throw ConfigError("router: routing_dim must be >= 1");
        if (!(temperature_init > 0.0)) throw ConfigError("router: temperature must be positive");
        if (!(temperature_min > 0.0) || temperature_min > temperature_max)
            throw ConfigError("router: invalid temperature clamp range");
        if (balance_weight < 0.0) throw ConfigError("router: balance_weight must be >= 0");
        if (capacity_factor && !(*capacity_factor > 0.0)) throw ConfigError("router: capacity_factor must be > 0");
    }
};

struct RouterOutput {
    Tensor probs;                                // [t, E] softmax over all experts
    std::vector<std::vector<std::size_t>> indices;  // [t][k], descending probability
    Tensor gates;                                // [t, k] renormalized over kept assignments
    std::vector<std::vector<bool>> kept;         // [t][k]; false when capacity overflowed
    std::vector<bool> dropped;                   // [t]; true when no assignment was kept

    std::size_t tokens() const { return indices.size(); }
    std::size_t num_experts() const { return probs.dim(1); }
};

/// Routing scores: cosine(h W, e) / tau in the low-dimensional routing space.
///
/// Rows of h are first brought to a canonical power-of-two scale, so that any
/// power-of-two rescaling of the hiddens yields bit-identical scores. Norms
/// carry eps = 1e-9, which keeps zero rows finite.
inline Tensor xmoe_scores(const Tensor& h, const Tensor& proj, const Tensor& expert_embs, const Tensor& temperature) {
    if (h.rank() != 2 || proj.rank() != 2 || expert_embs.rank() != 2 || h.dim(1) != proj.dim(0) ||
        proj.dim(1) != expert_embs.dim(1)) {
        throw ShapeError("xmoe_scores: shapes " + shape_str(h.shape()) + ", " + shape_str(proj.shape()) + ", " +
                         shape_str(expert_embs.shape()) + " do not agree");
    }
    if (!(temperature.item() > 0.0)) {
        throw ConfigError("xmoe_scores: temperature must be positive");
    }
    Tensor routed = l2_normalize_rows(matmul(dyadic_rescale_rows(h), proj));
    Tensor keys = l2_normalize_rows(expert_embs);
    return div_scalar(matmul(routed, transpose(keys)), temperature);
}

/// Softmax, then top-k selection (ties to the lower index), then gate
/// renormalization over the selected experts.
///
/// With a capacity factor c, each expert accepts at most ceil(c t k / E)
/// assignments; first choices are served before second choices, each in
/// token order.
inline RouterOutput route_topk(const Tensor& scores, std::size_t k, std::optional<double> capacity_factor = {}) {
    if (scores.rank() != 2) throw ShapeError("route_topk: scores must be [t, E]");
    const std::size_t t = scores.dim(0);
    const std::size_t e = scores.dim(1);
    if (k < 1 || k > 2 || k > e) throw ConfigError("route_topk: k must be 1 or 2 and at most E");

    RouterOutput out;
    out.probs = softmax(scores);
    auto p = out.probs.data();
    out.indices.assign(t, std::vector<std::size_t>(k));
    for (std::size_t i = 0; i < t; ++i) {
        const double* row = p.data() + i * e;
        std::size_t best = 0;
        for (std::size_t j = 1; j < e; ++j)
            if (row[j] > row[best]) best = j;
        out.indices[i][0] = best;
        if (k == 2) {
            std::size_t second = best == 0 ? 1 : 0;
            for (std::size_t j = 0; j < e; ++j)
                if (j != best && row[j] > row[second]) second = j;
            out.indices[i][1] = second;
        }
    }
    out.kept.assign(t, std::vector<bool>(k, true));
    if (capacity_factor) {
        const auto cap = static_cast<std::size_t>(
            std::ceil(*capacity_factor * static_cast<double>(t * k) / static_cast<double>(e)));
        std::vector<std::size_t> load(e, 0);
        for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t i = 0; i < t; ++i) {
                std::size_t& l = load[out.indices[i][j]];
                if (l < cap) {
                    ++l;
                } else {
                    out.kept[i][j] = false;
                }
            }
        }
    }
    out.dropped.assign(t, false);
    for (std::size_t i = 0; i < t; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < k; ++j) any = any || out.kept[i][j];
        out.dropped[i] = !any;
    }
    out.gates = row_normalize(gather_cols(out.probs, out.indices, out.kept));
    return out;
}

/// E * sum_e f_e p_e, with f_e the top-1 dispatch fraction (constant) and p_e
/// the mean routing probability (differentiable).
inline Tensor balance_loss(const RouterOutput& r) {
    const std::size_t t = r.tokens();
    const std::size_t e = r.num_experts();
    if (t == 0) throw ShapeError("balance_loss: no tokens");
    std::vector<double> weights(e, 0.0);
    for (const auto& idx : r.indices) weights[idx[0]] += 1.0;
    for (double& w : weights) w = w / static_cast<double>(t) * static_cast<double>(e);
    return dot_const(mean_rows(r.probs), std::move(weights));
}

/// Shannon entropy (nats) of the batch-mean routing distribution.
inline double routing_entropy(const RouterOutput& r) {
    const std::size_t t = r.tokens();
    const std::size_t e = r.num_experts();
    if (t == 0) throw ShapeError("routing_entropy: no tokens");
    std::vector<double> mean_p(e, 0.0);
    auto p = r.probs.data();
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < e; ++j) mean_p[j] += p[i * e + j];
    double h = 0.0;
    for (double m : mean_p) {
        m /= static_cast<double>(t);
        if (m > 0.0) h -= m * std::log(m);
    }
    return h;
}

/// Number of kept assignments per expert.
inline std::vector<std::size_t> expert_load(const RouterOutput& r) {
    std::vector<std::size_t> load(r.num_experts(), 0);
    for (std::size_t i = 0; i < r.tokens(); ++i)
        for (std::size_t j = 0; j < r.indices[i].size(); ++j)
            if (r.kept[i][j]) ++load[r.indices[i][j]];
    return load;
}

struct MoeResult {
    Tensor output;    // [t, d]; zero rows for dropped tokens
    Tensor balance;   // scalar, unweighted
    RouterOutput routing;
};

/// Sparse FFN layer: E independent experts behind a cosine router.
struct MoeLayer {
    RouterConfig cfg;
    Tensor proj;         // [d, d_r]
    Tensor expert_embs;  // [E, d_r]
    Tensor temperature;  // [1], clamped on use
    std::vector<FeedForward> experts;

    /// `ffn_key` is the init key of the dense FFN this layer replaces; expert 0
    /// reuses it so that an E = 1 layer starts from the dense weights.
    static MoeLayer make(ParamStore& store, const std::string& name, const RouterConfig& cfg, std::size_t d,
                         std::size_t d_ff, bool sub_ln, double eps, StackSide side, const std::string& ffn_key) {
        cfg.validate();
        MoeLayer m;
        m.cfg = cfg;
        m.proj = store.add(name + ".router.proj", {d, cfg.routing_dim}, ParamRole::RouterProj, side,
                           name + ".router.proj");
        m.expert_embs = store.add(name + ".router.expert_embs", {cfg.num_experts, cfg.routing_dim},
                                  ParamRole::ExpertEmbedding, side, name + ".router.expert_embs");
        m.temperature = store.add(name + ".router.temperature", {1}, ParamRole::Temperature, side,
                                  name + ".router.temperature", false, cfg.temperature_init);
        for (std::size_t e = 0; e < cfg.num_experts; ++e) {
            const std::string key = e == 0 ? ffn_key : ffn_key + ".expert" + std::to_string(e);
            m.experts.push_back(FeedForward::make(store, name + ".experts." + std::to_string(e), d, d_ff, sub_ln, eps,
                                                  side, key, true));
        }
        return m;
    }

    RouterOutput route(const Tensor& x) const {
        Tensor tau = clamp(temperature, cfg.temperature_min, cfg.temperature_max);
        return route_topk(xmoe_scores(x, proj, expert_embs, tau), cfg.top_k, cfg.capacity_factor);
    }

    /// output[i] = sum over kept j of gate[i, j] * Expert_{idx[i, j]}(x[i]),
    /// accumulated in ascending expert order.
    MoeResult forward(const Tensor& x) const {
        if (x.rank() != 2) throw ShapeError("moe: input must be [t, d]");
        const std::size_t t = x.dim(0);
        const std::size_t d = x.dim(1);
        MoeResult res;
        res.routing = route(x);
        const RouterOutput& r = res.routing;
        std::vector<std::vector<std::size_t>> rows;
        std::vector<Tensor> parts;
        for (std::size_t e = 0; e < experts.size(); ++e) {
            std::vector<std::size_t> tok;
            std::vector<std::pair<std::size_t, std::size_t>> at;
            for (std::size_t i = 0; i < t; ++i) {
                for (std::size_t j = 0; j < r.indices[i].size(); ++j) {
                    if (r.indices[i][j] == e && r.kept[i][j]) {
                        tok.push_back(i);
                        at.emplace_back(i, j);
                    }
                }
            }
            if (tok.empty()) continue;
            Tensor y = experts[e](gather_rows(x, tok));
            parts.push_back(row_scale(y, gather_elements(r.gates, at)));
            rows.push_back(std::move(tok));
        }
        res.output = scatter_add_rows(t, d, rows, parts);
        res.balance = balance_loss(r);
        return res;
    }
};

}  // namespace scaleforge
