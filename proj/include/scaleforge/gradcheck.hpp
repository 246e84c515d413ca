// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "scaleforge/blocks.hpp"
#include "scaleforge/moe.hpp"
#include "scaleforge/ops.hpp"
#include "scaleforge/rng.hpp"

namespace scaleforge {

struct GradcheckResult {
    std::string name;
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
};

struct GradcheckOptions {
    double h = 1e-5;
    // Denominator floor of the relative error. Central differences carry
    // round-off of about eps * |loss| / h ~ 1e-10, so below ~1e-5 a gradient
    // entry is judged by absolute error (tol * floor) instead.
    double floor = 1e-5;
    std::size_t max_coords_per_input = 0;  // 0: every coordinate
    std::uint64_t pick_seed = 0;
};

/// Compares the tape gradient of loss_fn() with respect to each input against
/// central differences (f(x+h) - f(x-h)) / 2h. Relative error per coordinate
/// is |a - n| / max(|a|, |n|, floor), floor as in GradcheckOptions.
inline GradcheckResult check_gradients(const std::string& name, const std::function<Tensor()>& loss_fn,
                                       std::vector<Tensor> inputs, const GradcheckOptions& opt = {}) {
    for (auto& x : inputs) x.zero_grad();
    Tensor loss = loss_fn();
    if (loss.numel() != 1) throw ShapeError("check_gradients: loss must be a scalar");
    backward(loss);

    GradcheckResult res;
    res.name = name;
    Rng pick = Rng::stream(opt.pick_seed, "gradcheck.pick." + name);
    for (auto& x : inputs) {
        auto g = x.mutable_grad();  // inputs the loss never reached read as zero
        const std::vector<double> analytic(g.begin(), g.end());
        std::vector<std::size_t> coords(x.numel());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (opt.max_coords_per_input > 0 && coords.size() > opt.max_coords_per_input) {
            for (std::size_t i = 0; i < opt.max_coords_per_input; ++i)
                std::swap(coords[i], coords[i + pick.below(coords.size() - i)]);
            coords.resize(opt.max_coords_per_input);
        }
        auto data = x.mutable_data();
        for (std::size_t i : coords) {
            const double orig = data[i];
            data[i] = orig + opt.h;
            const double up = loss_fn().item();
            data[i] = orig - opt.h;
            const double down = loss_fn().item();
            data[i] = orig;
            const double numeric = (up - down) / (2.0 * opt.h);
            const double abs_err = std::abs(analytic[i] - numeric);
            const double rel = abs_err / std::max({std::abs(analytic[i]), std::abs(numeric), opt.floor});
            res.max_abs_error = std::max(res.max_abs_error, abs_err);
            res.max_rel_error = std::max(res.max_rel_error, rel);
            ++res.checked;
        }
    }
    return res;
}

struct GradcheckCase {
    std::string name;
    std::function<GradcheckResult(std::uint64_t seed, const GradcheckOptions&)> run;
};

namespace detail {

inline Tensor gc_input(Shape shape, Rng& rng, double std = 1.0) { return randn_init(std::move(shape), std, rng, true); }

/// sum_i w_i y_i with fixed random weights, so every output entry matters.
/// Weights have std n^-1/2, keeping the loss O(1) and its round-off small.
inline Tensor gc_project(const Tensor& y, std::uint64_t seed) {
    Rng rng = Rng::stream(seed, "gradcheck.weights");
    std::vector<double> w(y.numel());
    const double s = 1.0 / std::sqrt(static_cast<double>(w.size()));
    for (double& v : w) v = s * rng.normal();
    return dot_const(y, std::move(w));
}

using Builder = std::function<std::pair<std::vector<Tensor>, std::function<Tensor()>>(std::uint64_t)>;

inline GradcheckCase gc_case(std::string name, Builder build) {
    return GradcheckCase{name, [name, build](std::uint64_t seed, const GradcheckOptions& opt) {
                             auto [inputs, fn] = build(seed);
                             GradcheckOptions o = opt;
                             o.pick_seed = seed;
                             return check_gradients(name, fn, inputs, o);
                         }};
}

/// Elementwise case: y = op(inputs), loss = weighted sum of y.
inline GradcheckCase gc_unary(std::string name, Shape shape, std::function<Tensor(const Tensor&)> op,
                              double std = 1.0) {
    return gc_case(name, [=](std::uint64_t seed) {
        Rng rng = Rng::stream(seed, "gradcheck.inputs");
        Tensor x = gc_input(shape, rng, std);
        return std::make_pair(std::vector<Tensor>{x}, std::function<Tensor()>([=] { return gc_project(op(x), seed); }));
    });
}

inline GradcheckCase gc_binary(std::string name, Shape sa, Shape sb,
                               std::function<Tensor(const Tensor&, const Tensor&)> op) {
    return gc_case(name, [=](std::uint64_t seed) {
        Rng rng = Rng::stream(seed, "gradcheck.inputs");
        Tensor a = gc_input(sa, rng);
        Tensor b = gc_input(sb, rng);
        return std::make_pair(std::vector<Tensor>{a, b},
                              std::function<Tensor()>([=] { return gc_project(op(a, b), seed); }));
    });
}

inline std::vector<int> gc_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
    std::vector<int> t(n);
    for (int& v : t) v = static_cast<int>(rng.below(vocab));
    return t;
}

/// Tiny model: every parameter is an input, the loss is the training loss.
inline GradcheckCase gc_model(std::string name, ModelConfig cfg) {
    return gc_case(name, [=](std::uint64_t seed) {
        auto model = std::make_shared<Model>(cfg, seed);
        Rng rng = Rng::stream(seed, "gradcheck.batch");
        auto batch = std::make_shared<Batch>();
        batch->batch = 2;
        const std::size_t len = 5;
        if (cfg.has_encoder()) {
            batch->src_len = len;
            batch->src = gc_tokens(2 * len, cfg.vocab, rng);
        }
        if (cfg.has_decoder()) {
            batch->tgt_len = len;
            batch->tgt_in = gc_tokens(2 * len, cfg.vocab, rng);
        }
        batch->targets = gc_tokens(2 * len, cfg.vocab, rng);
        std::vector<Tensor> inputs;
        for (auto& p : model->store().params()) inputs.push_back(p.value);
        const double bw = cfg.moe ? cfg.moe->balance_weight : 0.0;
        std::function<Tensor()> fn = [model, batch, bw] {
            ForwardContext ctx;
            ForwardResult r = model->forward(*batch, ctx);
            Tensor loss = cross_entropy(r.logits, batch->targets, 0.1);
            for (const auto& m : r.moe) loss = add(loss, scale(m.balance, bw));
            return loss;
        };
        return std::make_pair(inputs, fn);
    });
}

inline ModelConfig gc_model_config(Arch arch, NormVariant norm) {
    ModelConfig c;
    c.arch = arch;
    c.layers_enc = arch == Arch::Decoder ? 0 : 2;
    c.layers_dec = arch == Arch::Encoder ? 0 : 2;
    c.hidden = 8;
    c.heads = 2;
    c.ffn_inner = 12;
    c.vocab = 7;
    c.max_positions = 8;
    c.norm = norm;
    return c;
}

}  // namespace detail

/// Every differentiable primitive, the router and MoE layer, and full
/// two-layer models in each norm variant.
inline std::vector<GradcheckCase> gradcheck_suite() {
    using namespace detail;
    std::vector<GradcheckCase> s;
    s.push_back(gc_binary("add", {3, 4}, {3, 4}, [](auto& a, auto& b) { return add(a, b); }));
    s.push_back(gc_binary("add.broadcast", {3, 4}, {4}, [](auto& a, auto& b) { return add(a, b); }));
    s.push_back(gc_binary("mul", {3, 4}, {3, 4}, [](auto& a, auto& b) { return mul(a, b); }));
    s.push_back(gc_binary("mul.broadcast", {3, 4}, {4}, [](auto& a, auto& b) { return mul(a, b); }));
    s.push_back(gc_unary("scale", {3, 4}, [](auto& x) { return scale(x, -1.7); }));
    s.push_back(gc_case("div_scalar", [](std::uint64_t seed) {
        Rng rng = Rng::stream(seed, "gradcheck.inputs");
        Tensor x = gc_input({3, 4}, rng);
        Tensor d = Tensor::from({1}, {0.5 + rng.uniform()}, true);
        return std::make_pair(std::vector<Tensor>{x, d},
                              std::function<Tensor()>([=] { return gc_project(div_scalar(x, d), seed); }));
    }));
    // Bounds sit well away from the N(0, 1) inputs' typical values; a kink
    // within h of an input would be a false alarm, so inputs near it are nudged.
    s.push_back(gc_case("clamp", [](std::uint64_t seed) {
        Rng rng = Rng::stream(seed, "gradcheck.inputs");
        Tensor x = gc_input({4, 5}, rng);
        for (double& v : x.mutable_data())
            for (double edge : {-0.5, 0.5})
                if (std::abs(v - edge) < 1e-3) v += 1e-2;
        return std::make_pair(std::vector<Tensor>{x},
                              std::function<Tensor()>([=] { return gc_project(clamp(x, -0.5, 0.5), seed); }));
    }));
    s.push_back(gc_unary("gelu", {4, 5}, [](auto& x) { return gelu(x); }, 2.0));
    s.push_back(gc_case("dropout", [](std::uint64_t seed) {
        Rng rng = Rng::stream(seed, "gradcheck.inputs");
        Tensor x = gc_input({4, 5}, rng);
        return std::make_pair(std::vector<Tensor>{x}, std::function<Tensor()>([=] {
                                  Rng mask = Rng::stream(seed, "gradcheck.dropout");
                                  return gc_project(dropout(x, 0.3, mask, true), seed);
                              }));
    }));
    s.push_back(gc_binary("matmul", {3, 4}, {4, 5}, [](auto& a, auto& b) { return matmul(a, b); }));
    s.push_back(gc_unary("transpose", {3, 4}, [](auto& x) { return transpose(x); }));
    s.push_back(gc_unary("slice", {4, 6}, [](auto& x) { return slice(x, 1, 2, 2, 3); }));
    s.push_back(gc_binary("concat.rows", {2, 3}, {3, 3}, [](auto& a, auto& b) { return concat({a, b}, 0); }));
    s.push_back(gc_binary("concat.cols", {3, 2}, {3, 4}, [](auto& a, auto& b) { return concat({a, b}, 1); }));
    s.push_back(gc_unary("causal_mask_fill", {4, 4}, [](auto& x) { return softmax(causal_mask_fill(x)); }));
    s.push_back(gc_case("layer_norm", [](std::uint64_t seed) {
        Rng rng = Rng::stream(seed, "gradcheck.inputs");
        Tensor x = gc_input({3, 6}, rng);
        Tensor g = gc_input({6}, rng);
        Tensor b = gc_input({6}, rng);
        return std::make_pair(std::vector<Tensor>{x, g, b},
                              std::function<Tensor()>([=] { return gc_project(layer_norm(x, g, b), seed); }));
    }));
    s.push_back(gc_unary("softmax", {3, 5}, [](auto& x) { return softmax(x); }, 2.0));
    for (double ls : {0.0, 0.1}) {
        s.push_back(gc_case(ls == 0.0 ? "cross_entropy" : "cross_entropy.label_smoothing", [ls](std::uint64_t seed) {
            Rng rng = Rng::stream(seed, "gradcheck.inputs");
            Tensor x = gc_input({4, 6}, rng, 2.0);
            auto targets = std::make_shared<std::vector<int>>(gc_tokens(4, 6, rng));
            return std::make_pair(std::vector<Tensor>{x},
                                  std::function<Tensor()>([=] { return cross_entropy(x, *targets, ls); }));
        }));
    }
    s.push_back(gc_unary("l2_normalize_rows", {3, 5}, [](auto& x) { return l2_normalize_rows(x); }));
    s.push_back(gc_unary("dyadic_rescale_rows", {3, 5}, [](auto& x) { return dyadic_rescale_rows(x); }));
    s.push_back(gc_unary("sum", {3, 4}, [](auto& x) { return sum(x); }));
    s.push_back(gc_unary("mean", {3, 4}, [](auto& x) { return mean(x); }));
    s.push_back(gc_unary("mean_rows", {3, 4}, [](auto& x) { return mean_rows(x); }));
    s.push_back(gc_unary("dot_const", {3, 4}, [](auto& x) { return dot_const(x, std::vector<double>(12, 0.25)); }));
    s.push_back(gc_unary("embedding_lookup", {5, 3}, [](auto& x) {
        const std::vector<int> ids{4, 0, 4, 2};
        return embedding_lookup(x, ids);
    }));
    s.push_back(gc_unary("gather_rows", {5, 3}, [](auto& x) { return gather_rows(x, {3, 1, 3}); }));
    s.push_back(gc_binary("scatter_add_rows", {2, 3}, {3, 3}, [](auto& a, auto& b) {
        return scatter_add_rows(4, 3, {{0, 2}, {2, 3, 0}}, {a, b});
    }));
    s.push_back(gc_unary("gather_cols", {3, 4}, [](auto& x) {
        return gather_cols(x, {{1, 3}, {0, 1}, {2, 0}}, {{true, true}, {true, false}, {false, true}});
    }));
    s.push_back(gc_case("row_normalize", [](std::uint64_t seed) {
        Rng rng = Rng::stream(seed, "gradcheck.inputs");
        Tensor x = Tensor::zeros({3, 4}, true);
        for (double& v : x.mutable_data()) v = 0.1 + rng.uniform();
        return std::make_pair(std::vector<Tensor>{x},
                              std::function<Tensor()>([=] { return gc_project(row_normalize(x), seed); }));
    }));
    s.push_back(gc_unary("gather_elements", {3, 4}, [](auto& x) { return gather_elements(x, {{0, 1}, {2, 3}, {0, 1}}); }));
    s.push_back(gc_binary("row_scale", {4, 3}, {4}, [](auto& a, auto& b) { return row_scale(a, b); }));

    s.push_back(gc_case("xmoe_scores", [](std::uint64_t seed) {
        Rng rng = Rng::stream(seed, "gradcheck.inputs");
        Tensor h = gc_input({5, 6}, rng);
        Tensor w = gc_input({6, 3}, rng);
        Tensor e = gc_input({4, 3}, rng);
        Tensor tau = Tensor::from({1}, {0.5 + 0.5 * rng.uniform()}, true);
        return std::make_pair(std::vector<Tensor>{h, w, e, tau},
                              std::function<Tensor()>([=] { return gc_project(xmoe_scores(h, w, e, tau), seed); }));
    }));
    s.push_back(gc_case("balance_loss", [](std::uint64_t seed) {
        Rng rng = Rng::stream(seed, "gradcheck.inputs");
        Tensor x = gc_input({6, 4}, rng);
        return std::make_pair(std::vector<Tensor>{x},
                              std::function<Tensor()>([=] { return balance_loss(route_topk(x, 2)); }));
    }));
    for (std::size_t k : {1, 2}) {
        s.push_back(gc_case("moe_layer.top" + std::to_string(k), [k](std::uint64_t seed) {
            auto store = std::make_shared<ParamStore>();
            RouterConfig rc;
            rc.num_experts = 4;
            rc.top_k = k;
            rc.routing_dim = 4;
            rc.temperature_init = 1.0;
            auto layer = std::make_shared<MoeLayer>(
                MoeLayer::make(*store, "moe", rc, 6, 8, false, 1e-5, StackSide::Decoder, "moe.ffn"));
            Rng rng = Rng::stream(seed, "gradcheck.inputs");
            for (auto& p : store->params())
                if (p.role != ParamRole::Temperature)
                    for (double& v : p.value.mutable_data()) v = rng.normal();
            Tensor x = gc_input({7, 6}, rng);
            std::vector<Tensor> inputs{x};
            for (auto& p : store->params()) inputs.push_back(p.value);
            return std::make_pair(inputs, std::function<Tensor()>([=] {
                                      MoeResult r = layer->forward(x);
                                      return add(gc_project(r.output, seed), r.balance);
                                  }));
        }));
    }

    for (NormVariant v : {NormVariant::PostLN, NormVariant::PreLN, NormVariant::SubLN, NormVariant::DeepNorm})
        s.push_back(gc_model(std::string("model.decoder.") + variant_name(v), gc_model_config(Arch::Decoder, v)));
    s.push_back(gc_model("model.encoder.deepnorm", gc_model_config(Arch::Encoder, NormVariant::DeepNorm)));
    s.push_back(gc_model("model.encoder-decoder.subln", gc_model_config(Arch::EncoderDecoder, NormVariant::SubLN)));
    s.push_back(
        gc_model("model.encoder-decoder.deepnorm", gc_model_config(Arch::EncoderDecoder, NormVariant::DeepNorm)));
    {
        ModelConfig c = gc_model_config(Arch::Decoder, NormVariant::SubLN);
        RouterConfig rc;
        rc.num_experts = 3;
        rc.routing_dim = 4;
        rc.temperature_init = 0.5;
        c.moe = rc;
        s.push_back(gc_model("model.decoder.subln.moe", c));
    }
    return s;
}

struct GradcheckSummary {
    std::vector<GradcheckResult> cases;  // worst seed per case
    double max_rel_error = 0.0;
};

/// Runs every case for seeds 1..num_seeds and keeps the worst result per case.
inline GradcheckSummary run_gradcheck_suite(std::size_t num_seeds, const GradcheckOptions& opt = {},
                                            const std::function<void(const GradcheckResult&)>& on_case = {}) {
    GradcheckSummary sum;
    for (const auto& c : gradcheck_suite()) {
        GradcheckResult worst;
        worst.name = c.name;
        for (std::uint64_t seed = 1; seed <= num_seeds; ++seed) {
            GradcheckResult r = c.run(seed, opt);
            worst.checked += r.checked;
            worst.max_abs_error = std::max(worst.max_abs_error, r.max_abs_error);
            worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
        }
        sum.max_rel_error = std::max(sum.max_rel_error, worst.max_rel_error);
        if (on_case) on_case(worst);
        sum.cases.push_back(worst);
    }
    return sum;
}

}  // namespace scaleforge
