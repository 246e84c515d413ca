// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scaleforge/blocks.hpp"
#include "scaleforge/checkpoint.hpp"
#include "scaleforge/clip.hpp"
#include "scaleforge/data.hpp"
#include "scaleforge/error.hpp"
#include "scaleforge/metrics.hpp"
#include "scaleforge/optim.hpp"
#include "scaleforge/rng.hpp"

namespace scaleforge {

struct TrainOptions {
    ModelConfig model;
    OptimConfig optim;
    ClipConfig clip;
    TaskSpec task;
    std::size_t steps = 1000;
    std::size_t batch = 32;
    std::uint64_t seed = 1;
    double label_smoothing = 0.0;
    std::size_t eval_every = 100;
    bool timing = false;  // wall-clock fields make metrics files run-dependent
    std::filesystem::path out;  // empty: keep everything in memory
    nlohmann::json echo;        // resolved config, stored verbatim in the run directory

    void validate() const {
        model.validate();
        optim.validate();
        clip.validate();
        if (steps == 0) throw ConfigError("steps must be positive");
        if (batch == 0) throw ConfigError("batch must be positive");
        if (eval_every == 0) throw ConfigError("eval_every must be positive");
        if (optim.total_steps != steps) throw ConfigError("optimizer total_steps must equal steps");
        if (clip.mode == ClipMode::SparseClip && !model.moe)
            throw ConfigError("sparseclip needs an MoE model (set experts > 0)");
        if (model.vocab != task.vocab) throw ConfigError("model vocab and task vocab differ");
        if (task.seq_len > model.max_positions) throw ConfigError("seq_len exceeds max_positions");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ConfigError("label_smoothing must be in [0, 1)");
    }
};

struct TrainResult {
    std::vector<MetricsRecord> records;
    std::optional<double> final_valid_ppl;
    std::size_t clip_count = 0;
    bool aborted = false;
    std::size_t abort_step = 0;
    std::string abort_reason;
};

/// exp(mean token NLL) over the validation batches, eval mode. Label
/// smoothing never enters.
inline double evaluate_ppl(const Model& model, const std::vector<Batch>& valid) {
    double total = 0.0;
    std::size_t count = 0;
    for (const Batch& b : valid) {
        ForwardContext ctx;
        ForwardResult r = model.forward(b, ctx);
        for (double v : token_nll(r.logits, b.targets)) total += v;
        count += b.targets.size();
    }
    if (count == 0) throw ConfigError("evaluate_ppl: empty validation set");
    return std::exp(total / static_cast<double>(count));
}

/// Parameters in store order, then the Adam moments under "optim.m/" and "optim.v/".
inline Checkpoint make_checkpoint(const Model& model, const AdamState& adam, const nlohmann::json& echo,
                                  std::size_t step, const std::string& status) {
    Checkpoint ck;
    ck.header["config"] = echo;
    ck.header["step"] = step;
    ck.header["adam_step"] = adam.step;
    ck.header["status"] = status;
    const auto& params = model.store().params();
    for (const auto& p : params) {
        auto d = p.value.data();
        ck.arrays.push_back(NamedArray{p.name, p.value.shape(), std::vector<double>(d.begin(), d.end())});
    }
    if (!adam.m.empty()) {
        for (const char* which : {"optim.m/", "optim.v/"}) {
            const auto& moments = which[6] == 'm' ? adam.m : adam.v;
            for (std::size_t k = 0; k < params.size(); ++k)
                ck.arrays.push_back(NamedArray{which + params[k].name, params[k].value.shape(), moments[k]});
        }
    }
    return ck;
}

inline void load_parameters(Model& model, const Checkpoint& ck) {
    for (auto& p : model.store().params()) {
        const NamedArray* a = ck.find(p.name);
        if (a == nullptr) throw ConfigError("checkpoint has no array '" + p.name + "'");
        if (a->shape != p.value.shape())
            throw ShapeError("checkpoint array '" + p.name + "' has shape " + shape_str(a->shape) + ", model expects " +
                             shape_str(p.value.shape()));
        auto d = p.value.mutable_data();
        std::copy(a->data.begin(), a->data.end(), d.begin());
    }
}

inline AdamState load_adam_state(const Model& model, const Checkpoint& ck) {
    AdamState s;
    s.step = ck.header.value("adam_step", std::size_t{0});
    for (const auto& p : model.store().params()) {
        const NamedArray* m = ck.find("optim.m/" + p.name);
        const NamedArray* v = ck.find("optim.v/" + p.name);
        if (m == nullptr || v == nullptr) return AdamState{};
        s.m.push_back(m->data);
        s.v.push_back(v->data);
    }
    return s;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + path.string());
    os << text;
}

inline std::string format_fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string run_report(const TrainOptions& opt, const TrainResult& res) {
    std::string s = "# Training run\n\n";
    s += "- model: " + std::string(arch_name(opt.model.arch)) + ", " + variant_name(opt.model.norm) + ", hidden " +
         std::to_string(opt.model.hidden) + "\n";
    s += "- task: " + std::string(task_name(opt.task.kind)) + ", steps " + std::to_string(opt.steps) + ", seed " +
         std::to_string(opt.seed) + "\n";
    s += "- clip: " + std::string(clip_mode_name(opt.clip.mode)) + ", triggered " + std::to_string(res.clip_count) +
         " times\n";
    if (res.aborted)
        s += "- aborted at step " + std::to_string(res.abort_step) + ": " + res.abort_reason + "\n";
    s += "\n| step | train loss | valid PPL |\n|---:|---:|---:|\n";
    for (const auto& r : res.records)
        if (r.valid_ppl)
            s += "| " + std::to_string(r.step) + " | " + format_fixed(r.train_loss) + " | " +
                 format_fixed(*r.valid_ppl) + " |\n";
    return s;
}

}  // namespace detail

/// Runs one training job. Single-threaded and deterministic given the options.
///
/// A non-finite loss or gradient ends the run: the parameters from before the
/// failing step are written as checkpoint.final (status "last_good"), a
/// diagnostic line is appended to metrics.jsonl, and the result is marked
/// aborted.
inline TrainResult train(const TrainOptions& opt, const Dataset& data, Model& model) {
    opt.validate();
    const bool to_disk = !opt.out.empty();
    std::ofstream jsonl;
    if (to_disk) {
        std::filesystem::create_directories(opt.out);
        detail::write_text(opt.out / "config.echo", opt.echo.dump(2) + "\n");
        jsonl.open(opt.out / "metrics.jsonl", std::ios::binary | std::ios::trunc);
        if (!jsonl) throw Error("cannot write " + (opt.out / "metrics.jsonl").string());
    }

    Rng data_rng = Rng::stream(opt.seed, "data.train");
    Rng dropout_rng = Rng::stream(opt.seed, "dropout");
    const std::size_t experts = opt.model.moe ? opt.model.moe->num_experts : 1;
    const double balance_weight = opt.model.moe ? opt.model.moe->balance_weight : 0.0;
    auto& params = model.store().params();

    TrainResult res;
    AdamState adam;
    ClipCounter clips;
    std::size_t last_step = 0;

    for (std::size_t step = 1; step <= opt.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        Batch b = data.sample_train(opt.batch, data_rng);
        ForwardContext ctx{true, &dropout_rng};
        model.store().zero_grad();

        MetricsRecord rec;
        rec.step = step;
        rec.lr = lr_at(step, opt.optim);
        try {
            ForwardResult fr = model.forward(b, ctx);
            Tensor ce = cross_entropy(fr.logits, b.targets, opt.label_smoothing);
            Tensor loss = ce;
            if (!fr.moe.empty()) {
                double bal = 0.0;
                for (const auto& m : fr.moe) {
                    bal += m.balance.item();
                    rec.routing_entropy.push_back(routing_entropy(m.routing));
                    rec.expert_load.push_back(expert_load(m.routing));
                }
                rec.balance_loss = bal;
                if (balance_weight > 0.0) {
                    Tensor total = fr.moe[0].balance;
                    for (std::size_t i = 1; i < fr.moe.size(); ++i) total = add(total, fr.moe[i].balance);
                    loss = add(ce, scale(total, balance_weight));
                }
            }
            rec.train_loss = ce.item();
            if (!std::isfinite(loss.item())) throw NumericalError("non-finite training loss");
            backward(loss);
            GradGroups groups = GradGroups::from_params(params, experts);
            ClipReport cr = clip_gradients(groups, opt.clip);
            clips.record(cr);
            rec.grad_norm_dense = cr.norm_dense;
            rec.grad_norm_sparse_raw = cr.norm_sparse_raw;
            rec.grad_norm_used = cr.norm_used;
            rec.clip_triggered = cr.triggered;
            rec.clip_trigger_cumulative = clips.count();
        } catch (const NumericalError& e) {
            res.aborted = true;
            res.abort_step = step;
            res.abort_reason = e.what();
            break;
        }

        std::vector<std::span<double>> ps;
        std::vector<std::span<const double>> gs;
        for (auto& p : params) {
            ps.push_back(p.value.mutable_data());
            gs.push_back(p.value.mutable_grad());
        }
        adam_step(ps, gs, adam, rec.lr, opt.optim);

        if (step % opt.eval_every == 0 || step == opt.steps) {
            rec.valid_ppl = evaluate_ppl(model, data.valid());
            res.final_valid_ppl = rec.valid_ppl;
        }
        if (opt.timing) {
            const double ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            rec.wall_ms = ms;
            rec.tokens_per_sec = static_cast<double>(b.targets.size()) / (ms / 1000.0);
        }
        if (jsonl.is_open()) jsonl << to_json(rec).dump() << '\n' << std::flush;
        res.records.push_back(std::move(rec));
        last_step = step;
    }
    res.clip_count = clips.count();

    if (to_disk) {
        if (res.aborted) {
            nlohmann::json diag;
            diag["schema"] = kMetricsSchema;
            diag["event"] = "abort";
            diag["step"] = res.abort_step;
            diag["reason"] = res.abort_reason;
            jsonl << diag.dump() << '\n';
        }
        jsonl.close();
        write_checkpoint(opt.out / "checkpoint.final",
                         make_checkpoint(model, adam, opt.echo, last_step, res.aborted ? "last_good" : "final"));
        std::ofstream csv(opt.out / "metrics.csv", std::ios::binary | std::ios::trunc);
        write_metrics_csv(csv, res.records);
        detail::write_text(opt.out / "report.md", detail::run_report(opt, res));
    }
    return res;
}

/// Convenience overload: builds the dataset and model from the options.
inline TrainResult train(const TrainOptions& opt) {
    opt.validate();
    auto data = make_dataset(opt.task, opt.model.arch);
    Model model(opt.model, opt.seed);
    return train(opt, *data, model);
}

}  // namespace scaleforge
