// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "scaleforge/trainer.hpp"

namespace scaleforge {

/// Worker count from SCALEFORGE_THREADS (default 1). Runs share nothing, so
/// results do not depend on this value.
inline std::size_t sweep_threads() {
    const char* env = std::getenv("SCALEFORGE_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    const long n = std::strtol(env, nullptr, 10);
    if (n < 1) throw ConfigError("SCALEFORGE_THREADS must be a positive integer");
    return static_cast<std::size_t>(n);
}

/// Calls job(i) for i in [0, n) on up to `threads` workers. The first
/// exception thrown by any job is rethrown after all workers finish.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex mu;
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                job(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    if (failure) std::rethrow_exception(failure);
}

struct SweepRun {
    std::string label;
    TrainOptions options;
    TrainResult result;
};

struct SweepReport {
    std::string title;
    std::vector<SweepRun> runs;
    std::string markdown;
};

namespace detail {

inline std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : std::string(w - s.size(), ' ') + s; }

inline std::string opt_cell(const std::optional<double>& v, int digits) {
    return v ? format_fixed(*v, digits) : std::string("-");
}

/// One markdown table: a row per step of the shared grid, a column per run.
inline std::string curve_table(const std::string& heading, const std::vector<SweepRun>& runs,
                               const std::vector<std::size_t>& steps,
                               const std::function<std::string(const MetricsRecord&)>& cell) {
    std::size_t w = 12;
    for (const auto& r : runs) w = std::max(w, r.label.size());
    std::string s = "## " + heading + "\n\n| " + pad("step", 6) + " |";
    for (const auto& r : runs) s += " " + pad(r.label, w) + " |";
    s += "\n|" + std::string(7, '-') + ":|";
    for (std::size_t i = 0; i < runs.size(); ++i) s += std::string(w + 1, '-') + ":|";
    s += "\n";
    for (std::size_t step : steps) {
        s += "| " + pad(std::to_string(step), 6) + " |";
        for (const auto& r : runs) {
            std::string c = "-";
            if (step >= 1 && step <= r.result.records.size()) c = cell(r.result.records[step - 1]);
            s += " " + pad(c, w) + " |";
        }
        s += "\n";
    }
    return s + "\n";
}

inline std::vector<std::size_t> eval_grid(const TrainOptions& o) {
    std::vector<std::size_t> g;
    for (std::size_t s = 1; s <= o.steps; ++s)
        if (s % o.eval_every == 0 || s == o.steps) g.push_back(s);
    return g;
}

inline std::string status_lines(const std::vector<SweepRun>& runs) {
    std::string s;
    for (const auto& r : runs) {
        s += "- " + r.label + ": ";
        if (r.result.aborted) {
            s += "diverged at step " + std::to_string(r.result.abort_step) + " (" + r.result.abort_reason + ")";
        } else {
            s += "finished, final valid PPL " + opt_cell(r.result.final_valid_ppl, 4);
            if (!r.result.records.empty())
                s += ", final train loss " + format_fixed(r.result.records.back().train_loss, 4);
        }
        s += ", clip triggers " + std::to_string(r.result.clip_count) + "\n";
    }
    return s + "\n";
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline void run_all(std::vector<SweepRun>& runs, const std::filesystem::path& out) {
    parallel_for(runs.size(), sweep_threads(), [&](std::size_t i) {
        SweepRun& r = runs[i];
        if (!out.empty()) r.options.out = out / r.label;
        r.result = train(r.options);
    });
}

inline void finish(SweepReport& rep, const std::filesystem::path& out) {
    if (!out.empty()) {
        std::filesystem::create_directories(out);
        write_text(out / "report.md", rep.markdown);
    }
}

}  // namespace detail

/// Trains the base configuration at each depth with identical data and seed.
/// Encoder-decoder models scale both stacks.
inline SweepReport sweep_depth(const TrainOptions& base, const std::vector<std::size_t>& depths,
                               const std::filesystem::path& out = {}) {
    if (depths.empty()) throw ConfigError("sweep-depth: no depths given");
    SweepReport rep;
    rep.title = "Depth sweep";
    for (std::size_t d : depths) {
        SweepRun r;
        r.options = base;
        if (r.options.model.has_decoder()) r.options.model.layers_dec = d;
        if (r.options.model.has_encoder()) r.options.model.layers_enc = d;
        r.options.echo["layers"] = d;
        r.label = "L" + std::to_string(d);
        r.options.validate();
        rep.runs.push_back(std::move(r));
    }
    detail::run_all(rep.runs, out);
    const auto grid = detail::eval_grid(base);
    rep.markdown = "# " + rep.title + "\n\n" + detail::status_lines(rep.runs) +
                   detail::curve_table("Validation PPL", rep.runs, grid,
                                       [](const MetricsRecord& m) { return detail::opt_cell(m.valid_ppl, 4); }) +
                   detail::curve_table("Train loss", rep.runs, grid,
                                       [](const MetricsRecord& m) { return detail::format_fixed(m.train_loss, 4); });
    detail::finish(rep, out);
    return rep;
}

/// Trains every (expert count, clip mode) pair. A base without MoE gets the
/// default router configuration.
inline SweepReport sweep_experts(const TrainOptions& base, const std::vector<std::size_t>& expert_counts,
                                 const std::vector<ClipMode>& modes, const std::filesystem::path& out = {}) {
    if (expert_counts.empty() || modes.empty()) throw ConfigError("sweep-experts: need expert counts and clip modes");
    SweepReport rep;
    rep.title = "Expert sweep";
    for (std::size_t e : expert_counts) {
        for (ClipMode mode : modes) {
            SweepRun r;
            r.options = base;
            RouterConfig rc = base.model.moe.value_or(RouterConfig{});
            rc.num_experts = e;
            rc.top_k = std::min(rc.top_k, e);
            r.options.model.moe = rc;
            r.options.clip.mode = mode;
            r.options.echo["experts"] = e;
            r.options.echo["top_k"] = rc.top_k;
            r.options.echo["clip"] = clip_mode_name(mode);
            r.label = "E" + std::to_string(e) + "-" + clip_mode_name(mode);
            r.options.validate();
            rep.runs.push_back(std::move(r));
        }
    }
    detail::run_all(rep.runs, out);
    const auto grid = detail::eval_grid(base);
    rep.markdown =
        "# " + rep.title + "\n\n" + detail::status_lines(rep.runs) +
        detail::curve_table("Validation PPL", rep.runs, grid,
                            [](const MetricsRecord& m) { return detail::opt_cell(m.valid_ppl, 4); }) +
        detail::curve_table("Routing entropy (mean over MoE layers, nats)", rep.runs, grid,
                            [](const MetricsRecord& m) { return detail::format_fixed(detail::mean_of(m.routing_entropy), 4); }) +
        detail::curve_table("Cumulative clip triggers", rep.runs, grid, [](const MetricsRecord& m) {
            return std::to_string(m.clip_trigger_cumulative);
        });
    detail::finish(rep, out);
    return rep;
}

/// Short high-lr runs without warmup, one per norm variant. Divergence is
/// recorded in the report, never thrown.
inline SweepReport stability_smoke(const TrainOptions& base, const std::vector<NormVariant>& variants,
                                   const std::filesystem::path& out = {}) {
    SweepReport rep;
    rep.title = "Stability smoke";
    for (NormVariant v : variants) {
        SweepRun r;
        r.options = base;
        r.options.model.norm = v;
        r.options.echo["norm"] = variant_name(v);
        r.label = variant_name(v);
        r.options.validate();
        rep.runs.push_back(std::move(r));
    }
    detail::run_all(rep.runs, out);
    std::vector<std::size_t> grid;
    for (std::size_t s = 1; s <= base.steps; ++s)
        if (s == 1 || s % 25 == 0 || s == base.steps) grid.push_back(s);
    rep.markdown = "# " + rep.title + "\n\n" + detail::status_lines(rep.runs) +
                   detail::curve_table("Train loss", rep.runs, grid,
                                       [](const MetricsRecord& m) { return detail::format_fixed(m.train_loss, 4); });
    detail::finish(rep, out);
    return rep;
}

}  // namespace scaleforge
