// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace scaleforge {

inline constexpr const char* kMetricsSchema = "scaleforge.metrics/1";

/// One training step. Perplexities use natural-log NLL. valid_ppl is set only
/// on evaluation steps; timing fields only when timing is recorded.
struct MetricsRecord {
    std::size_t step = 0;
    double train_loss = 0.0;
    std::optional<double> valid_ppl;
    double lr = 0.0;
    double grad_norm_dense = 0.0;
    double grad_norm_sparse_raw = 0.0;
    double grad_norm_used = 0.0;
    bool clip_triggered = false;
    std::size_t clip_trigger_cumulative = 0;
    std::vector<double> routing_entropy;                 // one per MoE layer
    std::vector<std::vector<std::size_t>> expert_load;   // one histogram per MoE layer
    std::optional<double> balance_loss;                  // unweighted sum over MoE layers
    std::optional<double> tokens_per_sec;
    std::optional<double> wall_ms;
};

namespace detail {
template <class T>
nlohmann::json opt_json(const std::optional<T>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
}  // namespace detail

inline nlohmann::json to_json(const MetricsRecord& r) {
    nlohmann::json j;
    j["schema"] = kMetricsSchema;
    j["step"] = r.step;
    j["train_loss"] = r.train_loss;
    j["valid_ppl"] = detail::opt_json(r.valid_ppl);
    j["lr"] = r.lr;
    j["grad_norm_dense"] = r.grad_norm_dense;
    j["grad_norm_sparse_raw"] = r.grad_norm_sparse_raw;
    j["grad_norm_used"] = r.grad_norm_used;
    j["clip_triggered"] = r.clip_triggered;
    j["clip_trigger_cumulative"] = r.clip_trigger_cumulative;
    j["routing_entropy"] = r.routing_entropy;
    j["expert_load"] = r.expert_load;
    j["balance_loss"] = detail::opt_json(r.balance_loss);
    j["tokens_per_sec"] = detail::opt_json(r.tokens_per_sec);
    j["wall_ms"] = detail::opt_json(r.wall_ms);
    return j;
}

inline MetricsRecord metrics_from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.train_loss = j.at("train_loss").get<double>();
    if (!j.at("valid_ppl").is_null()) r.valid_ppl = j["valid_ppl"].get<double>();
    r.lr = j.at("lr").get<double>();
    r.grad_norm_dense = j.at("grad_norm_dense").get<double>();
    r.grad_norm_sparse_raw = j.at("grad_norm_sparse_raw").get<double>();
    r.grad_norm_used = j.at("grad_norm_used").get<double>();
    r.clip_triggered = j.at("clip_triggered").get<bool>();
    r.clip_trigger_cumulative = j.at("clip_trigger_cumulative").get<std::size_t>();
    r.routing_entropy = j.at("routing_entropy").get<std::vector<double>>();
    r.expert_load = j.at("expert_load").get<std::vector<std::vector<std::size_t>>>();
    if (!j.at("balance_loss").is_null()) r.balance_loss = j["balance_loss"].get<double>();
    if (!j.at("tokens_per_sec").is_null()) r.tokens_per_sec = j["tokens_per_sec"].get<double>();
    if (!j.at("wall_ms").is_null()) r.wall_ms = j["wall_ms"].get<double>();
    return r;
}

namespace detail {
inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
template <class T>
std::string fmt_opt(const std::optional<T>& v) {
    return v ? fmt_double(static_cast<double>(*v)) : std::string();
}
}  // namespace detail

/// Flattened export: one column per scalar, routing_entropy_<layer> per MoE layer.
inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRecord>& records) {
    const std::size_t layers = records.empty() ? 0 : records.front().routing_entropy.size();
    os << "step,train_loss,valid_ppl,lr,grad_norm_dense,grad_norm_sparse_raw,grad_norm_used,clip_triggered,"
          "clip_trigger_cumulative,balance_loss";
    for (std::size_t l = 0; l < layers; ++l) os << ",routing_entropy_" << l;
    os << ",tokens_per_sec,wall_ms\n";
    for (const auto& r : records) {
        os << r.step << ',' << detail::fmt_double(r.train_loss) << ',' << detail::fmt_opt(r.valid_ppl) << ','
           << detail::fmt_double(r.lr) << ',' << detail::fmt_double(r.grad_norm_dense) << ','
           << detail::fmt_double(r.grad_norm_sparse_raw) << ',' << detail::fmt_double(r.grad_norm_used) << ','
           << (r.clip_triggered ? 1 : 0) << ',' << r.clip_trigger_cumulative << ','
           << detail::fmt_opt(r.balance_loss);
        for (std::size_t l = 0; l < layers; ++l)
            os << ',' << (l < r.routing_entropy.size() ? detail::fmt_double(r.routing_entropy[l]) : "");
        os << ',' << detail::fmt_opt(r.tokens_per_sec) << ',' << detail::fmt_opt(r.wall_ms) << '\n';
    }
}

}  // namespace scaleforge
