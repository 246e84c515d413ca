// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "scaleforge/error.hpp"

namespace scaleforge {

enum class Schedule { PolynomialDecay, InverseSqrt };

inline const char* schedule_name(Schedule s) {
    return s == Schedule::PolynomialDecay ? "polynomial_decay" : "inverse_sqrt";
}

inline Schedule parse_schedule(const std::string& s) {
    if (s == "polynomial_decay" || s == "polynomial") return Schedule::PolynomialDecay;
    if (s == "inverse_sqrt") return Schedule::InverseSqrt;
    throw ConfigError("unknown schedule '" + s + "' (polynomial_decay, inverse_sqrt)");
}

struct OptimConfig {
    double peak_lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-8;
    double weight_decay = 0.0;
    Schedule schedule = Schedule::PolynomialDecay;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1000;
    double end_lr = 0.0;
    double poly_power = 1.0;  // fixed; echoed into run metadata

    void validate() const {
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ConfigError("adam betas must be in [0, 1)");
        if (warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
        if (!(peak_lr >= 0.0)) throw ConfigError("peak learning rate must be non-negative");
        if (!(eps > 0.0)) throw ConfigError("adam eps must be positive");
        if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
    }
};

/// Learning rate at 1-based `step`.
///
/// Warmup (step <= warmup): peak * step / warmup. Afterwards polynomial decay
/// (power 1) runs linearly to end_lr at total_steps and stays there; inverse
/// sqrt gives peak * sqrt(warmup / step), with warmup 0 treated as 1.
inline double lr_at(std::size_t step, const OptimConfig& cfg) {
    if (step < 1) throw ConfigError("lr_at: step is 1-based");
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(cfg.warmup_steps);
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) return cfg.peak_lr * s / w;
    if (cfg.schedule == Schedule::InverseSqrt) return cfg.peak_lr * std::sqrt(std::max(w, 1.0) / s);
    if (step >= cfg.total_steps) return cfg.end_lr;
    const double frac = (static_cast<double>(cfg.total_steps) - s) / (static_cast<double>(cfg.total_steps) - w);
    return cfg.end_lr + (cfg.peak_lr - cfg.end_lr) * std::pow(frac, cfg.poly_power);
}

/// Per-parameter Adam moments plus the shared step counter.
struct AdamState {
    std::size_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One Adam update with bias correction and decoupled weight decay
/// (p <- p - lr * wd * p, applied before the moment update).
inline void adam_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
                      AdamState& state, double lr, const OptimConfig& cfg) {
    if (params.size() != grads.size()) throw ShapeError("adam_step: params/grads count mismatch");
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.size(), 0.0);
            state.v.emplace_back(p.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: state does not match parameter list");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params[k];
        auto g = grads[k];
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (g.size() != p.size() || m.size() != p.size())
            throw ShapeError("adam_step: shape mismatch in parameter " + std::to_string(k));
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (cfg.weight_decay != 0.0) p[i] -= lr * cfg.weight_decay * p[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

}  // namespace scaleforge
