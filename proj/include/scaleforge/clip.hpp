// SPDX-FileCopyrightText: 2026 The ScaleForge Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "scaleforge/error.hpp"
#include "scaleforge/layers.hpp"

namespace scaleforge {

/// Gradients split into the dense part and the expert (MoE) part.
/// Groups are views; clipping scales them in place.
struct GradGroups {
    struct Group {
        std::string name;
        std::span<double> grad;
    };
    std::vector<Group> dense;
    std::vector<Group> sparse;
    std::size_t num_experts = 1;

    /// Partition of a model's parameters: expert FFN weights are sparse,
    /// everything else (router included) is dense.
    static GradGroups from_params(std::vector<Parameter>& params, std::size_t num_experts) {
        GradGroups g;
        g.num_experts = num_experts;
        for (auto& p : params) {
            (p.expert ? g.sparse : g.dense).push_back(Group{p.name, p.value.mutable_grad()});
        }
        return g;
    }
};

enum class ClipMode { None, Vanilla, SparseClip };

inline const char* clip_mode_name(ClipMode m) {
    switch (m) {
        case ClipMode::None: return "none";
        case ClipMode::Vanilla: return "vanilla";
        case ClipMode::SparseClip: return "sparseclip";
    }
    return "?";
}

inline ClipMode parse_clip_mode(const std::string& s) {
    if (s == "none") return ClipMode::None;
    if (s == "vanilla") return ClipMode::Vanilla;
    if (s == "sparseclip") return ClipMode::SparseClip;
    throw ConfigError("unknown clip mode '" + s + "' (none, vanilla, sparseclip)");
}

struct ClipConfig {
    double xi = 1.0;
    ClipMode mode = ClipMode::None;

    void validate() const {
        if (mode != ClipMode::None && !(xi > 0.0)) throw ConfigError("clip threshold xi must be positive");
    }
};

struct ClipReport {
    double norm_used = 0.0;
    double scale_applied = 1.0;
    bool triggered = false;
    double norm_dense = 0.0;
    double norm_sparse_raw = 0.0;
    double kappa = 1.0;
};

/// kappa = 1 / sqrt(E).
inline double kappa(std::size_t num_experts) {
    if (num_experts < 1) throw ConfigError("kappa: number of experts must be >= 1");
    return 1.0 / std::sqrt(static_cast<double>(num_experts));
}

namespace detail {

inline double sum_squares(const std::vector<GradGroups::Group>& groups) {
    double ss = 0.0;
    for (const auto& g : groups) {
        double local = 0.0;
        for (double v : g.grad) local += v * v;
        if (!std::isfinite(local)) throw NumericalError("non-finite gradient in parameter group '" + g.name + "'");
        ss += local;
    }
    return ss;
}

}  // namespace detail

/// ||(g_d, g_s)||_2.
inline double global_norm_vanilla(const GradGroups& g) {
    return std::sqrt(detail::sum_squares(g.dense) + detail::sum_squares(g.sparse));
}

struct SparseClipNorm {
    double norm;
    double norm_dense;
    double norm_sparse_raw;
    double kappa;
};

/// ||(g_d, kappa g_s)||_2 with kappa = 1/sqrt(E). The sparse square sum is
/// divided by E (= kappa^2), which is exact for E = 1.
inline SparseClipNorm global_norm_sparseclip_parts(const GradGroups& g) {
    const double k = kappa(g.num_experts);
    const double ss_dense = detail::sum_squares(g.dense);
    const double ss_sparse = detail::sum_squares(g.sparse);
    const double norm = std::sqrt(ss_dense + ss_sparse / static_cast<double>(g.num_experts));
    return {norm, std::sqrt(ss_dense), std::sqrt(ss_sparse), k};
}

inline double global_norm_sparseclip(const GradGroups& g) { return global_norm_sparseclip_parts(g).norm; }

/// g <- xi / max(xi, ||g||) * g on every group, dense and sparse alike; the
/// mode only changes how ||g|| is measured. Triggers on norm > xi (strict).
inline ClipReport clip_gradients(GradGroups& g, const ClipConfig& cfg) {
    cfg.validate();
    ClipReport rep;
    const SparseClipNorm parts = global_norm_sparseclip_parts(g);
    rep.norm_dense = parts.norm_dense;
    rep.norm_sparse_raw = parts.norm_sparse_raw;
    rep.kappa = parts.kappa;
    switch (cfg.mode) {
        case ClipMode::None:
            rep.norm_used = global_norm_vanilla(g);
            return rep;
        case ClipMode::Vanilla:
            rep.norm_used = global_norm_vanilla(g);
            break;
        case ClipMode::SparseClip:
            rep.norm_used = parts.norm;
            break;
    }
    if (!std::isfinite(rep.norm_used)) throw NumericalError("non-finite gradient norm");
    if (rep.norm_used > cfg.xi) {
        rep.triggered = true;
        rep.scale_applied = cfg.xi / rep.norm_used;
        for (auto* groups : {&g.dense, &g.sparse})
            for (auto& grp : *groups)
                for (double& v : grp.grad) v *= rep.scale_applied;
    }
    return rep;
}

/// Running count of clip events.
class ClipCounter {
public:
    void record(const ClipReport& r) {
        if (r.triggered) ++count_;
    }
    std::size_t count() const { return count_; }

private:
    std::size_t count_ = 0;
};

}  // namespace scaleforge
